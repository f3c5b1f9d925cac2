"""Conjugate-gradient solve of the assembled system plus spectral diagnostics."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import DiscreteSystem, NodalField
from .errors import SolverError

__all__ = [
    "SolveReport",
    "solve",
    "direct_solve",
    "min_eigenvalue",
    "min_eigenpair",
    "stability_ratio",
]

_HYPOTHESIS = "coercivity needs b >= 0 with b not identically zero on the boundary"


@dataclass(eq=False)
class SolveReport:
    iterations: int
    relative_residual: float
    solve_seconds: float
    lambda_min_estimate: float | None = None
    residual_history: list | None = None


def solve(
    system: DiscreteSystem,
    tol: float = 1e-10,
    maxit: int | None = None,
    x0: np.ndarray | None = None,
) -> tuple[NodalField, SolveReport]:
    """Jacobi-preconditioned conjugate gradients on the global operator.

    Requires a coercive problem (b not identically zero); the indefinite case
    is reported as a violated hypothesis, not silently iterated.
    """
    if not system.spec.coercive:
        raise SolverError(f"system is singular for b == 0; {_HYPOTHESIS}")
    if tol <= 0:
        raise SolverError("solver tolerance must be positive")
    n = system.n
    maxit = maxit if maxit is not None else 10 * n

    bvec = system.load
    bnorm = float(np.linalg.norm(bvec))
    t0 = time.perf_counter()
    if bnorm == 0.0:
        report = SolveReport(0, 0.0, time.perf_counter() - t0, residual_history=[0.0])
        return NodalField(np.zeros(n), system.mesh), report

    diag = system.diagonal()
    if np.any(diag <= 0):
        raise SolverError(f"non-positive diagonal entry; {_HYPOTHESIS}")
    inv_diag = 1.0 / diag

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = bvec - system.matvec(x)
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    history = [float(np.linalg.norm(r)) / bnorm]
    alphas, betas = [], []
    it = 0
    while history[-1] > tol and it < maxit:
        Ap = system.matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError(
                f"negative curvature in CG (p^T A p = {pAp:.3e}); {_HYPOTHESIS}",
                residual_history=history,
            )
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = float(r @ z)
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
        alphas.append(alpha)
        betas.append(beta)
        it += 1
        history.append(float(np.linalg.norm(r)) / bnorm)
    if history[-1] > tol:
        raise SolverError(
            f"CG did not reach tol={tol:.1e} in {maxit} iterations "
            f"(residual {history[-1]:.3e})",
            residual_history=history,
        )
    report = SolveReport(
        iterations=it,
        relative_residual=history[-1],
        solve_seconds=time.perf_counter() - t0,
        lambda_min_estimate=_lanczos_lambda_min(alphas, betas),
        residual_history=history,
    )
    return NodalField(x, system.mesh), report


def _lanczos_lambda_min(alphas, betas):
    """Smallest Ritz value of the CG-Lanczos tridiagonal matrix.

    Estimates the smallest eigenvalue of the Jacobi-preconditioned operator
    from the run's own coefficients; None when the run was too short.
    """
    k = len(alphas)
    if k < 2:
        return None
    diag = np.empty(k)
    off = np.empty(k - 1)
    diag[0] = 1.0 / alphas[0]
    for j in range(1, k):
        diag[j] = 1.0 / alphas[j] + betas[j - 1] / alphas[j - 1]
        off[j - 1] = math.sqrt(max(betas[j - 1], 0.0)) / alphas[j - 1]
    return float(scipy.linalg.eigh_tridiagonal(diag, off, eigvals_only=True)[0])


def direct_solve(system: DiscreteSystem, max_unknowns: int = 2000) -> NodalField:
    """Dense direct solve; independent cross-check for small systems."""
    if system.n > max_unknowns:
        raise SolverError(f"direct solve capped at {max_unknowns} unknowns (got {system.n})")
    x = scipy.linalg.solve(system.dense(), system.load, assume_a="sym")
    return NodalField(x, system.mesh)


def _global_sparse(system: DiscreteSystem) -> sp.csr_matrix:
    bidx = system.boundary_nodes
    block = sp.coo_matrix(system.boundary_block())
    emb = sp.coo_matrix(
        (block.data, (bidx[block.row], bidx[block.col])),
        shape=(system.n, system.n),
    )
    return (system.A_bulk + emb).tocsr()


def min_eigenpair(system: DiscreteSystem, boundary_cap: int = 512):
    """Smallest eigenvalue and eigenvector of the global operator."""
    if system.bmesh.n_nodes > boundary_cap:
        raise SolverError(
            f"min_eigenvalue capped at {boundary_cap} boundary nodes "
            f"(got {system.bmesh.n_nodes})"
        )
    if system.n <= 4000:
        w, v = scipy.linalg.eigh(_global_sparse(system).toarray())
        return float(w[0]), v[:, 0]
    A = _global_sparse(system)
    shift = -1e-8 * abs(A.diagonal()).max()
    w, v = spla.eigsh(A, k=1, sigma=shift, which="LM")
    return float(w[0]), v[:, 0]


def min_eigenvalue(system: DiscreteSystem, boundary_cap: int = 512) -> float:
    """Smallest eigenvalue of the global operator (coercivity certificate)."""
    return min_eigenpair(system, boundary_cap)[0]


def stability_ratio(u: NodalField, spec, f_norm: float, g_norm: float) -> float:
    """Discrete witness of the data-to-solution stability constant.

    Returns the composite norm of u divided by ||f||_L2(bulk) + ||g||_L2(bdry);
    zero data is rejected (the ratio is undefined).
    """
    from .analysis import v1_norm  # local import to avoid a cycle

    denom = float(f_norm) + float(g_norm)
    if denom <= 0.0:
        raise SolverError("stability ratio undefined for zero data")
    return v1_norm(u) / denom
