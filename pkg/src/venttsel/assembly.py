"""Galerkin assembly: bulk/boundary stiffness and mass, the dense nonlocal
boundary operator, and the load vector of the weak formulation.

The nonlocal operator entries are double boundary integrals of
(phi_i(x) - phi_i(y)) (phi_j(x) - phi_j(y)) |x - y|^{-(1+2s)} with |x - y| the
Euclidean chord distance. Assembly runs over segment pairs with three rules:

* identical segment: the hat-function differences are exactly proportional to
  (t - tau), so the block reduces to Int |t-tau|^{1-2s} over the square, which
  has one closed form valid for every s in (0, 1);
* adjacent segments (shared node, collinear or across a corner): Duffy split
  at the shared node; the radial factor integrates exactly to u^{3-2s}/(3-2s),
  leaving a smooth 1D angular integral done with fixed Gauss;
* separated segments: tensor Gauss with the order picked from the
  distance-to-diameter ratio.

Every pair contribution is a Gram-type block with positive quadrature weights,
so the assembled operator is symmetric positive semidefinite and annihilates
constants to roundoff by construction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, QuadraturePairError, RegularityRegimeWarning
from .meshing import BoundaryMesh, Mesh
from .quadrature import gauss01, tri_rule

__all__ = [
    "ProblemSpec",
    "DiscreteSystem",
    "NodalField",
    "QuadraturePolicy",
    "BoundaryQuadratureTable",
    "BoundaryLoadTable",
    "bulk_stiffness",
    "bulk_mass",
    "boundary_stiffness",
    "boundary_mass",
    "nonlocal_matrix",
    "load_vector",
    "assemble_system",
]


# --- problem data -------------------------------------------------------------


@dataclass(eq=False)
class NodalField:
    """Vector of nodal values over the mesh nodes."""

    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) != self.mesh.n_nodes:
            raise AssemblyError(
                f"field length {len(self.values)} != node count {self.mesh.n_nodes}"
            )

    def boundary_values(self, bm: BoundaryMesh | None = None) -> np.ndarray:
        """Trace on boundary nodes, in the boundary mesh's cyclic order."""
        bm = bm if bm is not None else self.mesh.boundary
        return self.values[bm.boundary_nodes]


@dataclass(eq=False)
class ProblemSpec:
    """Data of one Venttsel problem instance.

    s     : fractional order in (0, 1); orders >= 3/4 trigger a warning (the
            boundary-H2 diagnostics lose their theoretical backing there)
    b     : boundary coefficient, scalar >= 0, per-side array, or callable
    f     : bulk source, callable on (k, 2) point arrays (scalars accepted)
    g     : boundary source: callable, scalar, per-side array, a
            BoundaryQuadratureTable / BoundaryLoadTable, or a factory object
            with .build(boundary_mesh) returning one of those
    sigma : weight exponent for weighted diagnostics (optional)
    """

    s: float
    b: object
    f: object
    g: object
    sigma: float | None = None

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise AssemblyError(f"fractional order s={self.s} outside (0, 1)")
        if self.s >= 0.75:
            warnings.warn(
                f"s={self.s} >= 3/4: boundary-H2 regularity diagnostics are not backed",
                RegularityRegimeWarning,
                stacklevel=2,
            )
        if not callable(self.b):
            bvals = np.atleast_1d(np.asarray(self.b, dtype=float))
            if np.any(bvals < 0):
                raise AssemblyError("boundary coefficient b must be >= 0")

    @property
    def regularity_regime(self) -> bool:
        return self.s < 0.75

    @property
    def coercive(self) -> bool:
        """b not identically zero (callable b is trusted and checked at assembly)."""
        if callable(self.b):
            return True
        return bool(np.any(np.atleast_1d(np.asarray(self.b, dtype=float)) > 0))


@dataclass(eq=False)
class BoundaryQuadratureTable:
    """Boundary source tabulated at per-segment quadrature nodes of one mesh.

    The default layout is the order-point Gauss rule on every segment. A
    composite layout (e.g. graded toward corners) supplies `nodes` (normalized
    positions in [0, 1] per segment) and `weights` (absolute, summing to the
    segment length) instead. point_masses optionally carries (boundary-local
    node index, weight) pairs for point-supported parts of the data (they land
    on single basis functions since the carriers are mesh nodes).
    """

    order: int
    values: np.ndarray  # (S, K)
    nodes: np.ndarray | None = None  # (S, K) normalized, None -> Gauss(order)
    weights: np.ndarray | None = None  # (S, K) absolute
    point_masses: list | None = None


@dataclass(eq=False)
class BoundaryLoadTable:
    """Per-basis-function boundary load entries, boundary-local cyclic order."""

    values: np.ndarray  # (S,)


@dataclass(frozen=True)
class QuadraturePolicy:
    """Order ladder for the separated-pair tensor Gauss rules.

    threads > 1 evaluates separated-pair chunks in a thread pool; the chunk
    blocks are reduced in a fixed order, so results are bitwise identical
    across thread counts.
    """

    far_order: int = 4
    mid_order: int = 8
    near_order: int = 12
    angular_order: int = 16
    far_ratio: float = 4.0
    mid_ratio: float = 1.0
    check_tolerance: float | None = None
    chunk_size: int = 4096
    threads: int = 1


@dataclass(eq=False)
class DiscreteSystem:
    """Assembled operator blocks and load of the discrete weak formulation.

    The global operator is A_bulk plus the boundary blocks
    (A_bdry + M_b + Theta) embedded through boundary_nodes.
    """

    A_bulk: sp.csr_matrix
    A_bdry: sp.csr_matrix
    M_b: sp.csr_matrix
    Theta: np.ndarray
    load: np.ndarray
    boundary_nodes: np.ndarray
    mesh: Mesh
    bmesh: BoundaryMesh
    spec: ProblemSpec

    @property
    def n(self) -> int:
        return len(self.load)

    def boundary_block(self) -> np.ndarray:
        """Dense A_bdry + M_b + Theta over boundary nodes."""
        return self.A_bdry.toarray() + self.M_b.toarray() + self.Theta

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.A_bulk @ v
        vb = v[self.boundary_nodes]
        out_b = self.A_bdry @ vb + self.M_b @ vb + self.Theta @ vb
        np.add.at(out, self.boundary_nodes, out_b)
        return out

    def diagonal(self) -> np.ndarray:
        d = self.A_bulk.diagonal().copy()
        db = self.A_bdry.diagonal() + self.M_b.diagonal() + np.diag(self.Theta)
        d[self.boundary_nodes] += db
        return d

    def dense(self) -> np.ndarray:
        """Full dense operator (small systems only)."""
        A = self.A_bulk.toarray()
        bidx = self.boundary_nodes
        A[np.ix_(bidx, bidx)] += self.boundary_block()
        return A

    def energy(self, values: np.ndarray) -> float:
        """Quadratic form of the global operator."""
        return float(values @ self.matvec(values))


# --- bulk operators -----------------------------------------------------------


def _p1_gradients(mesh: Mesh) -> np.ndarray:
    """(T, 3, 2) gradients of the three hat functions on each triangle."""
    if "grads" not in mesh._cache:
        v = mesh.tri_verts
        area = mesh.areas
        if np.any(area <= 0):
            raise AssemblyError("degenerate triangle (non-positive area)")
        g = np.empty((mesh.n_triangles, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = v[:, j, 1] - v[:, k, 1]
            g[:, i, 1] = v[:, k, 0] - v[:, j, 0]
        mesh._cache["grads"] = g / (2.0 * area[:, None, None])
    return mesh._cache["grads"]


def _assemble_coo(tri: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return sp.coo_matrix(
        (local.transpose(0, 2, 1).ravel(), (rows, cols)), shape=(n, n)
    ).tocsr()


def bulk_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """P1 stiffness matrix of the bulk Dirichlet form; exact, no quadrature."""
    g = _p1_gradients(mesh)
    local = mesh.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    return _assemble_coo(mesh.triangles, local, mesh.n_nodes)


def bulk_mass(mesh: Mesh) -> sp.csr_matrix:
    """P1 mass matrix; exact."""
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas[:, None, None] * base[None, :, :]
    return _assemble_coo(mesh.triangles, local, mesh.n_nodes)


# --- boundary local operators ---------------------------------------------------


def _local_pairs_global(bm: BoundaryMesh):
    return bm.node_pairs  # (S, 2) global node indices


def _scatter_boundary(bm: BoundaryMesh, local: np.ndarray) -> sp.csr_matrix:
    """Accumulate (S, 2, 2) per-segment blocks into an (S_nodes, S_nodes) csr
    over boundary-local numbering."""
    S = bm.n_nodes
    lp = bm.local_pairs()
    rows = np.repeat(lp, 2, axis=1).ravel()
    cols = np.tile(lp, (1, 2)).ravel()
    return sp.coo_matrix(
        (local.transpose(0, 2, 1).ravel(), (rows, cols)), shape=(S, S)
    ).tocsr()


def boundary_stiffness(bm: BoundaryMesh) -> sp.csr_matrix:
    """1D arc-length stiffness along the closed boundary polyline; exact."""
    if np.any(bm.lengths <= 0):
        raise AssemblyError("zero-length boundary segment")
    pat = np.array([[1.0, -1.0], [-1.0, 1.0]])
    local = pat[None, :, :] / bm.lengths[:, None, None]
    return _scatter_boundary(bm, local)


def _b_segment_values(bm: BoundaryMesh, b, order: int = 8):
    """Resolve the boundary coefficient per segment.

    Returns ("const", (S,)) for scalar / per-side data or ("callable", fn).
    """
    if callable(b):
        return "callable", b
    vals = np.atleast_1d(np.asarray(b, dtype=float))
    if np.any(vals < 0):
        raise AssemblyError("boundary coefficient b must be >= 0")
    if vals.size == 1:
        return "const", np.full(bm.n_segments, float(vals[0]))
    nsides = bm.mesh.polygon.n_sides
    if vals.size != nsides:
        raise AssemblyError(f"per-side b needs {nsides} values, got {vals.size}")
    return "const", vals[bm.side_ids]


def boundary_mass(bm: BoundaryMesh, b, order: int = 8) -> sp.csr_matrix:
    """b-weighted boundary mass matrix (exact for per-side constant b)."""
    kind, data = _b_segment_values(bm, b, order)
    if kind == "const":
        base = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        local = (data * bm.lengths)[:, None, None] * base[None, :, :]
    else:
        pts, wts, hats = bm.gauss_points(order)
        bv = data(pts.reshape(-1, 2)).reshape(pts.shape[:2])
        if np.any(bv < -1e-14):
            raise AssemblyError("boundary coefficient b must be >= 0 (negative sample)")
        local = np.einsum("sk,sk,km,kn->smn", wts, bv, hats, hats)
    return _scatter_boundary(bm, local)


# --- nonlocal operator ----------------------------------------------------------


def _point_segment_dist(p, a, b):
    """Vectorized distance from points p to segments (a, b); all (P, 2)."""
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", p - a, d) / L2, 0.0, 1.0)
    feet = a + t[:, None] * d
    return np.linalg.norm(p - feet, axis=1)


def _segment_pair_dist(P0a, P1a, P0b, P1b):
    """Distance between non-crossing segment pairs: min of 4 endpoint distances."""
    return np.min(
        np.column_stack(
            [
                _point_segment_dist(P0a, P0b, P1b),
                _point_segment_dist(P1a, P0b, P1b),
                _point_segment_dist(P0b, P0a, P1a),
                _point_segment_dist(P1b, P0a, P1a),
            ]
        ),
        axis=1,
    )


def _identical_blocks(Theta, bm, s):
    L = bm.lengths
    S = bm.n_nodes
    entry = 2.0 * L ** (1.0 - 2.0 * s) / ((2.0 - 2.0 * s) * (3.0 - 2.0 * s))
    lp = bm.local_pairs()
    i, j = lp[:, 0], lp[:, 1]
    np.add.at(Theta, (i, i), entry)
    np.add.at(Theta, (j, j), entry)
    np.add.at(Theta, (i, j), -entry)
    np.add.at(Theta, (j, i), -entry)


def _adjacent_blocks(Theta, bm, s, order):
    """All pairs of consecutive segments (k, k+1 mod S), radial-exact Duffy."""
    S = bm.n_nodes
    k = np.arange(S)
    kn = (k + 1) % S
    La = bm.lengths[k]
    Lb = bm.lengths[kn]
    # arc parameterized from the shared node boundary_nodes[kn]
    ea = -bm.tangents[k]
    eb = bm.tangents[kn]
    cosb = np.einsum("ij,ij->i", ea, eb)

    v, w = gauss01(order)
    dP1 = v - 1.0  # T1 angular factors over dofs [shared, far_a, far_b]
    dQa1 = np.ones_like(v)
    dQb1 = -v
    dP2 = 1.0 - v
    dQa2 = v
    dQb2 = -np.ones_like(v)

    def tri_integral(d_list, gsq):
        # gsq: (S, n) squared radial scale; returns (S, 3, 3)
        kern = gsq ** (-(1.0 + 2.0 * s) / 2.0)
        out = np.empty((S, 3, 3))
        for m in range(3):
            for n_ in range(m, 3):
                val = np.einsum("k,k,k,sk->s", w, d_list[m], d_list[n_], kern)
                out[:, m, n_] = val
                out[:, n_, m] = val
        return out

    g1 = (La**2)[:, None] - 2.0 * (La * Lb * cosb)[:, None] * v[None, :] + (Lb**2)[:, None] * v[None, :] ** 2
    g2 = (La**2)[:, None] * v[None, :] ** 2 - 2.0 * (La * Lb * cosb)[:, None] * v[None, :] + (Lb**2)[:, None]
    C = tri_integral([dP1, dQa1, dQb1], g1) + tri_integral([dP2, dQa2, dQb2], g2)
    C *= (La * Lb / (3.0 - 2.0 * s))[:, None, None]
    C *= 2.0  # unordered pair stands for both (a,b) and (b,a)

    dofs = np.column_stack([kn, k, (k + 2) % S])  # [shared, far_a, far_b]
    np.add.at(Theta, (dofs[:, :, None], dofs[:, None, :]), C)


def _separated_chunk(bm, s, a, b, order):
    """(Caa, Cbb, Cab) blocks for one chunk of separated pairs."""
    x, wx = gauss01(order)
    hats = np.column_stack([1.0 - x, x])  # (n, 2)
    P0a, P1a = bm.segment_starts[a], bm.segment_ends[a]
    P0b, P1b = bm.segment_starts[b], bm.segment_ends[b]
    xq = P0a[:, None, :] + x[None, :, None] * (P1a - P0a)[:, None, :]
    yq = P0b[:, None, :] + x[None, :, None] * (P1b - P0b)[:, None, :]
    wa = bm.lengths[a][:, None] * wx[None, :]
    wb = bm.lengths[b][:, None] * wx[None, :]
    diff = xq[:, :, None, :] - yq[:, None, :, :]
    R2 = np.einsum("pijd,pijd->pij", diff, diff)
    WK = (wa[:, :, None] * wb[:, None, :]) * R2 ** (-(1.0 + 2.0 * s) / 2.0)
    Caa = np.einsum("pi,im,in->pmn", WK.sum(axis=2), hats, hats)
    Cbb = np.einsum("pj,jm,jn->pmn", WK.sum(axis=1), hats, hats)
    Cab = np.einsum("pij,im,jn->pmn", WK, hats, hats)
    return Caa, Cbb, Cab


def _separated_blocks(Theta, bm, s, pairs_a, pairs_b, order, policy):
    if len(pairs_a) == 0:
        return
    lp = bm.local_pairs()
    chunk = policy.chunk_size
    jobs = [
        (pairs_a[lo : lo + chunk], pairs_b[lo : lo + chunk])
        for lo in range(0, len(pairs_a), chunk)
    ]
    if policy.threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=policy.threads) as pool:
            results = list(
                pool.map(lambda ab: _separated_chunk(bm, s, ab[0], ab[1], order), jobs)
            )
    else:
        results = [_separated_chunk(bm, s, a, b, order) for a, b in jobs]
    # reduction in fixed chunk order: bitwise stable across thread counts
    for (a, b), (Caa, Cbb, Cab) in zip(jobs, results):
        ia, ib = lp[a], lp[b]  # (P, 2) local node indices
        np.add.at(Theta, (ia[:, :, None], ia[:, None, :]), 2.0 * Caa)
        np.add.at(Theta, (ib[:, :, None], ib[:, None, :]), 2.0 * Cbb)
        np.add.at(Theta, (ia[:, :, None], ib[:, None, :]), -2.0 * Cab)
        np.add.at(Theta, (ib[:, :, None], ia[:, None, :]), -2.0 * Cab.transpose(0, 2, 1))


def _separated_block_values(bm, s, pairs_a, pairs_b, order):
    """Standalone (P, 4, 4)-equivalent data for tolerance checking: returns the
    three blocks (Caa, Cbb, Cab) per pair at the given order."""
    x, wx = gauss01(order)
    hats = np.column_stack([1.0 - x, x])
    P0a, P1a = bm.segment_starts[pairs_a], bm.segment_ends[pairs_a]
    P0b, P1b = bm.segment_starts[pairs_b], bm.segment_ends[pairs_b]
    xq = P0a[:, None, :] + x[None, :, None] * (P1a - P0a)[:, None, :]
    yq = P0b[:, None, :] + x[None, :, None] * (P1b - P0b)[:, None, :]
    wa = bm.lengths[pairs_a][:, None] * wx[None, :]
    wb = bm.lengths[pairs_b][:, None] * wx[None, :]
    diff = xq[:, :, None, :] - yq[:, None, :, :]
    R2 = np.einsum("pijd,pijd->pij", diff, diff)
    WK = (wa[:, :, None] * wb[:, None, :]) * R2 ** (-(1.0 + 2.0 * s) / 2.0)
    Caa = np.einsum("pi,im,in->pmn", WK.sum(axis=2), hats, hats)
    Cbb = np.einsum("pj,jm,jn->pmn", WK.sum(axis=1), hats, hats)
    Cab = np.einsum("pij,im,jn->pmn", WK, hats, hats)
    return Caa, Cbb, Cab


def nonlocal_matrix(
    bm: BoundaryMesh, s: float, policy: QuadraturePolicy | None = None
) -> np.ndarray:
    """Dense Galerkin matrix of the nonlocal boundary form over boundary nodes.

    Entries use the Euclidean chord distance |x - y|; the matrix is symmetric,
    positive semidefinite, annihilates constants, and scales like t**(1-2s)
    under coordinate scaling by t.
    """
    if not 0.0 < s < 1.0:
        raise AssemblyError(f"fractional order s={s} outside (0, 1)")
    policy = policy or QuadraturePolicy()
    S = bm.n_nodes
    if S < 3:
        raise AssemblyError("boundary mesh must have at least 3 segments")
    Theta = np.zeros((S, S))

    _identical_blocks(Theta, bm, s)
    _adjacent_blocks(Theta, bm, s, policy.angular_order)

    a, b = np.triu_indices(S, k=1)
    adjacent = (b - a == 1) | ((a == 0) & (b == S - 1))
    a, b = a[~adjacent], b[~adjacent]
    if len(a):
        dist = _segment_pair_dist(
            bm.segment_starts[a], bm.segment_ends[a], bm.segment_starts[b], bm.segment_ends[b]
        )
        ratio = dist / np.maximum(bm.lengths[a], bm.lengths[b])
        groups = [
            (ratio > policy.far_ratio, policy.far_order),
            ((ratio > policy.mid_ratio) & (ratio <= policy.far_ratio), policy.mid_order),
            (ratio <= policy.mid_ratio, policy.near_order),
        ]
        for mask, order in groups:
            _separated_blocks(Theta, bm, s, a[mask], b[mask], order, policy)
        if policy.check_tolerance is not None:
            scale = np.abs(Theta).max()
            for mask, order in groups:
                aa, bb = a[mask], b[mask]
                for lo in range(0, len(aa), policy.chunk_size):
                    sl = slice(lo, lo + policy.chunk_size)
                    lo_blocks = _separated_block_values(bm, s, aa[sl], bb[sl], order)
                    hi_blocks = _separated_block_values(bm, s, aa[sl], bb[sl], 2 * order)
                    err = np.zeros(len(aa[sl]))
                    for lb, hb in zip(lo_blocks, hi_blocks):
                        err = np.maximum(err, np.abs(lb - hb).max(axis=(1, 2)))
                    worst = int(np.argmax(err))
                    if err[worst] > policy.check_tolerance * scale:
                        raise QuadraturePairError(
                            (int(aa[sl][worst]), int(bb[sl][worst])),
                            f"order-{order} vs order-{2*order} discrepancy "
                            f"{err[worst]:.3e} exceeds {policy.check_tolerance:.1e} * {scale:.3e}",
                        )
    return Theta


# --- load vector ----------------------------------------------------------------


def _as_bulk_source(f):
    if callable(f):
        return f
    c = float(f)
    return lambda pts: np.full(len(np.atleast_2d(pts)), c)


def load_vector(
    mesh: Mesh, bm: BoundaryMesh, f, g, boundary_order: int = 8
) -> np.ndarray:
    """Load vector: 3-point (degree-2) triangle rule for f, per-segment Gauss
    (default order 8) or a supplied table for g."""
    load = np.zeros(mesh.n_nodes)

    fsrc = _as_bulk_source(f)
    lam, wq = tri_rule(2)
    pts = np.einsum("kl,tld->tkd", lam, mesh.tri_verts)
    try:
        fv = np.asarray(fsrc(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    except Exception as exc:  # noqa: BLE001 - report the failing location
        raise AssemblyError(f"bulk source evaluation failed on element batch: {exc}") from exc
    if not np.all(np.isfinite(fv)):
        t, k = np.argwhere(~np.isfinite(fv))[0]
        raise AssemblyError(f"bulk source not finite at {pts[t, k]}")
    contrib = np.einsum("tk,tk,kl->tl", mesh.areas[:, None] * wq[None, :], fv, lam)
    np.add.at(load, mesh.triangles.ravel(), contrib.ravel())

    if hasattr(g, "build"):
        g = g.build(bm)
    if isinstance(g, BoundaryLoadTable):
        vals = np.asarray(g.values, dtype=float)
        if len(vals) != bm.n_nodes:
            raise AssemblyError("boundary load table length mismatch")
        np.add.at(load, bm.boundary_nodes, vals)
        return load

    if isinstance(g, BoundaryQuadratureTable):
        gv = np.asarray(g.values, dtype=float)
        if gv.shape[0] != bm.n_segments:
            raise AssemblyError("boundary quadrature table shape mismatch")
        if g.point_masses:
            for local, weight in g.point_masses:
                load[bm.boundary_nodes[local]] += weight
        if g.nodes is not None:
            x = np.asarray(g.nodes, dtype=float)
            wts = np.asarray(g.weights, dtype=float)
            hats = np.stack([1.0 - x, x], axis=2)  # (S, K, 2)
            seg_contrib = np.einsum("sk,sk,skm->sm", wts, gv, hats)
            gpairs = bm.node_pairs
            np.add.at(load, gpairs[:, 0], seg_contrib[:, 0])
            np.add.at(load, gpairs[:, 1], seg_contrib[:, 1])
            return load
        order = g.order
        if gv.shape != (bm.n_segments, order):
            raise AssemblyError("boundary quadrature table shape mismatch")
        pts_b, wts, hats = bm.gauss_points(order)
    else:
        order = boundary_order
        pts_b, wts, hats = bm.gauss_points(order)
        if callable(g):
            try:
                gv = np.asarray(g(pts_b.reshape(-1, 2)), dtype=float).reshape(pts_b.shape[:2])
            except Exception as exc:  # noqa: BLE001
                raise AssemblyError(f"boundary source evaluation failed: {exc}") from exc
        else:
            vals = np.atleast_1d(np.asarray(g, dtype=float))
            if vals.size == 1:
                gv = np.full(pts_b.shape[:2], float(vals[0]))
            elif vals.size == bm.mesh.polygon.n_sides:
                gv = np.repeat(vals[bm.side_ids][:, None], order, axis=1)
            else:
                raise AssemblyError("boundary source array must be scalar or per-side")
        if not np.all(np.isfinite(gv)):
            si, ki = np.argwhere(~np.isfinite(gv))[0]
            raise AssemblyError(f"boundary source not finite at {pts_b[si, ki]}")

    seg_contrib = np.einsum("sk,sk,km->sm", wts, gv, hats)
    gpairs = bm.node_pairs
    np.add.at(load, gpairs[:, 0], seg_contrib[:, 0])
    np.add.at(load, gpairs[:, 1], seg_contrib[:, 1])
    return load


def assemble_system(
    mesh: Mesh,
    bm: BoundaryMesh,
    spec: ProblemSpec,
    policy: QuadraturePolicy | None = None,
) -> DiscreteSystem:
    """Assemble all operator blocks and the load for a problem instance."""
    return DiscreteSystem(
        A_bulk=bulk_stiffness(mesh),
        A_bdry=boundary_stiffness(bm),
        M_b=boundary_mass(bm, spec.b),
        Theta=nonlocal_matrix(bm, spec.s, policy),
        load=load_vector(mesh, bm, spec.f, spec.g),
        boundary_nodes=bm.boundary_nodes,
        mesh=mesh,
        bmesh=bm,
        spec=spec,
    )
