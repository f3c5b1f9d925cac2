"""Verification machinery: reference-quadrature oracles for the nonlocal
operator, manufactured problems with both boundary-data routes, and
convergence studies with rate estimation.

Oracle independence: the entry oracle integrates the raw double integrals with
generic adaptive quadrature (1D for the reduced identical-segment form, a
2D quadtree refined toward the diagonal / shared corners otherwise) and shares
no formula with the assembly path it checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import boundary_h2_diagnostic
from .assembly import (
    BoundaryLoadTable,
    BoundaryQuadratureTable,
    NodalField,
    ProblemSpec,
    QuadraturePolicy,
    _p1_gradients,
    assemble_system,
)
from .errors import OracleError, VenttselError
from .geometry import Polygon, build_polygon
from .meshing import BoundaryMesh, Mesh, extract_boundary, refine, triangulate
from .quadrature import (
    adaptive_interval,
    adaptive_rectangle,
    gauss01,
    gauss_interval,
    graded_breakpoints,
    tri_rule,
)
from .solver import solve, stability_ratio
from .transfer import boundary_interp, evaluate_field, evaluate_gradient

__all__ = [
    "theta_pointwise_oracle",
    "theta_entry_oracle",
    "ManufacturedProblem",
    "make_manufactured",
    "BenchmarkProblem",
    "lshape_benchmark",
    "energy_load_table",
    "PointwiseBoundarySource",
    "EnergyLoadSource",
    "ConvergenceTable",
    "convergence_study",
    "rate_estimate",
    "random_smooth_fields",
    "CONVERGENCE_CSV_HEADER",
]


# --- pointwise oracle -----------------------------------------------------------


def _numeric_tangential_derivative(trace, polygon, side, t_x, h_rel=1e-5):
    L = polygon.side_lengths[side]
    h = h_rel * L
    lo = min(t_x, L - t_x)
    if lo < 2 * h:  # shift the stencil inward near a corner
        center = np.clip(t_x, 2 * h, L - 2 * h)
    else:
        center = t_x
    ts = center + h * np.array([-2.0, -1.0, 1.0, 2.0])
    vals = np.asarray(trace(polygon.boundary_point(side, ts)), dtype=float)
    return float((vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h))


def _panel_sum(fvec, panels, order):
    """Per-panel Gauss values, one vectorized integrand call for all panels."""
    panels = np.asarray(panels, dtype=float)
    x, w = gauss01(order)
    a = panels[:, 0:1]
    b = panels[:, 1:2]
    ts = a + (b - a) * x[None, :]
    ws = (b - a) * w[None, :]
    vals = np.asarray(fvec(ts.ravel())).reshape(ts.shape)
    return list((vals * ws).sum(axis=1))


def theta_pointwise_oracle(
    polygon: Polygon,
    trace: Callable,
    x,
    s: float,
    tol: float = 1e-8,
    *,
    tangential_derivative: float | None = None,
    return_error: bool = False,
):
    """Pointwise nonlocal operator value 2 Int (u(x) - u(y)) |x-y|^{-(1+2s)} dl(y).

    Composite Gauss in arc length with dyadic panels toward y = x (and toward
    the corners nearest to x on the other sides). On x's own side the
    tangential linearization of the trace is subtracted and reintegrated as an
    analytic principal-value correction, which makes the scheme uniformly
    accurate in s; the leftover dyadic cores are summed by geometric
    extrapolation. Tolerance is absolute plus relative.

    Preconditions: the trace is Lipschitz near x for s < 1/2 and C1 along the
    boundary near x for s >= 1/2; for s >= 1/2, x must not be a corner.
    """
    if not 0.0 < s < 1.0:
        raise OracleError(f"s={s} outside (0, 1)")
    x = np.asarray(x, dtype=float)
    side_x, t_x = polygon.locate_boundary_point(x)
    L_x = polygon.side_lengths[side_x]
    eps_corner = 1e-12 * max(1.0, L_x)
    at_corner = t_x <= eps_corner or t_x >= L_x - eps_corner
    if at_corner and s >= 0.5:
        raise OracleError(
            "pointwise nonlocal value may be unbounded at a corner for s >= 1/2; "
            "use the form-based load route instead"
        )
    ux = float(np.asarray(trace(x[None, :]))[0])

    def run(order, layers):
        total_hi = 0.0
        total_lo = 0.0
        err_extra = 0.0
        for side in range(polygon.n_sides):
            L = polygon.side_lengths[side]
            p0 = polygon.side_starts[side]
            tan = polygon.side_tangents[side]

            def integrand(ts, side=side, p0=p0, tan=tan):
                y = p0[None, :] + ts[:, None] * tan[None, :]
                dx = y[:, 0] - x[0]
                dy = y[:, 1] - x[1]
                d2 = dx * dx + dy * dy
                return (ux - np.asarray(trace(y))) * d2 ** (-(1.0 + 2.0 * s) / 2.0)

            if side != side_x:
                dmin = min(
                    np.linalg.norm(polygon.side_starts[side] - x),
                    np.linalg.norm(polygon.side_ends[side] - x),
                )
                k_end = int(min(layers, max(10, math.ceil(math.log2(L / max(dmin, 1e-14))) + 6)))
                brk = np.union1d(
                    graded_breakpoints(0.0, L, 0.0, k_end),
                    graded_breakpoints(0.0, L, L, k_end),
                )
                panels = list(zip(brk[:-1], brk[1:]))
                hi = _panel_sum(integrand, panels, order)
                lo = _panel_sum(integrand, panels, order // 2)
                total_hi += sum(hi)
                total_lo += sum(lo)
                continue

            # own side: subtract the tangential linearization
            if at_corner:
                a_slope = None  # Lipschitz path: no subtraction, s < 1/2 here
            else:
                a_slope = (
                    tangential_derivative
                    if tangential_derivative is not None
                    else _numeric_tangential_derivative(trace, polygon, side, t_x)
                )

            def reg_integrand(ts):
                y = p0[None, :] + ts[:, None] * tan[None, :]
                d = np.abs(ts - t_x)
                vals = ux - np.asarray(trace(y))
                if a_slope is not None:
                    vals = vals + a_slope * (ts - t_x)
                return vals * d ** (-(1.0 + 2.0 * s))

            # decay ratios of the dyadic panel series toward t_x: the leading
            # integrand power is 2 - 2s (regularized) or 1 - 2s (Lipschitz)
            lead = 2.0 - 2.0 * s if a_slope is not None else 1.0 - 2.0 * s
            rho1 = 2.0 ** (-lead)
            rho2 = 2.0 ** (-(lead + 1.0))
            for lo_end, hi_end in ((0.0, t_x), (t_x, L)):
                length = hi_end - lo_end
                if length <= eps_corner:
                    continue
                # stop the layers around 1e-5 of the side length: deeper panels
                # drown in roundoff of the regularized difference
                k_own = int(np.clip(math.ceil(math.log2(length / (1e-5 * L))), 5, layers))
                brk = graded_breakpoints(lo_end, hi_end, t_x, k_own)
                panels = list(zip(brk[:-1], brk[1:]))
                if t_x == lo_end:
                    panels = panels[1:]  # drop the core touching t_x
                else:
                    panels = panels[:-1]
                hi = _panel_sum(reg_integrand, panels, order)
                lo = _panel_sum(reg_integrand, panels, order // 2)
                total_hi += sum(hi)
                total_lo += sum(lo)
                # close the dropped geometric tail with a two-term fit at the
                # theoretical ratios; the one-term value bounds its error
                p_last = hi[0] if t_x == lo_end else hi[-1]
                p_prev = hi[1] if t_x == lo_end else hi[-2]
                X = (p_prev - p_last / rho2) / (1.0 / rho1 - 1.0 / rho2)
                Y = p_last - X
                tail2 = X * rho1 / (1.0 - rho1) + Y * rho2 / (1.0 - rho2)
                tail1 = p_last * rho1 / (1.0 - rho1)
                total_hi += tail2
                total_lo += tail2
                # |tail2 - tail1| is the first-order tail correction; the
                # two-term residual is another order down
                err_extra += 0.2 * abs(tail2 - tail1) + 1e-15 * (1.0 + abs(tail2))

            if a_slope is not None:
                if abs(s - 0.5) < 1e-14:
                    corr = math.log((L - t_x) / t_x)
                else:
                    corr = ((L - t_x) ** (1.0 - 2.0 * s) - t_x ** (1.0 - 2.0 * s)) / (
                        1.0 - 2.0 * s
                    )
                total_hi -= a_slope * corr
                total_lo -= a_slope * corr
        return 2.0 * total_hi, 2.0 * abs(total_hi - total_lo) + 2.0 * err_extra

    value, err = run(16, 44)
    if err > tol * (1.0 + abs(value)):
        value, err = run(24, 52)
    if err > tol * (1.0 + abs(value)):
        raise OracleError(
            f"pointwise oracle error estimate {err:.3e} exceeds tol at x={x}"
        )
    return (value, err) if return_error else value


# --- entry oracle ---------------------------------------------------------------


def _hat_on_segment(local_node, seg, S):
    """Coefficient functions of the hat of boundary-local node on a segment."""
    start, end = seg, (seg + 1) % S

    if local_node == start:
        return lambda t, L: 1.0 - t / L
    if local_node == end:
        return lambda t, L: t / L
    return lambda t, L: np.zeros_like(t)


def theta_entry_oracle(
    bm: BoundaryMesh,
    i: int,
    j: int,
    s: float,
    tol: float = 1e-9,
    max_cells: int = 60000,
) -> float:
    """Adaptive reference value of one Galerkin entry of the nonlocal form.

    Sums over all contributing segment pairs: the identical-segment part
    reduces exactly to a 1D integral (endpoint singularity handled by adaptive
    dyadic bisection); adjacent pairs use a 2D quadtree refined toward the
    shared corner; separated pairs plain adaptive tensor Gauss. Desk-scale
    only (boundary node count <= 64).
    """
    S = bm.n_nodes
    if S > 64:
        raise OracleError("entry oracle is desk-scale only (<= 64 boundary nodes)")
    pairs = []
    for a in range(S):
        for b in range(a, S):
            dofs = {a, (a + 1) % S, b, (b + 1) % S}
            if i in dofs and j in dofs:
                pairs.append((a, b))
    if not pairs:
        return 0.0
    tol_pair = tol / len(pairs)
    total = 0.0
    for a, b in pairs:
        La, Lb = float(bm.lengths[a]), float(bm.lengths[b])
        if a == b:
            gi = -1.0 if i == a else (1.0 if i == (a + 1) % S else 0.0)
            gj = -1.0 if j == a else (1.0 if j == (a + 1) % S else 0.0)
            if gi == 0.0 or gj == 0.0:
                continue

            def f1d(w):
                return (La - w) * w ** (1.0 - 2.0 * s)

            val, _ = adaptive_interval(
                f1d, 0.0, La, tol_pair, singular_end=0.0, singular_power=1.0 - 2.0 * s
            )
            total += gi * gj * 2.0 * val / La**2
            continue

        P0a, tana = bm.segment_starts[a], bm.tangents[a]
        P0b, tanb = bm.segment_starts[b], bm.tangents[b]
        hat_ia = _hat_on_segment(i, a, S)
        hat_ib = _hat_on_segment(i, b, S)
        hat_ja = _hat_on_segment(j, a, S)
        hat_jb = _hat_on_segment(j, b, S)

        def f2d(t, tau):
            xpts = P0a[None, :] + t[:, None] * tana[None, :]
            ypts = P0b[None, :] + tau[:, None] * tanb[None, :]
            d = np.linalg.norm(xpts - ypts, axis=1)
            fi = hat_ia(t, La) - hat_ib(tau, Lb)
            fj = hat_ja(t, La) - hat_jb(tau, Lb)
            return fi * fj * d ** (-(1.0 + 2.0 * s))

        shared = {a, (a + 1) % S} & {b, (b + 1) % S}
        singular_pts = []
        scale = 1.0
        if shared:
            node = shared.pop()
            t_star = 0.0 if node == a else La
            tau_star = 0.0 if node == b else Lb
            singular_pts = [(t_star, tau_star)]
            probe = 1e-3 * min(La, Lb)
            tp = np.abs(t_star - probe * np.array([1.0, 0.7, 0.3]))
            taup = np.abs(tau_star - probe * np.array([0.3, 0.7, 1.0]))
            rho = np.hypot(tp - t_star, taup - tau_star)
            fv = np.abs(f2d(tp, taup))
            scale = 4.0 * float(np.max(fv / rho ** (1.0 - 2.0 * s))) + 1e-30

        def f2d_grid(xs, ys):
            return f2d(xs, ys)

        val, _ = adaptive_rectangle(
            f2d_grid,
            (0.0, La, 0.0, Lb),
            tol_pair,
            singular_points=singular_pts,
            singular_power=1.0 - 2.0 * s,
            singular_scale=scale,
            max_cells=max_cells,
        )
        total += 2.0 * val
    return total


# --- manufactured problems -------------------------------------------------------


@dataclass(eq=False)
class ManufacturedProblem:
    """Exact solution with analytically derived data.

    The boundary source g is constructed from the boundary identity
    g = -(tangential second derivative) + (normal derivative) + b u + theta(u)
    on each open side; because the trace of a smooth bulk solution kinks at
    corners, the exact weak-form data additionally carries one point mass per
    corner with weight (incoming minus outgoing tangential derivative). The
    pointwise route tabulates g at quadrature nodes and adds the masses; the
    form-based (energy) route reproduces both pieces automatically.
    """

    name: str
    polygon: Polygon
    s: float
    b: object
    u: Callable
    grad_u: Callable
    hess_u: Callable
    lap_u: Callable
    g_route: str  # "exact" | "pointwise" | "load_table"
    oracle_tol: float = 1e-9
    description: str = ""

    def f(self, pts):
        return -np.asarray(self.lap_u(np.atleast_2d(pts)), dtype=float)

    def trace(self, pts):
        return np.asarray(self.u(np.atleast_2d(pts)), dtype=float)

    def b_per_side(self) -> np.ndarray:
        vals = np.atleast_1d(np.asarray(self.b, dtype=float))
        if vals.size == 1:
            return np.full(self.polygon.n_sides, float(vals[0]))
        return vals

    def corner_jumps(self) -> np.ndarray:
        """Per-corner weight (incoming - outgoing tangential derivative)."""
        poly = self.polygon
        g = np.asarray(self.grad_u(poly.vertices), dtype=float)
        tan_out = poly.side_tangents  # side j starts at vertex j
        tan_in = np.roll(poly.side_tangents, 1, axis=0)  # side j-1 ends at vertex j
        return np.einsum("jd,jd->j", g, tan_in) - np.einsum("jd,jd->j", g, tan_out)

    def boundary_g_values(self, pts, side_ids, tol: float | None = None) -> np.ndarray:
        """Identity right-hand side at non-corner boundary points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        side_ids = np.atleast_1d(np.asarray(side_ids, dtype=int))
        poly = self.polygon
        tau = poly.side_tangents[side_ids]
        nu = poly.side_normals[side_ids]
        H = np.asarray(self.hess_u(pts), dtype=float)
        lap_ell = np.einsum("pd,pdc,pc->p", tau, H, tau)
        dn = np.einsum("pd,pd->p", nu, np.asarray(self.grad_u(pts), dtype=float))
        bu = self.b_per_side()[side_ids] * self.trace(pts)
        tol = tol if tol is not None else self.oracle_tol
        theta = np.array(
            [
                theta_pointwise_oracle(
                    poly,
                    self.trace,
                    p,
                    self.s,
                    tol,
                    tangential_derivative=float(
                        np.asarray(self.grad_u(p[None, :]))[0] @ tau[k]
                    ),
                )
                for k, p in enumerate(pts)
            ]
        )
        return -lap_ell + dn + bu + theta

    def spec(self) -> ProblemSpec:
        if self.g_route == "exact":
            g = self.b_per_side()
        elif self.g_route == "pointwise":
            g = PointwiseBoundarySource(self)
        elif self.g_route == "load_table":
            g = EnergyLoadSource(self)
        else:
            raise VenttselError(f"unknown g route {self.g_route!r}")
        return ProblemSpec(s=self.s, b=self.b, f=self.f, g=g, sigma=None)


class PointwiseBoundarySource:
    """g tabulated at segment quadrature nodes, plus analytic corner masses.

    Segments touching a corner get composite Gauss nodes graded toward the
    corner: the tabulated g inherits an r^{1-2s}-type kink there from the
    nonlocal term, which plain Gauss cannot integrate to the load-route
    equivalence tolerance.
    """

    def __init__(
        self,
        problem: ManufacturedProblem,
        order: int = 8,
        tol: float | None = None,
        corner_layers: int = 8,
    ):
        self.problem = problem
        self.order = order
        self.tol = tol
        self.corner_layers = corner_layers

    def build(self, bm: BoundaryMesh) -> BoundaryQuadratureTable:
        poly = self.problem.polygon
        tolv = 1e-12 * max(1.0, poly.perimeter)
        x0, w0 = gauss01(self.order)
        xc, wc = gauss01(6)

        def is_corner(p):
            return np.min(np.linalg.norm(poly.vertices - p[None, :], axis=1)) <= tolv

        nodes_rows, weights_rows = [], []
        width = None
        for k in range(bm.n_segments):
            ends = []
            if is_corner(bm.segment_starts[k]):
                ends.append(0.0)
            if is_corner(bm.segment_ends[k]):
                ends.append(1.0)
            if not ends:
                nodes_rows.append(x0)
                weights_rows.append(w0 * bm.lengths[k])
                continue
            brk = np.array([0.0, 1.0])
            for e in ends:
                brk = np.union1d(brk, graded_breakpoints(0.0, 1.0, e, self.corner_layers))
            xs, ws = [], []
            for a_, b_ in zip(brk[:-1], brk[1:]):
                xs.append(a_ + (b_ - a_) * xc)
                ws.append((b_ - a_) * wc)
            nodes_rows.append(np.concatenate(xs))
            weights_rows.append(np.concatenate(ws) * bm.lengths[k])

        width = max(len(r) for r in nodes_rows)
        S = bm.n_segments
        nodes = np.full((S, width), 0.5)
        weights = np.zeros((S, width))
        for k in range(S):
            nodes[k, : len(nodes_rows[k])] = nodes_rows[k]
            weights[k, : len(weights_rows[k])] = weights_rows[k]
        pts = bm.segment_starts[:, None, :] + nodes[:, :, None] * (
            bm.segment_ends - bm.segment_starts
        )[:, None, :]
        side_ids = np.repeat(bm.side_ids, width)
        vals = self.problem.boundary_g_values(
            pts.reshape(-1, 2), side_ids, self.tol
        ).reshape(S, width)
        return BoundaryQuadratureTable(
            order=self.order,
            values=vals,
            nodes=nodes,
            weights=weights,
            point_masses=_corner_masses(self.problem, bm),
        )


class EnergyLoadSource:
    """Per-basis boundary load computed from the continuum form (all s)."""

    def __init__(self, problem: ManufacturedProblem, policy: QuadraturePolicy | None = None):
        self.problem = problem
        self.policy = policy or QuadraturePolicy()

    def build(self, bm: BoundaryMesh) -> BoundaryLoadTable:
        return energy_load_table(self.problem, bm, policy=self.policy)


def _corner_masses(problem: ManufacturedProblem, bm: BoundaryMesh):
    """(local boundary node index, weight) pairs for the corner point masses."""
    poly = problem.polygon
    jumps = problem.corner_jumps()
    out = []
    pts = bm.points
    for jv, vertex in enumerate(poly.vertices):
        k = int(np.argmin(np.linalg.norm(pts - vertex[None, :], axis=1)))
        out.append((k, float(jumps[jv])))
    return out


def make_manufactured(preset: str, polygon: Polygon, s: float, b, *, g_route: str | None = None) -> ManufacturedProblem:
    """Presets: `constant` (u = 1, f = 0, g = b), `cubic` (u = x^3 + y^3),
    `harmonic` (u = e^x sin y). The boundary-data route defaults to the
    pointwise table for s < 1/2 and the form-based load table otherwise."""
    if preset == "constant":
        return ManufacturedProblem(
            name="constant",
            polygon=polygon,
            s=s,
            b=b,
            u=lambda p: np.ones(len(np.atleast_2d(p))),
            grad_u=lambda p: np.zeros((len(np.atleast_2d(p)), 2)),
            hess_u=lambda p: np.zeros((len(np.atleast_2d(p)), 2, 2)),
            lap_u=lambda p: np.zeros(len(np.atleast_2d(p))),
            g_route="exact",
            description="u = 1; all derivative terms vanish and g reduces to b",
        )
    if preset == "cubic":
        def hess(p):
            p = np.atleast_2d(p)
            H = np.zeros((len(p), 2, 2))
            H[:, 0, 0] = 6.0 * p[:, 0]
            H[:, 1, 1] = 6.0 * p[:, 1]
            return H

        prob = ManufacturedProblem(
            name="cubic",
            polygon=polygon,
            s=s,
            b=b,
            u=lambda p: np.atleast_2d(p)[:, 0] ** 3 + np.atleast_2d(p)[:, 1] ** 3,
            grad_u=lambda p: 3.0 * np.atleast_2d(p) ** 2,
            hess_u=hess,
            lap_u=lambda p: 6.0 * (np.atleast_2d(p)[:, 0] + np.atleast_2d(p)[:, 1]),
            g_route="pointwise",
            description="u = x^3 + y^3, f = -6(x + y)",
        )
    elif preset == "harmonic":
        def hessh(p):
            p = np.atleast_2d(p)
            ex, sy, cy = np.exp(p[:, 0]), np.sin(p[:, 1]), np.cos(p[:, 1])
            H = np.empty((len(p), 2, 2))
            H[:, 0, 0] = ex * sy
            H[:, 0, 1] = H[:, 1, 0] = ex * cy
            H[:, 1, 1] = -ex * sy
            return H

        prob = ManufacturedProblem(
            name="harmonic",
            polygon=polygon,
            s=s,
            b=b,
            u=lambda p: np.exp(np.atleast_2d(p)[:, 0]) * np.sin(np.atleast_2d(p)[:, 1]),
            grad_u=lambda p: np.column_stack(
                [
                    np.exp(np.atleast_2d(p)[:, 0]) * np.sin(np.atleast_2d(p)[:, 1]),
                    np.exp(np.atleast_2d(p)[:, 0]) * np.cos(np.atleast_2d(p)[:, 1]),
                ]
            ),
            hess_u=hessh,
            lap_u=lambda p: np.zeros(len(np.atleast_2d(p))),
            g_route="pointwise",
            description="u = exp(x) sin(y), harmonic so f = 0",
        )
    else:
        raise VenttselError(f"unknown manufactured preset {preset!r}")
    if g_route is None:
        prob.g_route = "pointwise" if s < 0.5 else "load_table"
    else:
        prob.g_route = g_route
    return prob


@dataclass(eq=False)
class BenchmarkProblem:
    """Named problem without an exact solution (fine-grid reference studies)."""

    name: str
    polygon: Polygon
    s: float
    b: object
    f: object
    g: object
    description: str = ""

    def spec(self) -> ProblemSpec:
        return ProblemSpec(s=self.s, b=self.b, f=self.f, g=self.g)


def lshape_benchmark() -> BenchmarkProblem:
    """L-shaped domain, f = 1, g = 0, b = 1, s = 1/2."""
    poly = build_polygon([(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)])
    return BenchmarkProblem(
        name="lshape",
        polygon=poly,
        s=0.5,
        b=1.0,
        f=1.0,
        g=0.0,
        description="reentrant-corner benchmark with unit bulk source",
    )


# --- form-based load table --------------------------------------------------------


def _power_gauss(n: int, p: int):
    x, w = gauss01(n)
    return x**p, w * p * x ** (p - 1)


def _substitution_power(s: float) -> int:
    return max(2, math.ceil(4.5 / (2.0 - 2.0 * s)))


def _stable_diff(problem, x1, x2):
    """u(x1) - u(x2), switching to the analytic midpoint-gradient form when the
    separation nears roundoff (avoids catastrophic cancellation against the
    singular kernel)."""
    shape = x1.shape[:-1]
    f1 = x1.reshape(-1, 2)
    f2 = x2.reshape(-1, 2)
    du = np.asarray(problem.u(f1), dtype=float) - np.asarray(problem.u(f2), dtype=float)
    delta = f1 - f2
    sep = np.linalg.norm(delta, axis=1)
    scale = 1.0 + np.linalg.norm(f1, axis=1)
    close = sep < 1e-5 * scale
    if np.any(close):
        mid = 0.5 * (f1[close] + f2[close])
        g = np.asarray(problem.grad_u(mid), dtype=float)
        du[close] = np.einsum("pd,pd->p", g, delta[close])
    return du.reshape(shape)


def _theta_load(bm: BoundaryMesh, problem, s: float, policy: QuadraturePolicy):
    """Per-basis nonlocal load <theta_s u, phi_i> over boundary-local nodes."""
    S = bm.n_nodes
    out = np.zeros(S)
    p = _substitution_power(s)
    n = 16
    y_nodes, y_w = _power_gauss(n, p)
    z_nodes, z_w = _power_gauss(n, p)

    # identical segments: J = 2 II (u(t) - u(t(1-v))) (t v)^{-2s} t dv dt
    t_grid = bm.lengths[:, None, None] * y_nodes[None, :, None]  # (S, n, 1)
    v_grid = z_nodes[None, None, :]
    tv = t_grid * v_grid  # (S, n, n) arc separation
    x1 = bm.segment_starts[:, None, None, :] + (t_grid * np.ones_like(v_grid))[
        ..., None
    ] * bm.tangents[:, None, None, :]
    x2 = x1 - tv[..., None] * bm.tangents[:, None, None, :]
    du = _stable_diff(problem, x1, x2)
    integ = du * tv ** (-2.0 * s) * t_grid
    J = 2.0 * bm.lengths * np.einsum("i,j,sij->s", y_w, z_w, integ)
    lp = bm.local_pairs()
    np.add.at(out, lp[:, 0], -J / bm.lengths)
    np.add.at(out, lp[:, 1], J / bm.lengths)

    # adjacent pairs (k, k+1): Duffy split, radial factor left explicit
    k = np.arange(S)
    kn = (k + 1) % S
    La = bm.lengths[k][:, None, None]
    Lb = bm.lengths[kn][:, None, None]
    P = bm.mesh.nodes[bm.boundary_nodes[kn]][:, None, None, :]
    ea = -bm.tangents[k][:, None, None, :]
    eb = bm.tangents[kn][:, None, None, :]
    U = y_nodes[None, :, None] * np.ones((1, 1, n))  # (1, n, n)
    V = np.ones((1, n, 1)) * z_nodes[None, None, :]
    dofs = np.column_stack([kn, k, (k + 2) % S])

    def duffy_part(xi_over_u, eta_over_u, d_hats):
        gdir = (La * xi_over_u)[..., None] * ea - (Lb * eta_over_u)[..., None] * eb
        g = np.linalg.norm(gdir, axis=3)  # (S, n, n), the radial scale |x-y| / U
        xpts = P + (La * xi_over_u * U)[..., None] * ea
        ypts = P + (Lb * eta_over_u * U)[..., None] * eb
        du_ = _stable_diff(problem, xpts, ypts)
        base = (
            (La[:, 0, 0] * Lb[:, 0, 0])[:, None, None]
            * du_
            * U ** (1.0 - 2.0 * s)
            * g ** (-(1.0 + 2.0 * s))
        )
        res = np.empty((S, 3))
        for m, dh in enumerate(d_hats):
            res[:, m] = np.einsum("i,j,sij->s", y_w, z_w, base * dh)
        return res

    ones = np.ones_like(V)
    part1 = duffy_part(ones, V, (V - 1.0, ones, -V))  # xi = La U, eta = Lb U V
    part2 = duffy_part(V, ones, (1.0 - V, V, -ones))  # xi = La U V, eta = Lb U
    np.add.at(out, dofs, 2.0 * (part1 + part2))

    # separated pairs by the ratio ladder (orders bumped for the smooth factor)
    a, b = np.triu_indices(S, k=1)
    adjacent = (b - a == 1) | ((a == 0) & (b == S - 1))
    a, b = a[~adjacent], b[~adjacent]
    if len(a):
        from .assembly import _segment_pair_dist

        dist = _segment_pair_dist(
            bm.segment_starts[a], bm.segment_ends[a], bm.segment_starts[b], bm.segment_ends[b]
        )
        ratio = dist / np.maximum(bm.lengths[a], bm.lengths[b])
        for mask, order in (
            (ratio > policy.far_ratio, policy.far_order + 4),
            ((ratio > policy.mid_ratio) & (ratio <= policy.far_ratio), policy.mid_order + 4),
            (ratio <= policy.mid_ratio, policy.near_order + 4),
        ):
            aa, bb = a[mask], b[mask]
            for lo in range(0, len(aa), policy.chunk_size):
                _theta_load_separated(
                    out,
                    bm,
                    problem.trace,
                    s,
                    aa[lo : lo + policy.chunk_size],
                    bb[lo : lo + policy.chunk_size],
                    order,
                )
    return out


def _theta_load_separated(out, bm, trace, s, a, b, order):
    if len(a) == 0:
        return
    x, wx = gauss01(order)
    hats = np.column_stack([1.0 - x, x])
    P0a, P1a = bm.segment_starts[a], bm.segment_ends[a]
    P0b, P1b = bm.segment_starts[b], bm.segment_ends[b]
    xq = P0a[:, None, :] + x[None, :, None] * (P1a - P0a)[:, None, :]
    yq = P0b[:, None, :] + x[None, :, None] * (P1b - P0b)[:, None, :]
    wa = bm.lengths[a][:, None] * wx[None, :]
    wb = bm.lengths[b][:, None] * wx[None, :]
    diff = xq[:, :, None, :] - yq[:, None, :, :]
    R2 = np.einsum("pijd,pijd->pij", diff, diff)
    ux = np.asarray(trace(xq.reshape(-1, 2)), dtype=float).reshape(xq.shape[:2])
    uy = np.asarray(trace(yq.reshape(-1, 2)), dtype=float).reshape(yq.shape[:2])
    WKU = (
        (wa[:, :, None] * wb[:, None, :])
        * R2 ** (-(1.0 + 2.0 * s) / 2.0)
        * (ux[:, :, None] - uy[:, None, :])
    )
    ta = 2.0 * np.einsum("pij,im->pm", WKU, hats)
    tb = -2.0 * np.einsum("pij,jm->pm", WKU, hats)
    lp = bm.local_pairs()
    np.add.at(out, lp[a], ta)
    np.add.at(out, lp[b], tb)


def energy_load_table(
    problem: ManufacturedProblem,
    bm: BoundaryMesh,
    *,
    bulk_degree: int = 9,
    bdry_order: int = 16,
    policy: QuadraturePolicy | None = None,
) -> BoundaryLoadTable:
    """Boundary load entries E(u, phi_i) - Int f phi_i from the continuum form.

    Valid for every s in (0, 1); sidesteps pointwise corner blow-up because
    only the absolutely convergent double integrals are evaluated.
    """
    policy = policy or QuadraturePolicy()
    mesh = bm.mesh
    lam, wq = tri_rule(bulk_degree)
    pts = np.einsum("kl,tld->tkd", lam, mesh.tri_verts)
    flat = pts.reshape(-1, 2)
    w = mesh.areas[:, None] * wq[None, :]
    gu = np.asarray(problem.grad_u(flat), dtype=float).reshape(pts.shape[0], pts.shape[1], 2)
    grads = _p1_gradients(mesh)
    int_grad = np.einsum("tk,tkd->td", w, gu)
    bulk_term = np.zeros(mesh.n_nodes)
    np.add.at(
        bulk_term,
        mesh.triangles.ravel(),
        np.einsum("tid,td->ti", grads, int_grad).ravel(),
    )
    fv = np.asarray(problem.f(flat), dtype=float).reshape(pts.shape[:2])
    f_term = np.zeros(mesh.n_nodes)
    np.add.at(f_term, mesh.triangles.ravel(), np.einsum("tk,tk,kl->tl", w, fv, lam).ravel())

    pts_b, wts, hats = bm.gauss_points(bdry_order)
    flat_b = pts_b.reshape(-1, 2)
    gub = np.asarray(problem.grad_u(flat_b), dtype=float).reshape(
        pts_b.shape[0], pts_b.shape[1], 2
    )
    u_tan = np.einsum("skd,sd->sk", gub, bm.tangents)
    int_utan = np.einsum("sk,sk->s", wts, u_tan)
    bvals = problem.b_per_side()[bm.side_ids]
    ub = np.asarray(problem.trace(flat_b), dtype=float).reshape(pts_b.shape[:2])
    mass_term_local = np.einsum("sk,sk,km->sm", wts * bvals[:, None], ub, hats)

    bdry_term = np.zeros(bm.n_nodes)
    lp = bm.local_pairs()
    np.add.at(bdry_term, lp[:, 0], -int_utan / bm.lengths + mass_term_local[:, 0])
    np.add.at(bdry_term, lp[:, 1], int_utan / bm.lengths + mass_term_local[:, 1])

    theta_term = _theta_load(bm, problem, problem.s, policy)

    vals = (
        bulk_term[bm.boundary_nodes]
        - f_term[bm.boundary_nodes]
        + bdry_term
        + theta_term
    )
    return BoundaryLoadTable(values=vals)


# --- data norms -------------------------------------------------------------------


def source_l2_bulk(f, mesh: Mesh, degree: int = 7) -> float:
    """L2 norm of a bulk source callable (or scalar) over the meshed polygon."""
    lam, wq = tri_rule(degree)
    pts = np.einsum("kl,tld->tkd", lam, mesh.tri_verts)
    if callable(f):
        fv = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    else:
        fv = np.full(pts.shape[:2], float(f))
    return math.sqrt(max(0.0, float(np.sum(mesh.areas[:, None] * wq[None, :] * fv**2))))


def manufactured_g_l2(problem: ManufacturedProblem, *, n_layers: int = 12, order: int = 6) -> float:
    """L2(boundary) norm of the manufactured pointwise g (off-corner identity).

    Near a corner the integrand can follow a power law for s > 1/2; the
    innermost panels are summed by geometric extrapolation instead of assuming
    a finite corner value.
    """
    if problem.g_route == "exact":
        bvals = problem.b_per_side()
        return math.sqrt(float(np.sum(bvals**2 * problem.polygon.side_lengths)))
    poly = problem.polygon
    total = 0.0
    x, w = gauss01(order)
    for side in range(poly.n_sides):
        L = poly.side_lengths[side]
        brk = np.union1d(
            graded_breakpoints(0.0, L, 0.0, n_layers),
            graded_breakpoints(0.0, L, L, n_layers),
        )
        panel_vals = []
        for a_, b_ in zip(brk[:-1], brk[1:]):
            ts = a_ + (b_ - a_) * x
            pts = poly.boundary_point(side, ts)
            gv = problem.boundary_g_values(pts, np.full(len(ts), side), tol=1e-6)
            panel_vals.append(float(np.sum((b_ - a_) * w * gv**2)))
        total += sum(panel_vals)
        # geometric tails at both corners
        for inner, nxt in ((panel_vals[0], panel_vals[1]), (panel_vals[-1], panel_vals[-2])):
            ratio = min(abs(inner / nxt), 0.95) if nxt else 0.0
            total += inner * ratio / (1.0 - ratio)
    return math.sqrt(max(0.0, total))


def benchmark_g_l2(problem: BenchmarkProblem) -> float:
    g = problem.g
    if callable(g):
        raise VenttselError("callable benchmark g norms are not implemented")
    vals = np.atleast_1d(np.asarray(g, dtype=float))
    poly = problem.polygon
    if vals.size == 1:
        return float(abs(vals[0])) * math.sqrt(poly.perimeter)
    return math.sqrt(float(np.sum(vals**2 * poly.side_lengths)))


# --- errors ------------------------------------------------------------------------


def errors_vs_exact(u: NodalField, problem: ManufacturedProblem, degree: int = 4):
    """Per-element quadrature errors of u against the exact solution."""
    mesh = u.mesh
    lam, wq = tri_rule(degree)
    pts = np.einsum("kl,tld->tkd", lam, mesh.tri_verts)
    flat = pts.reshape(-1, 2)
    w = mesh.areas[:, None] * wq[None, :]
    uh = np.einsum("kl,tl->tk", lam, u.values[mesh.triangles])
    uex = np.asarray(problem.u(flat), dtype=float).reshape(pts.shape[:2])
    err_l2 = math.sqrt(max(0.0, float(np.sum(w * (uh - uex) ** 2))))
    grads = _p1_gradients(mesh)
    gh = np.einsum("tid,ti->td", grads, u.values[mesh.triangles])
    gex = np.asarray(problem.grad_u(flat), dtype=float).reshape(pts.shape[0], pts.shape[1], 2)
    diff = gex - gh[:, None, :]
    err_h1 = math.sqrt(max(0.0, float(np.sum(w * np.einsum("tkd,tkd->tk", diff, diff)))))

    bm = mesh.boundary
    pts_b, wts, hats = bm.gauss_points(8)
    vb = u.boundary_values(bm)
    uh_b = np.einsum("km,sm->sk", hats, np.column_stack([vb, vb[np.roll(np.arange(bm.n_nodes), -1)]]))
    uex_b = np.asarray(problem.trace(pts_b.reshape(-1, 2)), dtype=float).reshape(pts_b.shape[:2])
    err_l2_b = math.sqrt(max(0.0, float(np.sum(wts * (uh_b - uex_b) ** 2))))
    guex = np.asarray(problem.grad_u(pts_b.reshape(-1, 2)), dtype=float).reshape(
        pts_b.shape[0], pts_b.shape[1], 2
    )
    tan_ex = np.einsum("skd,sd->sk", guex, bm.tangents)
    tan_h = ((vb[np.roll(np.arange(bm.n_nodes), -1)] - vb) / bm.lengths)[:, None]
    err_h1_b = math.sqrt(max(0.0, float(np.sum(wts * (tan_h - tan_ex) ** 2))))
    return err_l2, err_h1, err_l2_b, err_h1_b


def errors_vs_reference(u: NodalField, ref: NodalField):
    """Quadrature (on the reference mesh) of the difference to a finer solution."""
    rmesh = ref.mesh
    lam, wq = tri_rule(2)
    pts = np.einsum("kl,tld->tkd", lam, rmesh.tri_verts)
    flat = pts.reshape(-1, 2)
    w = rmesh.areas[:, None] * wq[None, :]
    uref = np.einsum("kl,tl->tk", lam, ref.values[rmesh.triangles])
    uh = evaluate_field(u, flat).reshape(pts.shape[:2])
    err_l2 = math.sqrt(max(0.0, float(np.sum(w * (uh - uref) ** 2))))
    gref = np.einsum("tid,ti->td", _p1_gradients(rmesh), ref.values[rmesh.triangles])
    gh = evaluate_gradient(u, rmesh.tri_verts.mean(axis=1))
    diff = gref - gh
    err_h1 = math.sqrt(max(0.0, float(np.sum(rmesh.areas * np.einsum("td,td->t", diff, diff)))))

    rbm = rmesh.boundary
    cbm = u.mesh.boundary
    pts_b, wts, hats = rbm.gauss_points(4)
    vref = ref.boundary_values(rbm)
    uref_b = np.einsum("km,sm->sk", hats, np.column_stack([vref, vref[np.roll(np.arange(rbm.n_nodes), -1)]]))
    x, _ = gauss01(4)
    arc = rbm.arclength_coords[:, None] + x[None, :] * rbm.lengths[:, None]
    vb = u.boundary_values(cbm)
    uh_b, duh_b = boundary_interp(cbm, vb, arc.ravel())
    uh_b = uh_b.reshape(arc.shape)
    duh_b = duh_b.reshape(arc.shape)
    err_l2_b = math.sqrt(max(0.0, float(np.sum(wts * (uh_b - uref_b) ** 2))))
    dref = ((vref[np.roll(np.arange(rbm.n_nodes), -1)] - vref) / rbm.lengths)[:, None]
    err_h1_b = math.sqrt(max(0.0, float(np.sum(wts * (duh_b - dref) ** 2))))
    return err_l2, err_h1, err_l2_b, err_h1_b


# --- convergence studies --------------------------------------------------------------

CONVERGENCE_CSV_HEADER = (
    "level,h,unknowns,err_l2_bulk,err_h1_bulk,err_l2_bdry,err_h1_bdry,"
    "bdry_h2_diag,stability_ratio"
)


@dataclass(eq=False)
class ConvergenceTable:
    rows: list
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def to_csv(self) -> str:
        lines = [CONVERGENCE_CSV_HEADER]
        for row in self.rows:
            lines.append(
                ",".join(
                    [
                        str(row["level"]),
                        repr(float(row["h"])),
                        str(row["unknowns"]),
                        repr(float(row["err_l2_bulk"])),
                        repr(float(row["err_h1_bulk"])),
                        repr(float(row["err_l2_bdry"])),
                        repr(float(row["err_h1_bdry"])),
                        repr(float(row["bdry_h2_diag"])),
                        repr(float(row["stability_ratio"])),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def _mesh_sequence(polygon: Polygon, h0: float, q: float, count: int):
    meshes = []
    if q == 1.0:
        m = triangulate(polygon, h0, 1.0)
        meshes.append(m)
        for _ in range(count - 1):
            m = refine(m)
            meshes.append(m)
    else:
        # regenerated per level: keeps the corner-size law (h 2^-k)^q
        for k in range(count):
            meshes.append(triangulate(polygon, h0 * 0.5**k, q))
    return meshes


def convergence_study(
    problem,
    levels: int,
    *,
    h0: float,
    q: float = 1.0,
    solver_tol: float = 1e-10,
    reference_extra: int = 2,
    policy: QuadraturePolicy | None = None,
) -> ConvergenceTable:
    """Solve on a sequence of meshes with h halving per level.

    Manufactured problems are measured against the exact solution; benchmark
    problems against a fine-grid reference two extra levels down, computed
    with the same discretization.
    """
    if levels < 3:
        raise VenttselError("a convergence study needs at least 3 levels")
    has_exact = isinstance(problem, ManufacturedProblem)
    n_meshes = levels if has_exact else levels + reference_extra
    meshes = _mesh_sequence(problem.polygon, h0, q, n_meshes)

    solutions = []
    for mesh in meshes[:levels]:
        bm = extract_boundary(mesh)
        system = assemble_system(mesh, bm, problem.spec(), policy)
        u, _ = solve(system, tol=solver_tol)
        solutions.append(u)
    ref = None
    if not has_exact:
        mesh = meshes[-1]
        bm = extract_boundary(mesh)
        system = assemble_system(mesh, bm, problem.spec(), policy)
        ref, _ = solve(system, tol=solver_tol)

    f_norm = source_l2_bulk(problem.f, meshes[levels - 1])
    g_norm = manufactured_g_l2(problem) if has_exact else benchmark_g_l2(problem)

    rows = []
    for k, u in enumerate(solutions):
        if has_exact:
            e2, eh1, e2b, eh1b = errors_vs_exact(u, problem)
        else:
            e2, eh1, e2b, eh1b = errors_vs_reference(u, ref)
        bm = u.mesh.boundary
        rows.append(
            {
                "level": k,
                "h": h0 * 0.5**k,
                "unknowns": u.mesh.n_nodes,
                "err_l2_bulk": e2,
                "err_h1_bulk": eh1,
                "err_l2_bdry": e2b,
                "err_h1_bdry": eh1b,
                "bdry_h2_diag": boundary_h2_diagnostic(u.boundary_values(bm), bm),
                "stability_ratio": stability_ratio(u, problem, f_norm, g_norm)
                if (f_norm + g_norm) > 0
                else math.nan,
                "_field": u,
            }
        )
    meta = {
        "problem": problem.name,
        "s": problem.s,
        "grading": q,
        "h0": h0,
        "reference": None if has_exact else f"level {n_meshes - 1}",
    }
    return ConvergenceTable(rows=rows, metadata=meta)


def rate_estimate(table: ConvergenceTable, column: str):
    """Per-step rates log2(err_{k-1} / err_k); zero errors report "exact"."""
    errs = table.column(column)
    if len(errs) < 2:
        raise VenttselError("rate estimation needs at least 2 rows")
    rates = []
    for prev, cur in zip(errs[:-1], errs[1:]):
        if prev == 0.0 or cur == 0.0:
            rates.append("exact")
        else:
            rates.append(math.log2(prev / cur))
    return rates


# --- random smooth fields ---------------------------------------------------------


def random_smooth_fields(mesh: Mesh, count: int, seed: int):
    """Seeded random smooth fields interpolated onto the mesh.

    Draws iid normal coefficients over a fixed low-order basis (affine plus
    cos x cos y modes up to order 3 on the bounding box). Smoothness matters:
    iid nodal noise would make Rayleigh-type ratios scale with h and no
    refinement-stable witness would exist.
    """
    rng = np.random.default_rng(seed)
    (xmin, ymin) = mesh.polygon.vertices.min(0)
    (xmax, ymax) = mesh.polygon.vertices.max(0)
    xh = (mesh.nodes[:, 0] - xmin) / (xmax - xmin)
    yh = (mesh.nodes[:, 1] - ymin) / (ymax - ymin)
    basis = [np.ones_like(xh), xh, yh, xh * yh]
    for mm in range(1, 4):
        for nn in range(1, 4):
            basis.append(np.cos(mm * math.pi * xh) * np.cos(nn * math.pi * yh))
    B = np.column_stack(basis)
    for _ in range(count):
        coef = rng.normal(size=B.shape[1])
        yield NodalField(B @ coef, mesh)
