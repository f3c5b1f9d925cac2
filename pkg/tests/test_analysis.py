import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from venttsel.analysis import (
    boundary_h2_diagnostic,
    friedrichs_ratio,
    gagliardo_energy,
    l2_bulk,
    norm_report,
    recovered_hessian,
    v1_norm,
    weighted_hessian_diagnostic,
    weighted_l2,
)
from venttsel.assembly import NodalField, nonlocal_matrix
from venttsel.errors import VenttselError
from venttsel.geometry import build_polygon
from venttsel.meshing import extract_boundary, refine, triangulate
from venttsel.quadrature import adaptive_rectangle, gauss_interval
from venttsel.verify import random_smooth_fields, theta_entry_oracle


def test_v1_of_constant(square_mesh):
    one = NodalField(np.ones(square_mesh.n_nodes), square_mesh)
    assert v1_norm(one) == pytest.approx(2.0, abs=1e-12)  # perimeter 4
    zero = NodalField(np.zeros(square_mesh.n_nodes), square_mesh)
    assert v1_norm(zero) == 0.0


def test_v1_of_x_against_quadrature_oracle(square_mesh):
    """The interpolant of x is exact P1; the three continuum integrals are the
    independent oracle (12-digit Gauss per side / per cell)."""
    u = NodalField(square_mesh.nodes[:, 0], square_mesh)
    # continuum values: |grad x|^2 over the square = 1; per-side quadrature for
    # the boundary pieces of the trace t -> x
    h1_bulk_sq = 1.0
    poly = square_mesh.polygon
    l2b = 0.0
    h1b = 0.0
    for side in range(poly.n_sides):
        L = poly.side_lengths[side]
        ts, ws = gauss_interval(0.0, L, 40)
        pts = poly.boundary_point(side, ts)
        l2b += float(np.sum(ws * pts[:, 0] ** 2))
        h1b += L * float(poly.side_tangents[side, 0] ** 2)
    expected = math.sqrt(h1_bulk_sq + h1b + l2b)
    assert v1_norm(u) == pytest.approx(expected, abs=1e-9)


def test_norm_report_decomposition(square_mesh, rng):
    u = NodalField(rng.normal(size=square_mesh.n_nodes), square_mesh)
    rep = norm_report(u)
    assert rep.v1**2 == pytest.approx(
        rep.h1_bulk_semi**2 + rep.h1_bdry_semi**2 + rep.l2_bdry**2, rel=1e-12
    )
    row = rep.csv_row()
    assert row.count(",") == 8


def test_weighted_l2_sigma_zero_matches_l2(square_mesh, rng):
    for _ in range(20):
        u = NodalField(rng.normal(size=square_mesh.n_nodes), square_mesh)
        assert weighted_l2(u, 0.0, "bulk") == pytest.approx(l2_bulk(u), abs=1e-10)


def test_weighted_l2_constant(square_mesh):
    one = NodalField(np.ones(square_mesh.n_nodes), square_mesh)
    assert weighted_l2(one, 0.0, "bulk") == pytest.approx(1.0, rel=1e-12)


def test_weighted_l2_sigma04_against_adaptive_reference(square_mesh):
    # reference: 1e-8 adaptive quadrature of Int r^0.8 over the unit square
    poly = square_mesh.polygon

    def f(x, y):
        pts = np.column_stack([x, y])
        from venttsel.geometry import dist_to_vertices

        return dist_to_vertices(poly, pts) ** 0.8

    ref, _ = adaptive_rectangle(
        f,
        (0.0, 1.0, 0.0, 1.0),
        1e-8,
        singular_points=[(0, 0), (1, 0), (1, 1), (0, 1)],
        singular_power=0.8,
        singular_scale=2.0,
    )
    one = NodalField(np.ones(square_mesh.n_nodes), square_mesh)
    val = weighted_l2(one, 0.4, "bulk")
    assert val**2 == pytest.approx(ref, rel=1e-4)


def test_weighted_l2_layer_self_check(square_mesh):
    one = NodalField(np.ones(square_mesh.n_nodes), square_mesh)
    v3 = weighted_l2(one, 0.42, "bulk", layers=3)
    v5 = weighted_l2(one, 0.42, "bulk", layers=5)
    assert abs(v3 - v5) <= 1e-4 * abs(v3)


def test_weighted_l2_integrability_guards(square_mesh):
    one = NodalField(np.ones(square_mesh.n_nodes), square_mesh)
    with pytest.raises(VenttselError):
        weighted_l2(one, -1.0, "bulk")
    with pytest.raises(VenttselError):
        weighted_l2(one, -0.5, "boundary")


def test_weighted_l2_boundary_callable(square):
    # Int over boundary of r^{2 sigma}: per-side graded panels + tails
    val = weighted_l2(lambda p: np.ones(len(p)), 0.25, "boundary", polygon=square)
    ts, ws = gauss_interval(0.0, 0.5, 60)
    ref_side = 2.0 * float(np.sum(ws * ts**0.5))  # distance to nearest corner
    assert val**2 == pytest.approx(4.0 * ref_side, rel=1e-6)


def test_gagliardo_energy(square_bm, rng):
    theta = nonlocal_matrix(square_bm, 0.5)
    const = np.ones(square_bm.n_nodes)
    assert gagliardo_energy(const, theta) <= 1e-10
    for _ in range(5):
        u = rng.normal(size=square_bm.n_nodes)
        assert gagliardo_energy(u, theta) >= -1e-10


def test_gagliardo_hat_matches_oracle(square):
    bm = extract_boundary(triangulate(square, 1.0))
    theta = nonlocal_matrix(bm, 0.5)
    hat = np.zeros(bm.n_nodes)
    hat[1] = 1.0
    oracle = theta_entry_oracle(bm, 1, 1, 0.5, tol=1e-9)
    assert gagliardo_energy(hat, theta) == pytest.approx(oracle, rel=1e-6)


def test_gagliardo_bounded_by_boundary_norm(square, rng):
    # <theta u, u> <= C (boundary H1 semi^2 + boundary L2^2), C stable under
    # refinement
    from venttsel.analysis import h1_bdry_semi, l2_bdry

    cs = []
    mesh = triangulate(square, 0.25)
    for _ in range(2):
        bm = extract_boundary(mesh)
        theta = nonlocal_matrix(bm, 0.5)
        worst = 0.0
        for u in random_smooth_fields(mesh, 40, 3):
            den = h1_bdry_semi(u) ** 2 + l2_bdry(u) ** 2
            worst = max(worst, gagliardo_energy(u.boundary_values(bm), theta) / den)
        cs.append(worst)
        mesh = refine(mesh)
    assert max(cs) / min(cs) < 2.0


def _per_side_arc(bm):
    """Arc offset of each boundary node within its (run-starting) side."""
    out = np.zeros(bm.n_nodes)
    run_start = 0.0
    current = bm.side_ids[0]
    for k in range(bm.n_segments):
        if bm.side_ids[k] != current:
            current = bm.side_ids[k]
            run_start = bm.arclength_coords[k]
        out[k] = bm.arclength_coords[k] - run_start
    return out


def test_boundary_h2_quadratic_per_side(square):
    mesh = triangulate(square, 0.25)
    bm = extract_boundary(mesh)
    # (t - L/2)^2 per unit side: second derivative 2, continuous at corners
    t = _per_side_arc(bm)
    vals = (t - 0.5) ** 2
    diag = boundary_h2_diagnostic(vals, bm)
    assert diag**2 == pytest.approx(4.0 * 4.0, abs=1e-10)  # 4L per unit side


def test_boundary_h2_affine_and_warning(square):
    mesh = triangulate(square, 0.25)
    bm = extract_boundary(mesh)
    # trace of a globally affine function: affine in arc length on every side
    u = NodalField(0.7 * mesh.nodes[:, 0] - 0.2 * mesh.nodes[:, 1], mesh)
    assert boundary_h2_diagnostic(u.boundary_values(bm), bm) <= 1e-12

    coarse = extract_boundary(triangulate(square, 1.0))  # 2 nodes per side
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        out = boundary_h2_diagnostic(np.ones(coarse.n_nodes), coarse)
    assert out == 0.0
    assert len(rec) >= 1


def test_weighted_hessian_affine_zero(square_mesh):
    u = NodalField(0.7 * square_mesh.nodes[:, 0] - 0.2 * square_mesh.nodes[:, 1], square_mesh)
    assert weighted_hessian_diagnostic(u, 0.0) <= 1e-10
    assert np.abs(recovered_hessian(u)).max() <= 1e-12


def test_weighted_hessian_x_squared(square):
    # interpolant of x^2: surrogate approaches ||D2 u|| = 2 within 20%
    mesh = triangulate(square, 0.25)
    for _ in range(2):
        mesh = refine(mesh)
    u = NodalField(mesh.nodes[:, 0] ** 2, mesh)
    val = weighted_hessian_diagnostic(u, 0.0)
    assert abs(val**2 - 4.0) <= 0.2 * 4.0


def test_friedrichs_examples(square_mesh):
    one = NodalField(np.ones(square_mesh.n_nodes), square_mesh)
    assert friedrichs_ratio(one) == pytest.approx(0.25, rel=1e-12)
    seven = NodalField(np.full(square_mesh.n_nodes, -7.0), square_mesh)
    assert friedrichs_ratio(seven) == pytest.approx(0.25, rel=1e-12)
    with pytest.raises(VenttselError):
        friedrichs_ratio(NodalField(np.zeros(square_mesh.n_nodes), square_mesh))


def test_friedrichs_envelope(square_mesh):
    const = friedrichs_ratio(NodalField(np.ones(square_mesh.n_nodes), square_mesh))
    worst = max(friedrichs_ratio(u) for u in random_smooth_fields(square_mesh, 200, 11))
    assert worst <= 10.0 * const
