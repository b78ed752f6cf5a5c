import math

import numpy as np
import pytest
import sympy as sp
from conftest import asymptotic_order, band_limited_vector, measured_order

from slabflow.geometry import (FlowMap, deformation, grad_vector, hodge_residual,
                               identity_report, lagrangian_curl, lagrangian_div,
                               laplace_beltrami, neumann_decomposition,
                               surface_geometry, identity_map)
from slabflow.grid import BOTTOM, FACES, TOP, build_grid


def shear_map(grid, c=0.3):
    aff = np.eye(3)
    aff[0, 2] = c
    return FlowMap(disp=np.zeros(grid.shape + (3,)), affine=aff)


def dilation_map(grid, lam=1.1):
    return FlowMap(disp=np.zeros(grid.shape + (3,)), affine=lam * np.eye(3))


def bump_map(grid, a=0.05, vertical="linear"):
    """Top face becomes the graph x3 = 1 + a sin(x1); bottom stays flat."""
    x = grid.coords()
    x1, x3 = x[0], x[-1]
    disp = np.zeros(grid.shape + (3,))
    prof = x3 if vertical == "linear" else np.sin(0.5 * math.pi * x3)
    disp[..., 2] = a * np.sin(x1) * prof
    return FlowMap(disp=disp)


def test_deformation_identity():
    g = build_grid(1, 16, 17)
    cache = deformation(g, identity_map(g))
    assert np.allclose(cache.A, np.eye(3), atol=1e-13)
    assert np.allclose(cache.J, 1.0, atol=1e-13)
    assert np.allclose(cache.a, np.eye(3), atol=1e-13)
    assert not cache.degenerate


def test_deformation_shear():
    # inverse of the shear deformation tensor, displayed as a matrix, is
    # [[1,0,-c],[0,1,0],[0,0,1]]; the stored tensor A_i^k is its transpose
    # (convention fixed by Div_eta v = A_r^s v^r,s and a_i^k N^k = sqrt g n^i)
    g = build_grid(1, 16, 17)
    c = 0.4
    cache = deformation(g, shear_map(g, c))
    assert np.allclose(cache.J, 1.0, atol=1e-13)
    expected_inv = np.array([[1, 0, -c], [0, 1, 0], [0, 0, 1.0]])
    assert np.allclose(cache.A, expected_inv.T, atol=1e-13)


def test_deformation_dilation():
    g = build_grid(1, 16, 17)
    lam = 1.3
    cache = deformation(g, dilation_map(g, lam))
    assert np.allclose(cache.J, lam ** 3, atol=1e-12)
    assert np.allclose(cache.A, np.eye(3) / lam, atol=1e-13)
    assert np.allclose(cache.a, lam ** 2 * np.eye(3), atol=1e-12)


def test_a_equals_J_times_A():
    g = build_grid(1, 16, 17)
    rng = np.random.default_rng(3)
    fm = FlowMap(disp=band_limited_vector(g, rng))
    cache = deformation(g, fm)
    rel = np.max(np.abs(cache.a - cache.J[..., None, None] * cache.A)) / np.max(np.abs(cache.a))
    assert rel <= 1e-12


def test_degenerate_flagged():
    g = build_grid(1, 16, 17)
    cache = deformation(g, dilation_map(g, -1.0))
    assert cache.degenerate


def test_surface_identity_map():
    g = build_grid(1, 16, 17)
    surf = surface_geometry(g, identity_map(g))
    for face, sign in ((BOTTOM, -1.0), (TOP, 1.0)):
        sg = surf[face]
        assert np.allclose(sg.g[..., 0, 0], 1.0, atol=1e-13)
        assert np.allclose(sg.sqrt_g, 1.0, atol=1e-13)
        assert np.allclose(sg.H, 0.0, atol=1e-12)
        assert np.allclose(sg.n, np.array([0, 0, sign]), atol=1e-13)


def test_surface_dilation_2d():
    g = build_grid(2, 8, 9)
    lam = 1.2
    surf = surface_geometry(g, dilation_map(g, lam))
    for face in FACES:
        assert np.allclose(surf[face].sqrt_g, lam ** 2, atol=1e-12)
        assert np.allclose(surf[face].H, 0.0, atol=1e-11)


def test_graph_curvature_matches_symbolic_oracle():
    # independent oracle: symbolic H = -g^{-1} (eta,11 . n) for the curve
    # (x, 1 + a sin x) with the outward (upward) unit normal
    a_val = 0.07
    xs, a_s = sp.symbols("x a", real=True)
    r = sp.Matrix([xs, 1 + a_s * sp.sin(xs)])
    t = r.diff(xs)
    n_vec = sp.Matrix([-t[1], t[0]]) / sp.sqrt(t.dot(t))
    H_sym = sp.simplify(-(r.diff(xs, 2).dot(n_vec)) / t.dot(t))
    H_fn = sp.lambdify(xs, H_sym.subs(a_s, a_val), "numpy")

    g = build_grid(1, 64, 17)
    surf = surface_geometry(g, bump_map(g, a_val))
    (x1,) = g.face_coords()
    assert np.max(np.abs(surf[TOP].H - H_fn(x1))) <= 1e-10
    # sanity: paper convention makes an outward bump crest positively curved
    assert H_fn(math.pi / 2) > 0


def test_unit_normal_and_outward_normal_formula():
    g = build_grid(1, 32, 17)
    rng = np.random.default_rng(5)
    fm = FlowMap(disp=band_limited_vector(g, rng, amp=0.05, planar=True))
    cache = deformation(g, fm)
    surf = surface_geometry(g, fm, cache)
    for face in FACES:
        sg = surf[face]
        norms = np.einsum("...i,...i->...", sg.n, sg.n)
        assert np.max(np.abs(norms - 1.0)) <= 1e-12
        # a_i^k N^k = sqrt(g) n^i with sqrt(g) from the metric determinant
        a_f = g.trace(cache.a, face)
        w = np.einsum("...ik,k->...i", a_f, g.reference_normal(face))
        sqrt_g_metric = np.sqrt(sg.g[..., 0, 0])
        assert np.max(np.abs(w - sqrt_g_metric[..., None] * sg.n)) <= 1e-10


def test_lagrangian_div_curl_flat():
    g = build_grid(1, 16, 17)
    cache = deformation(g, identity_map(g))
    x = g.coords()
    x3 = x[-1]
    v = np.zeros(g.shape + (3,))
    v[..., 0] = x3
    assert np.max(np.abs(lagrangian_div(g, v, cache))) <= 1e-12
    curl = lagrangian_curl(g, v, cache)
    assert np.allclose(curl[..., 1], 1.0, atol=1e-12)
    assert np.max(np.abs(curl[..., [0, 2]])) <= 1e-12


def test_curl_of_gradient_vanishes():
    g = build_grid(1, 32, 17)
    x1, x3 = g.coords()
    phi = np.sin(2 * x1) * np.cos(x3) + x3 ** 2
    v = g.grad3(phi)
    cache = deformation(g, identity_map(g))
    assert np.max(np.abs(lagrangian_curl(g, v, cache))) <= 1e-10


def test_lagrangian_div_shear():
    g = build_grid(1, 16, 17)
    cache = deformation(g, shear_map(g, 0.3))
    x3 = g.coords()[-1]
    v = np.zeros(g.shape + (3,))
    v[..., 2] = x3
    assert np.max(np.abs(lagrangian_div(g, v, cache) - 1.0)) <= 1e-12


def test_laplace_beltrami_flat_and_projection():
    g = build_grid(1, 32, 17)
    lb = laplace_beltrami(g, identity_map(g))
    for face in FACES:
        for piece in lb[face]:
            assert np.max(np.abs(piece)) <= 1e-12

    fm = bump_map(g, 0.05)
    surf = surface_geometry(g, fm)
    lb = laplace_beltrami(g, fm, surf)
    for face in FACES:
        l, _, resid = lb[face]
        assert np.max(np.abs(resid)) <= 1e-9  # map linear in x3, band-limited
        # Delta_g(eta) . n = -H
        lb_dot_n = np.einsum("...i,...i->...", l, surf[face].n)
        assert np.max(np.abs(lb_dot_n - (-surf[face].sqrt_g * surf[face].H))) <= 1e-9


def test_neumann_decomposition_flat_cases():
    g = build_grid(1, 16, 17)
    fm = identity_map(g)
    xi = np.ones(g.shape + (3,)) * np.array([0.3, -1.2, 0.7])
    dn = neumann_decomposition(g, xi, fm)
    for face in FACES:
        assert np.max(np.abs(dn[face]["defect"])) <= 1e-10
        total = dn[face]["curl_part"] + dn[face]["div_part"] + dn[face]["b"]
        assert np.max(np.abs(total)) <= 1e-10

    x3 = g.coords()[-1]
    xi = np.zeros(g.shape + (3,))
    xi[..., 2] = x3
    dn = neumann_decomposition(g, xi, fm)
    for face, sign in ((BOTTOM, -1.0), (TOP, 1.0)):
        assert np.max(np.abs(dn[face]["defect"])) <= 1e-10
        assert np.allclose(dn[face]["div_part"][..., 2], sign, atol=1e-10)


def test_neumann_decomposition_discrete_exactness():
    # every step of the decomposition is pointwise algebra on shared discrete
    # derivatives, so the defect sits at the aliasing/roundoff floor at any
    # resolution (no vertical truncation enters asymmetrically)
    for n_v in (17, 33, 65):
        g = build_grid(1, 32, n_v)
        fm = bump_map(g, 0.1, vertical="sine")
        rng_local = np.random.default_rng(7)
        xi = band_limited_vector(g, rng_local, amp=0.5)  # xi may have all components
        dn = neumann_decomposition(g, xi, fm)
        assert max(np.max(np.abs(dn[f]["defect"])) for f in FACES) <= 1e-12


def test_hodge_flat_cases():
    g = build_grid(1, 32, 17)
    cache = deformation(g, identity_map(g))
    x1, x3 = g.coords()
    v = np.zeros(g.shape + (3,))
    v[..., 0] = np.sin(x1)
    r = hodge_residual(g, v, cache)
    assert np.max(np.abs(r)) <= 1e-9

    phi = np.cos(x1) * (1 + x3 ** 3)
    v = g.grad3(phi)
    r = hodge_residual(g, v, cache)
    interior = r[:, 2:-2]
    assert np.max(np.abs(interior)) <= 1e-9


def test_hodge_vertical_order_on_curved_map():
    # with spatially varying A the discrete product rule breaks exactness;
    # the interior residual then decays at the stencil order
    errs = []
    for n_v in (17, 33, 65):
        g = build_grid(1, 32, n_v)
        x1, x3 = g.coords()
        disp = np.zeros(g.shape + (3,))
        disp[..., 0] = 0.08 * np.cos(x1) * np.sin(math.pi * x3)
        disp[..., 2] = 0.1 * np.sin(x1) * np.sin(0.5 * math.pi * x3)
        cache = deformation(g, FlowMap(disp=disp))
        v = band_limited_vector(g, np.random.default_rng(13), amp=1.0)
        r = hodge_residual(g, v, cache)
        errs.append(np.max(np.abs(r[:, 2:-2])))
    assert measured_order(errs) >= 3.5


def test_identity_report_rest():
    g = build_grid(1, 16, 17)
    rep = identity_report(g, identity_map(g), np.zeros(g.shape + (3,)))
    assert rep.max_residual() <= 1e-12
    assert "piola" in rep.to_json()


def test_identity_report_dilation_jacobian():
    g = build_grid(1, 16, 17)
    rep = identity_report(g, dilation_map(g, 1.1), np.zeros(g.shape + (3,)))
    assert rep.residuals["jacobian_identity"][0] <= 1e-12
    assert rep.residuals["piola"][0] <= 1e-10


def test_identity_report_probe_second_order():
    # along the affine probe eta + dt v, J(dt) is cubic and a(dt) quadratic,
    # so centered differences are exact for a_t and (in d_h = 1, where the
    # x2 column of Dv vanishes) for J_t as well; A_t and the metric-time
    # formulas carry genuine O(dt^2) probe error.  d_h = 2 exposes J_t too.
    g = build_grid(2, 8, 17)
    rng = np.random.default_rng(2)
    fm = FlowMap(disp=band_limited_vector(g, rng, amp=0.05, planar=True))
    v = band_limited_vector(g, np.random.default_rng(8), amp=1.0)
    keys = ("J_t_formula", "A_t_formula", "metric_time_formulas")
    errs = {k: [] for k in keys}
    for dt in (2e-2, 1e-2, 5e-3):
        rep = identity_report(g, fm, v, dt_probe=dt)
        for k in keys:
            errs[k].append(rep.residuals[k][0])
        assert rep.residuals["a_t_formula"][0] <= 1e-10  # quadratic: probe exact
    for k in keys:
        order = measured_order(errs[k])
        assert 1.8 <= order <= 2.2, (k, errs[k])


def test_piola_exact_in_reduced_dimension():
    # at d_h = 1 every cofactor divergence is linear in the varying entries
    # (the only product cofactor is annihilated by d/dx2), so the Piola
    # residual sits at roundoff for any smooth map
    for n_v in (17, 33):
        g = build_grid(1, 32, n_v)
        x1, x3 = g.coords()
        disp = np.zeros(g.shape + (3,))
        disp[..., 0] = 0.08 * np.cos(x1) * np.sin(math.pi * x3)
        disp[..., 2] = 0.1 * np.sin(x1) * np.sin(0.5 * math.pi * x3)
        cache = deformation(g, FlowMap(disp=disp))
        piola = np.stack([sum(g.grad3(cache.a[..., i, k])[..., k] for k in range(3))
                          for i in range(3)], axis=-1)
        assert np.max(np.abs(piola)) <= 1e-12


def test_piola_vertical_order_3d():
    # with all three components varying the discrete product rule breaks and
    # the residual decays at the stencil order
    errs = []
    for n_v in (17, 33, 65):
        g = build_grid(2, 8, n_v)
        x1, x2, x3 = g.coords()
        disp = np.zeros(g.shape + (3,))
        disp[..., 0] = 0.08 * np.cos(x1) * np.sin(x2) * np.sin(math.pi * x3)
        disp[..., 1] = 0.06 * np.sin(x1 + x2) * np.cos(0.7 * math.pi * x3)
        disp[..., 2] = 0.1 * np.sin(x1) * np.sin(0.5 * math.pi * x3)
        cache = deformation(g, FlowMap(disp=disp))
        piola = np.stack([sum(g.grad3(cache.a[..., i, k])[..., k] for k in range(3))
                          for i in range(3)], axis=-1)
        errs.append(np.max(np.abs(piola)))
    assert asymptotic_order(errs) >= 3.8


def test_piola_affine_band_limited():
    g = build_grid(1, 32, 17)
    fm = bump_map(g, 0.1, vertical="linear")  # affine in x3
    cache = deformation(g, fm)
    piola = np.stack([sum(g.grad3(cache.a[..., i, k])[..., k] for k in range(3))
                      for i in range(3)], axis=-1)
    assert np.max(np.abs(piola)) <= 1e-10


def test_normal_derivative_tangent():
    g = build_grid(1, 32, 17)
    fm = bump_map(g, 0.1)
    rep = identity_report(g, fm, np.zeros(g.shape + (3,)))
    assert rep.residuals["normal_derivative_tangency"][0] <= 1e-10
