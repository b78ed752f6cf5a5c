import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slabflow.grid import BOTTOM, TOP, build_grid

TWO_PI = 2.0 * math.pi


def test_build_grid_shapes():
    g = build_grid(1, 16, 9)
    assert g.shape == (16, 9)
    assert g.h_v == pytest.approx(0.125)
    g2 = build_grid(2, 8, 9)
    assert g2.shape == (8, 8, 9)


@pytest.mark.parametrize("bad", [dict(d_h=1, n_h=7, n_v=9),
                                 dict(d_h=1, n_h=16, n_v=8),
                                 dict(d_h=1, n_h=16, n_v=9, L_h=-1.0),
                                 dict(d_h=3, n_h=16, n_v=9)])
def test_build_grid_rejects(bad):
    with pytest.raises(ValueError):
        build_grid(**bad)


def test_d_horizontal_resolved_modes():
    g = build_grid(1, 16, 9)
    x1, _ = g.coords()
    f = np.sin(x1)
    assert np.max(np.abs(g.d_horizontal(f) - np.cos(x1))) <= 1e-12
    assert np.max(np.abs(g.d_horizontal(np.ones_like(f)))) == 0.0
    f7 = np.sin(7 * x1)
    assert np.max(np.abs(g.d_horizontal(f7) - 7 * np.cos(7 * x1))) <= 1e-11


def test_d_vertical_polynomial_exactness():
    g = build_grid(1, 16, 17)
    _, x3 = g.coords()
    assert np.max(np.abs(g.d_vertical(x3) - 1.0)) <= 1e-12
    assert np.max(np.abs(g.d_vertical(x3 ** 4) - 4 * x3 ** 3)) <= 1e-10


def test_d_vertical_fourth_order():
    errs = []
    for n_v in (17, 33):
        g = build_grid(1, 8, n_v)
        _, x3 = g.coords()
        f = np.sin(math.pi * x3)
        errs.append(np.max(np.abs(g.d_vertical(f) - math.pi * np.cos(math.pi * x3))))
    ratio = errs[0] / errs[1]
    assert 12.0 <= ratio <= 20.0  # order 4: factor ~16


def test_mixed_derivatives_commute():
    g = build_grid(1, 32, 17)
    x1, x3 = g.coords()
    f = np.sin(2 * x1) * np.exp(x3)
    ab = g.d_vertical(g.d_horizontal(f))
    ba = g.d_horizontal(g.d_vertical(f))
    assert np.max(np.abs(ab - ba)) <= 1e-10


def test_integrate():
    g = build_grid(1, 16, 17)
    x1, x3 = g.coords()
    assert g.integrate(np.ones(g.shape)) == pytest.approx(TWO_PI, abs=1e-12)
    assert abs(g.integrate(np.sin(x1))) <= 1e-12
    assert g.integrate(x3) == pytest.approx(0.5 * TWO_PI, abs=1e-12)


def test_quadrature_of_horizontal_derivative_vanishes():
    g = build_grid(1, 32, 17)
    rng = np.random.default_rng(0)
    coef = rng.standard_normal(5)
    x1, x3 = g.coords()
    f = sum(c * np.sin((i + 1) * x1 + i) for i, c in enumerate(coef)) * (1 + x3 ** 2)
    assert abs(g.integrate(g.d_horizontal(f))) <= 1e-12


def test_surface_integrate():
    g = build_grid(2, 8, 9)
    bf = np.ones(g.face_shape)
    assert g.surface_integrate(bf) == pytest.approx(TWO_PI ** 2)


def test_sobolev_norm_basic():
    g = build_grid(1, 16, 17)
    x1, _ = g.coords()
    z = np.zeros(g.shape)
    for s in (0, 0.5, 1, 2.5):
        assert g.sobolev_norm(z, s) == 0.0
    f = np.sin(x1)
    n0, n1 = g.sobolev_norm(f, 0), g.sobolev_norm(f, 1)
    assert g.sobolev_norm(f, 0.5) == pytest.approx(math.sqrt(n0 * n1), rel=1e-12)
    with pytest.raises(ValueError):
        g.sobolev_norm(f, -1)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=6), st.integers(min_value=1, max_value=97))
def test_sobolev_norm_monotone_in_s(seed, scale):
    g = build_grid(1, 8, 9)
    rng = np.random.default_rng(seed)
    x1, x3 = g.coords()
    f = scale * (np.sin(x1) * rng.standard_normal() + x3 * rng.standard_normal())
    norms = [g.sobolev_norm(f, s) for s in (0, 0.5, 1, 1.5, 2)]
    for lo, hi in zip(norms, norms[1:]):
        assert lo <= hi + 1e-12 * max(1.0, hi)


def test_boundary_norm_single_mode_multiplier():
    g = build_grid(1, 16, 9)
    (x1,) = g.face_coords()
    for k in (1, 3):
        bf = np.cos(k * x1)
        assert g.boundary_norm(bf, 1) == pytest.approx(
            math.sqrt(1 + k ** 2) * g.boundary_norm(bf, 0), rel=1e-12)


def test_polyharmonic_poisson_manufactured():
    # mu = 0, m = 1 solves -lap u = rhs; u = sin(x1) sin(pi x3), zero Dirichlet
    g = build_grid(1, 16, 257)
    x1, x3 = g.coords()
    u = np.sin(x1) * np.sin(math.pi * x3)
    rhs = (1 + math.pi ** 2) * u
    zero = np.zeros(g.face_shape)
    sol = g.solve_polyharmonic(1, 0.0, rhs, ((zero,), (zero,)))
    assert np.max(np.abs(sol - u)) <= 1e-8


def test_polyharmonic_shifted_constant():
    g = build_grid(1, 16, 17)
    c = 3.25
    bc = np.full(g.face_shape, c)
    sol = g.solve_polyharmonic(1, 1.0, np.zeros(g.shape) + c, ((bc,), (bc,)))
    assert np.max(np.abs(sol - c)) <= 1e-11


def test_polyharmonic_biharmonic_zero():
    g = build_grid(1, 16, 17)
    zero = np.zeros(g.face_shape)
    sol = g.solve_polyharmonic(2, 0.0, np.zeros(g.shape), ((zero, zero), (zero, zero)))
    assert np.max(np.abs(sol)) <= 1e-11


def test_polyharmonic_residual_small():
    # discrete residual of the solve itself is at machine level
    # (rhs band-limited below Nyquist so the reference operator application
    # and the solver's modal operator coincide)
    g = build_grid(1, 16, 33)
    x1, x3 = g.coords()
    rhs = np.sin(2 * x1) * np.cos(x3) + 0.1 * np.cos(5 * x1) * x3 ** 3
    for m, mu in ((1, 0.5), (2, 0.1), (3, 0.01)):
        bc = tuple(tuple(np.zeros(g.face_shape) for _ in range(m)) for _ in range(2))
        u = g.solve_polyharmonic(m, mu, rhs, bc)
        res = _operator_residual(g, m, mu, u, rhs, bc)
        assert res <= 1e-9


def _operator_residual(g, m, mu, u, rhs, bc):
    """Apply the same discrete operator and measure the relative defect."""
    lap = g.d2_vertical(u) + g.d_horizontal(g.d_horizontal(u))
    op = u.copy()
    w = u
    for _ in range(m):
        w = g.d2_vertical(w) + g.d_horizontal(g.d_horizontal(w))
    op = u + (-1) ** m * mu * w
    r = op - rhs
    # exclude the bc rows, which replace the equation
    r = r[..., m:-m]
    return float(np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-30))


def test_trace_and_reference_normal():
    g = build_grid(1, 8, 9)
    _, x3 = g.coords()
    assert np.all(g.trace(x3, BOTTOM) == 0.0)
    assert np.all(g.trace(x3, TOP) == 1.0)
    assert g.reference_normal(BOTTOM)[2] == -1.0
    assert g.reference_normal(TOP)[2] == 1.0
