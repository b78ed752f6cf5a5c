import math

import numpy as np
import pytest

from slabflow.geometry import FlowMap, identity_map
from slabflow.grid import BOTTOM, FACES, TOP, build_grid
from slabflow.smoothing import (Mollifier, mollify_layers, mollify_volume,
                                smooth_flowmap)


def test_kernel_unit_mass_and_symbol_one_at_zero():
    g = build_grid(1, 32, 9)
    for eps in (0.05, 0.2, 0.7):
        mol = Mollifier(g, eps)
        cell = g.L_h / g.n_h
        assert np.sum(mol.kernel) * cell == pytest.approx(1.0, abs=1e-12)
        assert mol.fourier_symbol[0] == pytest.approx(1.0, abs=1e-15)
        assert np.all(mol.fourier_symbol > 0)
        assert np.all(mol.fourier_symbol <= 1.0)


def test_mollify_constant_and_identity_at_zero():
    g = build_grid(1, 16, 9)
    f = np.full(g.shape, 2.5)
    assert np.allclose(mollify_layers(g, f, 0.3), 2.5, atol=1e-13)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(g.shape)
    assert np.array_equal(mollify_layers(g, f, 0.0), f)


def test_mollify_single_mode_against_direct_summation():
    # oracle: quadrature of the real-space kernel against the shifted mode,
    # evaluated at a single point
    g = build_grid(1, 64, 9)
    eps, k = 0.15, 3
    mol = Mollifier(g, eps)
    (x1,) = g.face_coords()
    bf = np.cos(k * x1)
    out = mollify_layers(g, bf, eps)
    cell = g.L_h / g.n_h
    ker = mol.kernel
    i0 = 5
    direct = sum(ker[j] * bf[(i0 - j) % g.n_h] for j in range(g.n_h)) * cell
    assert out[i0] == pytest.approx(direct, abs=1e-12)
    assert out[i0] == pytest.approx(math.exp(-0.5 * (eps * k) ** 2) * bf[i0], abs=1e-12)


def test_mollifier_contraction_in_boundary_norms():
    g = build_grid(1, 64, 9)
    rng = np.random.default_rng(1)
    bf = rng.standard_normal(g.face_shape)
    for s in (0, 1, 2.5):
        for eps in (0.05, 0.3):
            assert g.boundary_norm(mollify_layers(g, bf, eps), s) <= \
                g.boundary_norm(bf, s) * (1 + 1e-12)


def test_smoothing_gain_estimate_uniform_constant():
    # eps * |L_eps f|_1 <= C |f|_0 with one C for all eps (white noise data)
    g = build_grid(1, 128, 9)
    rng = np.random.default_rng(2)
    bf = rng.standard_normal(g.face_shape)
    C = 1.0
    for eps in (0.05, 0.1, 0.2):
        lhs = eps * g.boundary_norm(mollify_layers(g, bf, eps), 1)
        assert lhs <= C * g.boundary_norm(bf, 0)


def test_mollify_commutes_with_horizontal_derivative():
    g = build_grid(1, 32, 9)
    rng = np.random.default_rng(3)
    f = rng.standard_normal(g.shape)
    a = g.d_horizontal(mollify_layers(g, f, 0.2))
    b = mollify_layers(g, g.d_horizontal(f), 0.2)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_smooth_flowmap_identity_cases():
    g = build_grid(1, 16, 17)
    fm = identity_map(g)
    out = smooth_flowmap(g, fm, 0.3)
    assert np.max(np.abs(out.disp - fm.disp)) <= 1e-9

    x1, x3 = g.coords()
    disp = np.zeros(g.shape + (3,))
    disp[..., 2] = 0.1 * np.sin(x1) * x3 + 0.05 * np.cos(2 * x1) * x3 ** 2
    fm = FlowMap(disp=disp)
    out = smooth_flowmap(g, fm, 0.0)
    assert np.max(np.abs(out.disp - disp)) <= 1e-9


def test_smooth_flowmap_identity_on_harmonic_map_unmollified_trace():
    g = build_grid(1, 32, 17)
    x1, x3 = g.coords()
    disp = np.zeros(g.shape + (3,))
    disp[..., 0] = 0.02 * np.sin(x1) * np.cosh(x3)  # harmonic: lap = 0
    out = smooth_flowmap(g, FlowMap(disp=disp), 0.0)
    assert np.max(np.abs(out.disp - disp)) <= 1e-9


def test_smooth_flowmap_norm_bounded_uniformly_in_eps():
    g = build_grid(1, 32, 17)
    rng = np.random.default_rng(4)
    x1, x3 = g.coords()
    ratios = []
    for trial in range(4):
        disp = np.zeros(g.shape + (3,))
        for c in (0, 2):
            for k in (1, 2, 3):
                disp[..., c] += rng.uniform(-0.1, 0.1) * np.cos(k * x1 + rng.uniform(0, 6)) \
                    * np.sin(math.pi * x3 * rng.uniform(0.5, 1.5))
        base = sum(g.sobolev_norm(disp[..., c], 2) for c in range(3))
        for eps in (0.05, 0.1, 0.2):
            out = smooth_flowmap(g, FlowMap(disp=disp), eps)
            sm = sum(g.sobolev_norm(out.disp[..., c], 2) for c in range(3))
            ratios.append(sm / base)
    assert max(ratios) <= 1.5  # C independent of eps; measured C is modest


def test_mollify_volume_constant_and_mode():
    g = build_grid(1, 32, 17)
    f = np.full(g.shape, -1.7)
    assert np.allclose(mollify_volume(g, f, 0.2), -1.7, atol=1e-12)

    mu = 0.1
    x1, _ = g.coords()
    f = np.sin(x1)
    out = mollify_volume(g, f, mu)
    # horizontal-only content: vertical reflection sees a constant per layer
    assert np.max(np.abs(out - math.exp(-0.5 * mu ** 2) * f)) <= 1e-12


def test_mollify_volume_mean_preserved_and_converges():
    g = build_grid(1, 32, 33)
    rng = np.random.default_rng(5)
    x1, x3 = g.coords()
    f = 1.0 + 0.3 * np.sin(2 * x1) * np.sin(math.pi * x3) + 0.1 * x3 ** 2
    m0 = g.integrate(f)
    errs = []
    for mu in (0.2, 0.1, 0.05):
        out = mollify_volume(g, f, mu)
        assert g.integrate(out) == pytest.approx(m0, abs=1e-12)
        errs.append(np.max(np.abs(out - f)))
    assert errs[0] > errs[1] > errs[2]
