"""Mollifiers, horizontal convolution-by-layers, and elliptic flow-map
smoothing.

The mollifier is a periodized Gaussian realized purely by its Fourier symbol
exp(-(eps |k|)^2 / 2): nonnegative, unit mass, symbol 1 at k = 0, and a
contraction in every boundary norm.  Horizontal convolution-by-layers applies
it independently at each depth, so it commutes with horizontal derivatives
and never mixes layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FACES, Grid


def _symbol(grid, eps):
    k2 = grid.wavenumbers ** 2
    if grid.d_h == 1:
        return np.exp(-0.5 * (eps ** 2) * k2)
    return np.exp(-0.5 * (eps ** 2) * (k2[:, None] + k2[None, :]))


@dataclass(frozen=True)
class Mollifier:
    """Periodized Gaussian of radius eps on the horizontal torus."""

    grid: Grid
    eps: float

    @property
    def fourier_symbol(self):
        return _symbol(self.grid, self.eps)

    @property
    def kernel(self):
        """Real-space kernel samples; sum(kernel) * cell_area = 1."""
        sym = self.fourier_symbol
        cell = (self.grid.L_h / self.grid.n_h) ** self.grid.d_h
        return np.real(np.fft.ifftn(sym, axes=tuple(range(self.grid.d_h)))) / cell


def mollify_layers(grid, f, eps):
    """Horizontal convolution-by-layers: per-mode multiplication by the
    mollifier symbol, applied independently at each vertical layer.

    Acts on volume fields, boundary fields, and fields with trailing
    component axes alike; eps = 0 is the identity.
    """
    if eps < 0:
        raise ValueError("mollifier radius must be >= 0")
    if eps == 0.0:
        return np.array(f, copy=True)
    sym = _symbol(grid, eps)
    axes = grid.h_axes
    fh = np.fft.fftn(f, axes=axes)
    shape = list(fh.shape)
    sym_shape = [1] * len(shape)
    for ax in axes:
        sym_shape[ax] = grid.n_h
    return np.real(np.fft.ifftn(fh * sym.reshape(sym_shape), axes=axes))


def smooth_flowmap(grid, fm, eps):
    """Elliptic Dirichlet smoothing of a flow map: solve lap(eta_eps) =
    lap(eta) with the boundary trace mollified horizontally.

    eps = 0 reproduces the map to solver tolerance.  Only the periodic
    displacement is touched; the affine part passes through (a unit-mass
    symmetric kernel fixes affine functions).
    """
    from .geometry import FlowMap

    disp_s = np.empty_like(fm.disp)
    for c in range(3):
        comp = fm.disp[..., c]
        lap = grid.d2_vertical(comp) + grid.d_horizontal(grid.d_horizontal(comp, 0), 0)
        if grid.d_h == 2:
            lap += grid.d_horizontal(grid.d_horizontal(comp, 1), 1)
        bc = tuple((mollify_layers(grid, grid.trace(comp, face), eps),) for face in FACES)
        # mu = 0, m = 1 solves -lap u = rhs
        disp_s[..., c] = grid.solve_polyharmonic(1, 0.0, -lap, bc)
    return FlowMap(disp=disp_s, affine=fm.affine)


def smooth_linear_field(grid, f, eps):
    """The linear map underlying smooth_flowmap applied to one scalar field
    (used by the recursion jets, which need the operator coefficientwise)."""
    lap = grid.d2_vertical(f) + grid.d_horizontal(grid.d_horizontal(f, 0), 0)
    if grid.d_h == 2:
        lap += grid.d_horizontal(grid.d_horizontal(f, 1), 1)
    bc = tuple((mollify_layers(grid, grid.trace(f, face), eps),) for face in FACES)
    return grid.solve_polyharmonic(1, 0.0, -lap, bc)


def mollify_volume(grid, f, mu):
    """Volume mollification: horizontal convolution-by-layers composed with
    vertical mollification of the even reflection across both faces.

    The even extension makes the vertical direction 2-periodic, so the same
    symbol construction applies with wavenumbers pi*m; the trapezoid mean is
    carried by mode 0 and is preserved exactly.
    """
    if mu < 0:
        raise ValueError("mollifier radius must be >= 0")
    out = mollify_layers(grid, f, mu)
    if mu == 0.0:
        return out
    ax = grid.d_h
    n = grid.n_v
    ref = np.take(out, np.arange(n - 2, 0, -1), axis=ax)
    ext = np.concatenate([out, ref], axis=ax)  # length 2(n-1), period 2
    m = 2 * (n - 1)
    kv = 2.0 * np.pi * np.fft.fftfreq(m, d=2.0 / m)
    sym = np.exp(-0.5 * (mu ** 2) * kv ** 2)
    fh = np.fft.fft(ext, axis=ax)
    shape = [1] * ext.ndim
    shape[ax] = m
    sm = np.real(np.fft.ifft(fh * sym.reshape(shape), axis=ax))
    return np.take(sm, np.arange(n), axis=ax)
