import math

import numpy as np


def measured_order(errors):
    """Least-order estimate from successive halvings: log2(e_i / e_{i+1})."""
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    return min(orders)


def asymptotic_order(errors):
    """Order estimate from the finest pair (the asymptotic regime)."""
    return math.log2(errors[-2] / errors[-1])


def order_or_exact(errors, order, floor=1e-12):
    """True when the sequence converges at `order` or already sits at the
    discrete-exactness floor (several identities are exact algebra)."""
    if max(errors) <= floor:
        return True
    return asymptotic_order(errors) >= order


def band_limited_vector(grid, rng, amp=0.1, kmax=2, smooth_vertical=True, planar=False):
    """A smooth, horizontally band-limited 3-vector test field.

    With planar=True the x2 component is zeroed: in the d_h = 1 reduction the
    1x1 boundary metric is exact only for flow maps without y-shear along the
    face, and the dynamics preserve that class.
    """
    x = grid.coords()
    x1, x3 = x[0], x[-1]
    out = np.zeros(grid.shape + (3,))
    for c in range(3):
        if planar and c == 1:
            continue
        f = np.zeros(grid.shape)
        for k in range(1, kmax + 1):
            ph = rng.uniform(0, 2 * math.pi)
            prof = np.sin(math.pi * x3 + ph) if smooth_vertical else x3 ** 3
            f += rng.uniform(-1, 1) * np.cos(k * x1 + ph) * prof
        if grid.d_h == 2:
            x2 = x[1]
            f += rng.uniform(-1, 1) * np.sin(x2) * (x3 - 0.5)
        out[..., c] = amp * f
    return out
