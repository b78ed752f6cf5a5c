"""Discrete reference slab: spectral/finite-difference operators, quadrature,
Sobolev norms, and polyharmonic solves.

The reference domain is the slab T^{d_h} x [0, 1]: d_h periodic horizontal
axes (spectral differentiation) and one bounded vertical axis (4th-order
finite differences, one-sided at the two faces).  Both faces x3 = 0 and
x3 = 1 form the reference boundary.

Field conventions
-----------------
Scalar fields are numpy arrays of shape ``grid.shape`` = (n_h,)*d_h + (n_v,);
vector fields carry a trailing axis of length 3.  Boundary fields live on one
face and drop the vertical axis.  All fields are real float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BOTTOM, TOP = "bottom", "top"
FACES = (BOTTOM, TOP)


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def fd_weights(x, x0, der):
    """Finite-difference weights for the `der`-th derivative at x0 on nodes x.

    Solves the moment conditions sum_j w_j (x_j - x0)^p = p! delta_{p,der}
    for p < len(x); exact for polynomials of degree < len(x).  Coordinates
    are scaled by the stencil width for conditioning.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = max(np.max(np.abs(x - x0)), 1.0e-300)
    xi = (x - x0) / h
    V = np.vander(xi, N=n, increasing=True).T  # V[p, j] = xi_j^p
    b = np.zeros(n)
    b[der] = math.factorial(der)
    return np.linalg.solve(V, b) / h ** der


def _vertical_matrix(n_v, h, der, width):
    """Dense n_v x n_v differentiation matrix, order-4 rows everywhere.

    Interior rows use centered `width`-point stencils; the first and last
    rows that would overhang use one-sided stencils of the same width.
    """
    half = width // 2
    x = np.arange(n_v) * h
    D = np.zeros((n_v, n_v))
    for i in range(n_v):
        lo = min(max(i - half, 0), n_v - width)
        idx = np.arange(lo, lo + width)
        D[i, idx] = fd_weights(x[idx], x[i], der)
    return D


@dataclass(frozen=True)
class Grid:
    """Discrete slab T^{d_h} x [0, 1] with periodic horizontal axes."""

    d_h: int
    n_h: int
    n_v: int
    L_h: float = 2.0 * math.pi
    h_v: float = field(init=False)
    wavenumbers: np.ndarray = field(init=False, repr=False)
    D1: np.ndarray = field(init=False, repr=False)
    D2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.d_h not in (1, 2):
            raise ValueError(f"d_h must be 1 or 2, got {self.d_h}")
        if not _is_power_of_two(self.n_h) or self.n_h < 8:
            raise ValueError(f"n_h must be a power of two >= 8, got {self.n_h}")
        if self.n_v < 9:
            raise ValueError(f"n_v must be >= 9, got {self.n_v}")
        if self.L_h <= 0:
            raise ValueError(f"L_h must be positive, got {self.L_h}")
        h = 1.0 / (self.n_v - 1)
        object.__setattr__(self, "h_v", h)
        k = 2.0 * math.pi * np.fft.fftfreq(self.n_h, d=self.L_h / self.n_h)
        object.__setattr__(self, "wavenumbers", k)
        object.__setattr__(self, "D1", _vertical_matrix(self.n_v, h, 1, 5))
        object.__setattr__(self, "D2", _vertical_matrix(self.n_v, h, 2, 6))

    # -- shapes and coordinates -------------------------------------------

    @property
    def shape(self):
        return (self.n_h,) * self.d_h + (self.n_v,)

    @property
    def face_shape(self):
        return (self.n_h,) * self.d_h

    @property
    def h_axes(self):
        return tuple(range(self.d_h))

    def coords(self):
        """Meshgrid of (x1[, x2], x3) arrays of shape ``self.shape``."""
        xh = np.arange(self.n_h) * (self.L_h / self.n_h)
        xv = np.linspace(0.0, 1.0, self.n_v)
        axes = [xh] * self.d_h + [xv]
        return np.meshgrid(*axes, indexing="ij")

    def face_coords(self):
        xh = np.arange(self.n_h) * (self.L_h / self.n_h)
        if self.d_h == 1:
            return (xh,)
        return np.meshgrid(xh, xh, indexing="ij")

    def face_index(self, face):
        return 0 if face == BOTTOM else self.n_v - 1

    def trace(self, f, face):
        """Restriction of a volume field to one face."""
        return np.ascontiguousarray(np.take(f, self.face_index(face), axis=self.d_h))

    def reference_normal(self, face):
        """Outward unit normal N of the reference slab on the given face."""
        N = np.zeros(3)
        N[2] = -1.0 if face == BOTTOM else 1.0
        return N

    # -- differentiation ---------------------------------------------------

    def d_horizontal(self, f, axis=0):
        """Spectral derivative along periodic horizontal axis (0 or 1)."""
        if axis >= self.d_h:
            raise ValueError(f"horizontal axis {axis} out of range for d_h={self.d_h}")
        fh = np.fft.fft(f, axis=axis)
        k = 1j * self.wavenumbers
        if self.n_h % 2 == 0:
            k = k.copy()
            k[self.n_h // 2] = 0.0  # Nyquist mode has no well-defined odd derivative
        shape = [1] * f.ndim
        shape[axis] = self.n_h
        return np.real(np.fft.ifft(fh * k.reshape(shape), axis=axis))

    def d_vertical(self, f):
        """4th-order finite-difference derivative along the vertical axis."""
        return self._apply_vertical(self.D1, f)

    def d2_vertical(self, f):
        return self._apply_vertical(self.D2, f)

    def _apply_vertical(self, D, f):
        ax = self.d_h  # vertical axis index
        moved = np.moveaxis(f, ax, -1)
        out = moved @ D.T
        return np.moveaxis(out, -1, ax)

    def grad3(self, f):
        """All three spatial partials of a field; in d_h=1 the x2 partial is 0.

        Returns an array with a new trailing axis of length 3 ordered
        (d/dx1, d/dx2, d/dx3).
        """
        parts = [self.d_horizontal(f, 0)]
        parts.append(self.d_horizontal(f, 1) if self.d_h == 2 else np.zeros_like(f))
        parts.append(self.d_vertical(f))
        return np.stack(parts, axis=-1)

    def d_face(self, bf, axis=0):
        """Tangential (horizontal) spectral derivative of a boundary field."""
        if axis >= self.d_h:
            raise ValueError(f"horizontal axis {axis} out of range for d_h={self.d_h}")
        fh = np.fft.fft(bf, axis=axis)
        k = 1j * self.wavenumbers
        if self.n_h % 2 == 0:
            k = k.copy()
            k[self.n_h // 2] = 0.0
        shape = [1] * bf.ndim
        shape[axis] = self.n_h
        return np.real(np.fft.ifft(fh * k.reshape(shape), axis=axis))

    # -- quadrature ---------------------------------------------------------

    @property
    def _trapz_weights(self):
        w = np.full(self.n_v, self.h_v)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def integrate(self, f):
        """Volume integral: exact spectral mean horizontally, trapezoid vertically.

        Vector fields integrate componentwise (trailing axes preserved).
        """
        w = self._trapz_weights
        vert = np.tensordot(np.moveaxis(f, self.d_h, -1), w, axes=([-1], [0]))
        mean_h = vert.mean(axis=self.h_axes)
        out = mean_h * self.L_h ** self.d_h
        return float(out) if np.ndim(out) == 0 else out

    def surface_integrate(self, bf):
        """Integral over one face with the flat reference measure dS0."""
        out = np.mean(bf, axis=self.h_axes) * self.L_h ** self.d_h
        return float(out) if np.ndim(out) == 0 else out

    # -- norms ---------------------------------------------------------------

    def _l2_sq(self, f):
        if f.ndim > self.d_h + 1:  # vector field: sum component squares
            return sum(self._l2_sq(f[..., c]) for c in range(f.shape[-1]))
        return self.integrate(f * f)

    def sobolev_norm(self, f, s):
        """Discrete H^s(Omega) norm; half-integer s by geometric interpolation."""
        if s < 0:
            raise ValueError("negative-order norms are out of scope")
        if abs(s - round(s)) < 1e-12:
            return math.sqrt(self._sobolev_sq_int(f, int(round(s))))
        lo, hi = int(math.floor(s)), int(math.ceil(s))
        return math.sqrt(math.sqrt(self._sobolev_sq_int(f, lo) * self._sobolev_sq_int(f, hi)))

    def _sobolev_sq_int(self, f, s):
        if f.ndim > self.d_h + 1:
            return sum(self._sobolev_sq_int(f[..., c], s) for c in range(f.shape[-1]))
        # breadth-first over derivative orders; axes: d_h horizontal + vertical
        total = self._l2_sq(f)
        level = {(0,) * (self.d_h + 1): f}
        for _ in range(s):
            nxt = {}
            for multi, g in level.items():
                for ax in range(self.d_h + 1):
                    m = tuple(mi + (1 if i == ax else 0) for i, mi in enumerate(multi))
                    if m in nxt:
                        continue
                    if ax < self.d_h:
                        nxt[m] = self.d_horizontal(g, ax)
                    else:
                        nxt[m] = self.d_vertical(g)
            for g in nxt.values():
                total += self._l2_sq(g)
            level = nxt
        return total

    def boundary_norm(self, bf, s):
        """H^s(Gamma) norm of a boundary field via the (1+|k|^2)^{s/2} multiplier.

        Exact per Fourier mode for any real s >= 0 (no interpolation needed).
        """
        if s < 0:
            raise ValueError("negative-order norms are out of scope")
        if bf.ndim > self.d_h:
            return math.sqrt(sum(self.boundary_norm(bf[..., c], s) ** 2
                                 for c in range(bf.shape[-1])))
        axes = self.h_axes
        fh = np.fft.fftn(bf, axes=axes)
        k2 = self.wavenumbers ** 2
        if self.d_h == 1:
            mult = (1.0 + k2) ** s
        else:
            mult = (1.0 + k2[:, None] + k2[None, :]) ** s
        npts = self.n_h ** self.d_h
        total = np.sum(mult * np.abs(fh) ** 2) * self.L_h ** self.d_h / npts ** 2
        return math.sqrt(float(total))

    # -- polyharmonic solves ---------------------------------------------------

    def _mode_k2(self):
        k2 = self.wavenumbers ** 2
        if self.d_h == 1:
            return k2
        return (k2[:, None] + k2[None, :]).ravel()

    def solve_polyharmonic(self, m, mu, rhs, bc):
        """Solve u + (-1)^m mu Delta^m u = rhs (mu > 0), or
        (-1)^m Delta^m u = rhs (mu = 0), on the slab.

        `bc` is a pair (bottom, top); each entry supplies m boundary data:
        m = 1: (u,); m = 2: (u, du/dN); m = 3: (u, du/dN, lap u).  du/dN is
        the outward normal derivative (-d/dx3 on the bottom face).  The sign
        convention for mu = 0 makes the operator positive definite.

        Raises RuntimeError when a vertical mode system is singular
        (under-resolved n_v).
        """
        if m not in (1, 2, 3):
            raise ValueError(f"polyharmonic order m must be 1, 2 or 3, got {m}")
        if mu < 0:
            raise ValueError("shift mu must be >= 0")
        if len(bc) != 2 or any(len(b) != m for b in bc):
            raise ValueError(f"bc must supply {m} data per face")

        n = self.n_v
        k2 = self._mode_k2()
        nmodes = k2.size
        eye = np.eye(n)

        # vertical operator L_k = D2 - k^2 I per mode, shape (nmodes, n, n)
        L = self.D2[None, :, :] - k2[:, None, None] * eye[None, :, :]
        Lm = L.copy()
        for _ in range(m - 1):
            Lm = Lm @ L
        sign = (-1) ** m
        M = (np.eye(n)[None] + sign * mu * Lm) if mu > 0 else sign * Lm

        # boundary rows: bottom rows 0..m-1, top rows n-m..n-1
        row_u = eye
        row_dn_bot, row_dn_top = -self.D1, self.D1
        for j in range(m):
            M[:, j, :] = 0.0
            M[:, n - 1 - j, :] = 0.0
        # ordering per face: u, du/dN, lap u
        M[:, 0, :] = row_u[0]
        M[:, n - 1, :] = row_u[n - 1]
        if m >= 2:
            M[:, 1, :] = row_dn_bot[0]
            M[:, n - 2, :] = row_dn_top[n - 1]
        if m >= 3:
            M[:, 2, :] = L[:, 0, :]
            M[:, n - 3, :] = L[:, n - 1, :]

        # transform rhs and boundary data to mode space
        def modes_of(vol):
            fh = np.fft.fftn(vol, axes=self.h_axes)
            return fh.reshape(nmodes, n)

        def face_modes(bfield):
            fh = np.fft.fftn(np.asarray(bfield, dtype=float), axes=self.h_axes)
            return fh.reshape(nmodes)

        b = modes_of(rhs).astype(complex)
        b[:, 0] = face_modes(bc[0][0])
        b[:, n - 1] = face_modes(bc[1][0])
        if m >= 2:
            b[:, 1] = face_modes(bc[0][1])
            b[:, n - 2] = face_modes(bc[1][1])
        if m >= 3:
            b[:, 2] = face_modes(bc[0][2])
            b[:, n - 3] = face_modes(bc[1][2])

        try:
            uh = np.linalg.solve(M, b[..., None])[..., 0]
            # one pass of iterative refinement keeps high-order solves at
            # machine-level residual despite cond(M) ~ h^{-2m}
            r = b - np.einsum("kij,kj->ki", M, uh)
            uh = uh + np.linalg.solve(M, r[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"singular vertical system in polyharmonic solve (m={m}); "
                "n_v is under-resolved") from exc

        full = uh.reshape((self.n_h,) * self.d_h + (n,))
        return np.real(np.fft.ifftn(full, axes=self.h_axes))


def build_grid(d_h, n_h, n_v, L_h=2.0 * math.pi):
    """Construct the discrete slab; validates spectral/stencil preconditions."""
    return Grid(d_h=d_h, n_h=n_h, n_v=n_v, L_h=L_h)
