"""Lagrangian kinematics of a flow map and the geometric identities used as
runtime checks.

Flow maps are stored as ``eta(x) = affine @ x + disp(x)`` with a constant
3x3 ``affine`` part and a displacement field that is periodic in the
horizontal axes: spectral derivatives only ever touch ``disp``, while the
affine part (identity for all dynamics; dilations/shears in tests) is
differentiated exactly.

Tensor index convention: ``A[..., i, k]`` holds A_i^k with the contraction
rules Div_eta v = A_r^s v^r,s and a_i^k N^k = sqrt(g) n^i, which makes the
stored array the transpose of the pointwise matrix inverse of Deta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import BOTTOM, FACES, TOP, Grid

EYE3 = np.eye(3)

# Levi-Civita symbol with eps_{123} = +1.
EPS = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    EPS[_i, _j, _k] = 1.0
    EPS[_i, _k, _j] = -1.0


@dataclass(frozen=True)
class FlowMap:
    """eta = affine @ x + disp with horizontally periodic disp."""

    disp: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: EYE3.copy())

    def shifted(self, dv, dt):
        return FlowMap(disp=self.disp + dt * dv, affine=self.affine)


def identity_map(grid):
    return FlowMap(disp=np.zeros(grid.shape + (3,)))


def cofactor3(M):
    """Cofactor matrix of a field of 3x3 matrices (trailing axes)."""
    C = np.empty_like(M)
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for k in range(3):
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            C[..., i, k] = M[..., i1, k1] * M[..., i2, k2] - M[..., i1, k2] * M[..., i2, k1]
    return C


@dataclass
class GeometryCache:
    """Pointwise deformation data of a flow map: Deta, A, J, a."""

    Deta: np.ndarray
    A: np.ndarray
    J: np.ndarray
    a: np.ndarray
    degenerate: bool = False


def deformation(grid, fm):
    """Deformation tensor, its inverse, Jacobian and cofactor of a flow map.

    The cofactor is built algebraically from Deta and J = M:C/3 holds
    exactly, so a = J A is an identity of the construction.
    """
    Dd = np.stack([grid.grad3(fm.disp[..., i]) for i in range(3)], axis=-2)
    Deta = Dd + fm.affine
    C = cofactor3(Deta)
    J = np.einsum("...k,...k->...", Deta[..., 0, :], C[..., 0, :])
    degenerate = bool(not np.all(np.isfinite(J)) or np.min(J) <= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        A = C / J[..., None, None]
    return GeometryCache(Deta=Deta, A=A, J=J, a=C, degenerate=degenerate)


@dataclass
class FaceGeometry:
    """Boundary metric data of the deformed surface on one face."""

    face: str
    eta_a: np.ndarray      # tangent vectors eta,alpha     (..., 3, d_h)
    eta_ab: np.ndarray     # second tangentials eta,ab     (..., 3, d_h, d_h)
    g: np.ndarray          # metric g_ab                   (..., d_h, d_h)
    ginv: np.ndarray
    sqrt_g: np.ndarray
    n: np.ndarray          # outward unit normal           (..., 3)
    H: np.ndarray          # twice mean curvature, H = -g^{ab} eta,ab . n
    degenerate: bool = False


def _face_tangentials(grid, fm, face):
    disp_f = grid.trace(fm.disp, face)
    d1 = np.stack([grid.d_face(disp_f[..., i]) for i in range(3)], axis=-1)  # (...,3) per axis
    eta_a = [fm.affine[:, 0] + d1]
    if grid.d_h == 2:
        d2 = np.stack([grid.d_face(disp_f[..., i], axis=1) for i in range(3)], axis=-1)
        eta_a.append(fm.affine[:, 1] + d2)
    eta_a = np.stack(eta_a, axis=-1)  # (..., 3, d_h)
    dh = grid.d_h
    eta_ab = np.empty(eta_a.shape[:-1] + (dh, dh))
    for al in range(dh):
        col = eta_a[..., :, al]
        for be in range(dh):
            eta_ab[..., al, be] = np.stack(
                [grid.d_face(col[..., i], axis=be) for i in range(3)], axis=-1)
    return eta_a, eta_ab


def surface_geometry(grid, fm, cache=None):
    """Boundary metric, area element, outward normal and curvature per face.

    The normal is transported from the reference normal via
    a_i^k N^k = sqrt(g) n^i, never re-derived from a cross product, so the
    orientation is stable under large deformation.
    """
    if cache is None:
        cache = deformation(grid, fm)
    out = {}
    for face in FACES:
        eta_a, eta_ab = _face_tangentials(grid, fm, face)
        dh = grid.d_h
        g = np.einsum("...ia,...ib->...ab", eta_a, eta_a)
        if dh == 1:
            detg = g[..., 0, 0]
            ginv = (1.0 / detg)[..., None, None]
        else:
            detg = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
            ginv = np.empty_like(g)
            ginv[..., 0, 0] = g[..., 1, 1]
            ginv[..., 1, 1] = g[..., 0, 0]
            ginv[..., 0, 1] = -g[..., 0, 1]
            ginv[..., 1, 0] = -g[..., 1, 0]
            ginv = ginv / detg[..., None, None]
        a_f = grid.trace(cache.a, face)
        N = grid.reference_normal(face)
        w = np.einsum("...ik,k->...i", a_f, N)
        sqrt_g = np.sqrt(np.einsum("...i,...i->...", w, w))
        n = w / sqrt_g[..., None]
        H = -np.einsum("...ab,...iab,...i->...", ginv, eta_ab, n)
        out[face] = FaceGeometry(
            face=face, eta_a=eta_a, eta_ab=eta_ab, g=g, ginv=ginv,
            sqrt_g=sqrt_g, n=n, H=H,
            degenerate=bool(np.min(detg) <= 0.0 or not np.all(np.isfinite(detg))))
    return out


# -- Lagrangian differential operators ---------------------------------------


def grad_vector(grid, v):
    """Dv[..., r, s] = d_s v^r for a 3-vector field."""
    return np.stack([grid.grad3(v[..., r]) for r in range(3)], axis=-2)


def lagrangian_div(grid, v, cache):
    """Div_eta v = A_r^s v^r,s."""
    Dv = grad_vector(grid, v)
    return np.einsum("...rs,...rs->...", cache.A, Dv)


def lagrangian_curl(grid, v, cache, Dv=None):
    """(curl_eta v)^i = eps_{ijk} A_j^s v^k,s."""
    if Dv is None:
        Dv = grad_vector(grid, v)
    return np.einsum("ijk,...js,...ks->...i", EPS, cache.A, Dv)


def lagrangian_grad(grid, f, cache):
    """(A^T grad f)^i = A_i^k f,k."""
    return np.einsum("...ik,...k->...i", cache.A, grid.grad3(f))


def laplace_beltrami(grid, fm, surf=None):
    """sqrt(g) Delta_g(eta) and its normal projection per face.

    Returns {face: (lb, proj, residual)} where lb is the divergence form
    d_a(sqrt(g) g^{ab} eta,b) and proj = sqrt(g) g^{ab}[eta,ab . n] n; their
    difference is the discrete defect of the projection identity.
    """
    if surf is None:
        surf = surface_geometry(grid, fm)
    out = {}
    for face, sg in surf.items():
        flux = np.einsum("...,...ab,...ib->...ia", sg.sqrt_g, sg.ginv, sg.eta_a)
        lb = np.zeros(sg.n.shape)
        for al in range(grid.d_h):
            lb += np.stack([grid.d_face(flux[..., i, al], axis=al) for i in range(3)], axis=-1)
        proj = np.einsum("...,...ab,...iab,...i,...j->...j",
                         sg.sqrt_g, sg.ginv, sg.eta_ab, sg.n, sg.n)
        out[face] = (lb, proj, lb - proj)
    return out


def covariant_face_components(sg, xi_face):
    """Split a boundary vector into (xi_al = xi . eta,al, xi3 = xi . n)."""
    xi_al = np.einsum("...i,...ia->...a", xi_face, sg.eta_a)
    xi3 = np.einsum("...i,...i->...", xi_face, sg.n)
    return xi_al, xi3


def boundary_operator_b(grid, sg, xi_face, J_face, smooth=None):
    """The first-order boundary operator b = b_curl + b_div of the
    Neumann-type decomposition.

    b_curl = (sqrt(g)/J) [g^{ab} (xi.n),b + xi_c g^{cd} g^{ab} eta,db . n] eta,a
    b_div  = -(sqrt(g)/J) [g^{ab} xi_a,b + xi_a (1/sqrt(g))(sqrt(g) g^{ab}),b
                           + (xi.n) H] n

    `smooth` optionally post-processes the tangential-derivative inputs
    (the Lambda_mu smoothing of the mu-problem); identity when None.
    """
    if smooth is None:
        smooth = lambda f: f
    xi_al, xi3 = covariant_face_components(sg, xi_face)
    pref = sg.sqrt_g / J_face
    dh = grid.d_h

    d_xi3 = np.stack([smooth(grid.d_face(xi3, axis=b)) for b in range(dh)], axis=-1)
    curv = np.einsum("...c,...cd,...ab,...idb,...i->...a", xi_al, sg.ginv, sg.ginv,
                     sg.eta_ab, sg.n)
    tang = np.einsum("...ab,...b->...a", sg.ginv, d_xi3) + curv
    b_curl = pref[..., None] * np.einsum("...a,...ia->...i", tang, sg.eta_a)

    d_xia = np.stack([np.stack([grid.d_face(xi_al[..., a], axis=b) for b in range(dh)],
                               axis=-1) for a in range(dh)], axis=-2)  # (..., a, b)
    sg_ginv = sg.sqrt_g[..., None, None] * sg.ginv
    div_metric = np.stack([sum(grid.d_face(sg_ginv[..., a, b], axis=b) for b in range(dh))
                           for a in range(dh)], axis=-1)
    scal = (np.einsum("...ab,...ab->...", sg.ginv, d_xia)
            + np.einsum("...a,...a->...", xi_al, div_metric) / sg.sqrt_g
            + xi3 * sg.H)
    b_div = -smooth(pref * scal)[..., None] * sg.n
    return b_curl, b_div


def neumann_decomposition(grid, xi, fm, cache=None, surf=None):
    """Evaluate both sides of the boundary identity

        N^j A_r^j A_r^k xi,k = sqrt(g) J^{-1} (curl_eta xi) x n
                             + sqrt(g) J^{-1} (Div_eta xi) n + b

    per face.  Returns {face: dict} with the three right-side pieces, the
    directly evaluated left side, and the defect.
    """
    if cache is None:
        cache = deformation(grid, fm)
    if surf is None:
        surf = surface_geometry(grid, fm, cache)
    if any(sg.degenerate for sg in surf.values()):
        raise ValueError("degenerate surface metric")
    Dxi = grad_vector(grid, xi)
    curl = lagrangian_curl(grid, xi, cache, Dxi)
    div = np.einsum("...rs,...rs->...", cache.A, Dxi)
    out = {}
    for face, sg in surf.items():
        A_f = grid.trace(cache.A, face)
        Dxi_f = grid.trace(Dxi, face)
        J_f = grid.trace(cache.J, face)
        N = grid.reference_normal(face)
        lhs = np.einsum("j,...rj,...rk,...ik->...i", N, A_f, A_f, Dxi_f)
        pref = sg.sqrt_g / J_f
        curl_part = pref[..., None] * np.cross(grid.trace(curl, face), sg.n)
        div_part = (pref * grid.trace(div, face))[..., None] * sg.n
        b_curl, b_div = boundary_operator_b(grid, sg, grid.trace(xi, face), J_f)
        rhs = curl_part + div_part + b_curl + b_div
        out[face] = {
            "lhs": lhs, "curl_part": curl_part, "div_part": div_part,
            "b": b_curl + b_div, "defect": lhs - rhs,
        }
    return out


def hodge_residual(grid, v, cache):
    """Pointwise defect of -A_r^j[A_r^k v,k],j = curl curl - grad div in
    Lagrangian form; meaningful on interior nodes (one-sided stencils at
    the faces enter at the same order but only the interior is scored)."""
    Dv = grad_vector(grid, v)
    W = np.einsum("...rk,...ik->...ri", cache.A, Dv)  # W[r,i] = A_r^k v^i,k
    lhs = np.zeros(cache.J.shape + (3,))
    for i in range(3):
        for r in range(3):
            lhs[..., i] -= np.einsum("...j,...j->...", cache.A[..., r, :],
                                     grid.grad3(W[..., r, i]))
    curl2 = lagrangian_curl(grid, lagrangian_curl(grid, v, cache, Dv), cache)
    div = np.einsum("...rs,...rs->...", cache.A, Dv)
    graddiv = np.einsum("...is,...s->...i", cache.A, grid.grad3(div))
    return lhs - (curl2 - graddiv)


# -- identity report -----------------------------------------------------------


@dataclass
class IdentityReport:
    """Max/L2 residuals of the kinematic identities, JSON-serializable."""

    residuals: dict

    def to_json(self):
        return json.dumps({k: {"max": v[0], "l2": v[1]} for k, v in self.residuals.items()},
                          indent=2, sort_keys=True)

    def max_residual(self):
        return max(v[0] for v in self.residuals.values())


def _maxl2(grid, f):
    return float(np.max(np.abs(f))), float(np.sqrt(grid._l2_sq(np.ascontiguousarray(f))))


def _surface_maxl2(fields):
    m = max(float(np.max(np.abs(f))) for f in fields)
    l2 = float(np.sqrt(sum(np.mean(f * f) for f in fields)))
    return m, l2


def identity_report(grid, fm, v, dt_probe=1e-3):
    """Residuals of the algebraic and differentiation identities at (eta, v).

    Time-derivative formulas are compared against centered differences along
    the probe eta +/- dt v, so their residuals scale like O(dt_probe^2).
    """
    cache = deformation(grid, fm)
    surf = surface_geometry(grid, fm, cache)
    res = {}

    trJ = np.einsum("...rs,...rs->...", cache.a, cache.Deta) / 3.0
    res["jacobian_identity"] = _maxl2(grid, cache.J - trJ)

    piola = np.stack([sum(grid.grad3(cache.a[..., i, k])[..., k] for k in range(3))
                      for i in range(3)], axis=-1)
    res["piola"] = _maxl2(grid, piola)

    # outward-normal transport vs the metric route sqrt(det g)
    vals = []
    for face, sg in surf.items():
        a_f = grid.trace(cache.a, face)
        w = np.einsum("...ik,k->...i", a_f, grid.reference_normal(face))
        if grid.d_h == 1:
            detg = sg.g[..., 0, 0]
        else:
            detg = sg.g[..., 0, 0] * sg.g[..., 1, 1] - sg.g[..., 0, 1] ** 2
        vals.append(np.einsum("...i,...i->...", w, w) - detg)
    res["outward_normal"] = _surface_maxl2(vals)

    lb = laplace_beltrami(grid, fm, surf)
    res["laplace_beltrami_projection"] = _surface_maxl2([lb[f][2] for f in FACES])

    dn = neumann_decomposition(grid, v, fm, cache, surf)
    res["neumann_decomposition"] = _surface_maxl2([dn[f]["defect"] for f in FACES])

    res["hodge"] = _maxl2(grid, hodge_residual(grid, v, cache))

    # centered-difference probes of the time-differentiation formulas
    Dv = grad_vector(grid, v)
    cp = deformation(grid, fm.shifted(v, dt_probe))
    cm = deformation(grid, fm.shifted(v, -dt_probe))

    J_t = np.einsum("...rs,...rs->...", cache.a, Dv)
    res["J_t_formula"] = _maxl2(grid, J_t - (cp.J - cm.J) / (2 * dt_probe))

    aDv = np.einsum("...rs,...rs->...", cache.a, Dv)
    a_t = (aDv[..., None, None] * cache.a
           - np.einsum("...is,...rk,...rs->...ik", cache.a, cache.a, Dv)) \
        / cache.J[..., None, None]
    res["a_t_formula"] = _maxl2(grid, a_t - (cp.a - cm.a) / (2 * dt_probe))

    A_t = -np.einsum("...is,...rk,...rs->...ik", cache.A, cache.A, Dv)
    res["A_t_formula"] = _maxl2(grid, A_t - (cp.A - cm.A) / (2 * dt_probe))

    # metric-derivative formulas, tangential and temporal, plus normal tangency
    surf_p = surface_geometry(grid, fm.shifted(v, dt_probe), cp)
    surf_m = surface_geometry(grid, fm.shifted(v, -dt_probe), cm)
    tang_res, time_res, normal_tang = [], [], []
    dh = grid.d_h
    for face in FACES:
        sg, sp, sm = surf[face], surf_p[face], surf_m[face]
        for ax in range(dh):

            def dax(f, _ax=ax):
                return grid.d_face(f, axis=_ax)

            dg = np.stack([np.stack([dax(sg.g[..., al, be]) for be in range(dh)], axis=-1)
                           for al in range(dh)], axis=-2)
            dginv_direct = np.stack(
                [np.stack([dax(sg.ginv[..., al, be]) for be in range(dh)], axis=-1)
                 for al in range(dh)], axis=-2)
            dginv_formula = -np.einsum("...am,...mn,...nb->...ab", sg.ginv, dg, sg.ginv)
            tang_res.append(dginv_direct - dginv_formula)

            dsqrtg_direct = dax(sg.sqrt_g)
            dsqrtg_formula = 0.5 * sg.sqrt_g * np.einsum("...mn,...mn->...", sg.ginv, dg)
            tang_res.append(dsqrtg_direct - dsqrtg_formula)

            dn_direct = np.stack([dax(sg.n[..., i]) for i in range(3)], axis=-1)
            # d_ax(eta,delta) = eta_ab[..., :, delta, ax]
            dn_formula = -np.einsum("...cd,...id,...i,...jc->...j",
                                    sg.ginv, sg.eta_ab[..., :, :, ax], sg.n, sg.eta_a)
            tang_res.append(dn_direct - dn_formula)
            normal_tang.append(np.einsum("...i,...i->...", dn_formula, sg.n))

        v_f = grid.trace(v, face)
        dv_a = np.stack([np.stack([grid.d_face(v_f[..., i], axis=al) for i in range(3)],
                                  axis=-1) for al in range(dh)], axis=-1)  # (..., i, a)
        gt_formula = (np.einsum("...ia,...ib->...ab", dv_a, sg.eta_a)
                      + np.einsum("...ia,...ib->...ab", sg.eta_a, dv_a))
        time_res.append(gt_formula - (sp.g - sm.g) / (2 * dt_probe))
        gtinv_formula = -np.einsum("...am,...mn,...nb->...ab", sg.ginv, gt_formula, sg.ginv)
        time_res.append(gtinv_formula - (sp.ginv - sm.ginv) / (2 * dt_probe))
        sqg_t = 0.5 * sg.sqrt_g * np.einsum("...mn,...mn->...", sg.ginv, gt_formula)
        time_res.append(sqg_t - (sp.sqrt_g - sm.sqrt_g) / (2 * dt_probe))
        n_t = -np.einsum("...cd,...id,...i,...jc->...j", sg.ginv, dv_a, sg.n, sg.eta_a)
        time_res.append(n_t - (sp.n - sm.n) / (2 * dt_probe))

    res["metric_tangential_formulas"] = _surface_maxl2(tang_res)
    res["metric_time_formulas"] = _surface_maxl2(time_res)
    res["normal_derivative_tangency"] = _surface_maxl2(normal_tang)

    return IdentityReport(residuals=res)
