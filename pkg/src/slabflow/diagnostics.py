"""Energy functionals, invariant monitors, lemma checks, and sweep studies.

The trajectory record is a list of rows with the fixed column order COLUMNS;
CSV and JSON writers keep that contract stable.  Time derivatives inside the
energy functionals come from the momentum-equation recursion at the sampled
state, never from temporal finite differences.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import jets as J
from .geometry import deformation, grad_vector, surface_geometry
from .grid import BOTTOM, FACES, TOP
from .model import (SimState, beta_correction, boundary_closure, momentum_rhs,
                    q_field, taylor_sign, velocity_jets, vorticity_defect,
                    working_flowmap, _override_faces)

COLUMNS = [
    "t", "physical_energy", "E_trunc", "Escript_trunc", "Ekappa_trunc",
    "Esigma_trunc", "vorticity_residual", "piola_residual", "J_min", "J_max",
    "taylor_min", "compat_res_0", "compat_res_1", "compat_res_2",
    "compat_res_3", "equiv_residual", "beta_of_t",
]


def physical_energy(state, params=None):
    """Conserved energy: kinetic + internal + beta-volume + sigma * area.

    internal = alpha/(gamma-1) rho0^gamma J^(1-gamma), whose time derivative
    balances the pressure work -(Q - beta) J_t exactly; at gamma = 2 it is
    the familiar rho0^2 / J.
    """
    params = params or state.params
    grid = state.grid
    cache = deformation(grid, state.flowmap())
    g = params.gamma
    kinetic = 0.5 * state.rho0 * np.einsum("...i,...i->...", state.v, state.v)
    internal = params.alpha / (g - 1.0) * state.rho0 ** g * cache.J ** (1.0 - g)
    vol = kinetic + internal + params.beta * cache.J
    total = grid.integrate(vol)
    if params.sigma > 0:
        surf = surface_geometry(grid, state.flowmap(), cache)
        total += params.sigma * sum(grid.surface_integrate(surf[f].sqrt_g)
                                    for f in FACES)
    return float(total)


def _flowmap_norm_sq(grid, disp, s):
    """|eta|_s^2 with eta = e + disp: the identity part is differentiated
    analytically (it is not horizontally periodic), the displacement
    discretely; the passive x2 coordinate is omitted in the reduced
    dimension."""
    x = grid.coords()
    coord_of = {0: x[0], grid.d_h + 0: None, 2: x[-1]}
    comp_coords = {0: x[0], 2: x[-1]}
    if grid.d_h == 2:
        comp_coords[1] = x[1]
    # axis index of each component's unit first derivative: d eta^c / dx^c
    unit_axis = {0: 0, 2: grid.d_h}
    if grid.d_h == 2:
        unit_axis[1] = 1
    s_int = int(math.floor(s))
    if abs(s - s_int) > 1e-12:
        lo = _flowmap_norm_sq(grid, disp, s_int)
        hi = _flowmap_norm_sq(grid, disp, s_int + 1)
        return math.sqrt(lo * hi)
    total = 0.0
    naxes = grid.d_h + 1
    for c in range(3):
        level = {(0,) * naxes: disp[..., c]}
        f0 = disp[..., c] + comp_coords.get(c, 0.0)
        total += grid.integrate(f0 * f0)
        for order in range(1, s_int + 1):
            nxt = {}
            for multi, gf in level.items():
                for ax in range(naxes):
                    m = tuple(mi + (1 if i == ax else 0)
                              for i, mi in enumerate(multi))
                    if m in nxt:
                        continue
                    nxt[m] = grid.d_horizontal(gf, ax) if ax < grid.d_h \
                        else grid.d_vertical(gf)
            for m, gf in nxt.items():
                add = gf
                if order == 1 and c in unit_axis and m[unit_axis[c]] == 1:
                    add = gf + 1.0  # the unit derivative of the identity part
                total += grid.integrate(add * add)
            level = nxt
    return total


def _vec_norm_sq(grid, v, s):
    return sum(grid.sobolev_norm(v[..., c], s) ** 2 for c in range(3))


def _hess_dot_n_norm_sq(grid, state, surf, va, s):
    """sum_{faces, a, b} |(d_a d_b v).n|_s^2 on the deformed boundary."""
    total = 0.0
    dh = grid.d_h
    for face in FACES:
        v_f = grid.trace(va, face)
        n = surf[face].n
        for al in range(dh):
            first = np.stack([grid.d_face(v_f[..., i], axis=al)
                              for i in range(3)], axis=-1)
            for be in range(dh):
                second = np.stack([grid.d_face(first[..., i], axis=be)
                                   for i in range(3)], axis=-1)
                total += grid.boundary_norm(
                    np.einsum("...i,...i->...", second, n), s) ** 2
    return total


def _normal_trace_norm_sq(grid, state, surf, va, s):
    total = 0.0
    for face in FACES:
        v_f = grid.trace(va, face)
        total += grid.boundary_norm(
            np.einsum("...i,...i->...", v_f, surf[face].n), s) ** 2
    return total


def energy_functionals(state, order=3):
    """The four higher-order energy functionals, truncated at the recursion
    order; omitted terms are flagged by name.  All are >= 1 by the additive
    constant of their definitions."""
    params, variant, grid = state.params, state.variant, state.grid
    eta_jet, w = velocity_jets(grid, params, variant, state.rho0,
                               state.flowmap(), state.v, state.accum,
                               state.curl0, order)
    cache = deformation(grid, state.flowmap())
    surf = surface_geometry(grid, state.flowmap(), cache)
    Jj = None
    # Jacobian jet from the eta jet (unsmoothed flow map)
    from .model import _geom_jets
    _, _, Jj, _ = _geom_jets(grid, eta_jet, np.eye(3))

    eta_stack = {0: state.disp}
    for a in range(1, len(eta_jet)):
        eta_stack[a] = J.deriv(eta_jet, a)
    v_stack = {a: J.deriv(w, a) for a in range(len(w))}
    J_stack = {a: J.deriv(Jj, a) for a in range(len(Jj))}

    omitted = []

    def eta_norm_sq(a, s):
        if a == 0:
            return _flowmap_norm_sq(grid, state.disp, s)
        return _vec_norm_sq(grid, eta_stack[a], s)

    # E(t): surface tension functional
    E = 1.0
    for a in range(6):
        if a in eta_stack:
            E += eta_norm_sq(a, 5 - a)
        else:
            omitted.append(f"E:eta_t^{a}")
    if 3 in v_stack:
        E += _normal_trace_norm_sq(grid, state, surf, v_stack[3], 1)
    else:
        omitted.append("E:vttt.n")
    for a in range(3):
        if a in v_stack:
            E += _hess_dot_n_norm_sq(grid, state, surf, v_stack[a], 2.5 - a)
        else:
            omitted.append(f"E:dd_v_t^{a}.n")

    # script-E: zero surface tension functional
    Es = 1.0
    for a in range(8):
        if a in eta_stack:
            Es += eta_norm_sq(a, 4.5 - 0.5 * a)
        else:
            omitted.append(f"Escript:eta_t^{a}")
    for a in range(6):
        if a in J_stack:
            Es += grid.sobolev_norm(J_stack[a], 4.5 - 0.5 * a) ** 2
        else:
            omitted.append(f"Escript:J_t^{a}")
    omitted.append("Escript:J_t^6_H1")

    # kappa functional: instantaneous terms; the time-integral terms and all
    # fourth-derivative content lie beyond the recursion order
    Ek = 1.0
    for a in range(6):
        if a in eta_stack:
            Ek += eta_norm_sq(a, 5 - a)
        else:
            omitted.append(f"Ekappa:eta_t^{a}")
    if 3 in v_stack:
        Ek += _normal_trace_norm_sq(grid, state, surf, v_stack[3], 1)
    for a in range(3):
        if a in v_stack:
            Ek += _hess_dot_n_norm_sq(grid, state, surf, v_stack[a], 2.5 - a)
    kap = params.kappa
    for a in range(4):
        if a in v_stack:
            Ek += kap ** 2 * _vec_norm_sq(grid, v_stack[a], 5 - a)
        else:
            omitted.append(f"Ekappa:kappa_v_t^{a}")
    for a in range(3):
        if a + 1 in v_stack:
            Ek += kap ** 2 * _hess_dot_n_norm_sq(grid, state, surf,
                                                 v_stack[a + 1], 2.5 - a)
        else:
            omitted.append(f"Ekappa:kappa_dd_v_t^{a+1}.n")
    omitted.extend(["Ekappa:int_sqrtkappa_dd_vtttt.n", "Ekappa:int_sqrtkappa_vtttt"])

    # sigma functional
    sig = params.sigma
    Esig = 1.0
    for a in range(8):
        if a in eta_stack:
            Esig += eta_norm_sq(a, 4.5 - 0.5 * a)
        else:
            omitted.append(f"Esigma:eta_t^{a}")
    for a in range(6):
        if a in J_stack:
            Esig += grid.sobolev_norm(J_stack[a], 4.5 - 0.5 * a) ** 2
        else:
            omitted.append(f"Esigma:J_t^{a}")
    omitted.append("Esigma:J_t^6_H1")
    for a in range(6):
        if a in eta_stack:
            Esig += sig * eta_norm_sq(a, 5.5 - 0.5 * a)
        else:
            omitted.append(f"Esigma:sqrtsigma_eta_t^{a}")
    omitted.extend(["Esigma:sqrtsigma_v_t^5", "Esigma:sqrtsigma_v_t^5.n",
                    "Esigma:sqrtsigma_v_t^6.n"])
    for a in range(4):
        if a in eta_stack:
            Esig += sig ** 2 * eta_norm_sq(a, 6.5 - 0.5 * a)
        else:
            omitted.append(f"Esigma:sigma_eta_t^{a}")
    if 3 in v_stack:
        Esig += sig ** 2 * _vec_norm_sq(grid, v_stack[3], 4)
        Esig += sig ** 2 * _normal_trace_norm_sq(grid, state, surf, v_stack[3], 4)
    else:
        omitted.extend(["Esigma:sigma_v_ttt", "Esigma:sigma_v_ttt.n"])
    omitted.extend(["Esigma:sigma_v_t^4.n", "Esigma:sigma_v_t^5.n"])

    return {"E": E, "Escript": Es, "Ekappa": Ek, "Esigma": Esig,
            "omitted": omitted}


def vorticity_residual(state):
    """Sup norm of curl_eta v - (curl u0 + accumulated transport)."""
    grid = state.grid
    fm_w = working_flowmap(grid, state.flowmap(), state.params, state.variant)
    cache = deformation(grid, fm_w)
    return float(np.max(np.abs(vorticity_defect(state, cache))))


def piola_residual(state):
    grid = state.grid
    cache = deformation(grid, state.flowmap())
    pio = np.stack([sum(grid.grad3(cache.a[..., i, k])[..., k]
                        for k in range(3)) for i in range(3)], axis=-1)
    return float(np.max(np.abs(pio)))


def kappa_dissipation(state, params=None):
    """The two nonnegative dissipation integrals of the kappa problem:
    volume kappa rho0^2 J^-1 |J_t|^2 and boundary kappa sqrt(g) g^{ab}
    (v,a . n)(v,b . n), with the boundary-closed J_t."""
    params = params or state.params
    grid = state.grid
    variant = state.variant
    fm_w = working_flowmap(grid, state.flowmap(), params, variant)
    cache = deformation(grid, fm_w)
    surf = surface_geometry(grid, fm_w, cache)
    Dv = grad_vector(grid, state.v)
    Jt = np.einsum("...rs,...rs->...", cache.a, Dv)
    if variant.viscous:
        closure = boundary_closure(state, params, variant, fm_w, cache, surf)
        if variant.kind != "heat":
            Jt = _override_faces(grid, Jt, closure)
    d_vol = params.kappa * grid.integrate(
        state.rho0 ** 2 / cache.J * Jt ** 2)
    d_bdy = 0.0
    for face in FACES:
        sg = surf[face]
        v_f = grid.trace(state.v, face)
        dh = grid.d_h
        dv = np.stack([np.stack([grid.d_face(v_f[..., i], axis=al)
                                 for i in range(3)], axis=-1)
                       for al in range(dh)], axis=-1)  # (..., i, a)
        vn = np.einsum("...ia,...i->...a", dv, sg.n)
        integrand = np.einsum("...,...ab,...a,...b->...", sg.sqrt_g, sg.ginv,
                              vn, vn)
        d_bdy += params.kappa * grid.surface_integrate(integrand)
    return float(d_vol), float(d_bdy)


def energy_balance_defect(states, params=None):
    """Integral form of the kappa energy balance over sampled states:
    E(t_n) - E(t_0) + int (D_vol + D_bdy) dt, trapezoid in time, divided by
    the elapsed time and the energy scale."""
    params = params or states[0].params
    E0 = physical_energy(states[0], params)
    En = physical_energy(states[-1], params)
    times = [s.t for s in states]
    diss = [sum(kappa_dissipation(s, params)) for s in states]
    integral = np.trapezoid(diss, times)
    T = times[-1] - times[0]
    return abs(En - E0 + integral) / (abs(E0) * max(T, 1e-30))


def kappa_lemma_check(grid, f0, times, g_samples, kappa, s=0, C=1.0 + 1e-9):
    """Exact exponential integration of f + kappa f_t = g (g piecewise
    linear between samples) and the bound
    sup_t |f|_s <= C max(|f(0)|_s, sup_t |g|_s)."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    f = np.array(f0, copy=True, dtype=float)
    sup_f = grid.sobolev_norm(f, s)
    sup_g = max(grid.sobolev_norm(gs, s) for gs in g_samples)
    for i in range(len(times) - 1):
        dt = times[i + 1] - times[i]
        g0, g1 = g_samples[i], g_samples[i + 1]
        m = (g1 - g0) / dt
        E = math.exp(-dt / kappa)
        f = E * f + g0 * (1.0 - E) + m * (dt - kappa * (1.0 - E))
        sup_f = max(sup_f, grid.sobolev_norm(f, s))
    bound = C * max(grid.sobolev_norm(np.asarray(f0, dtype=float), s), sup_g)
    ratio = sup_f / max(bound / C, 1e-300)
    return {"holds": sup_f <= bound, "sup_f": sup_f, "bound": bound,
            "ratio": ratio, "final": f}


def sample_row(state, order=3, equiv=None):
    """One diagnostics row in the COLUMNS order."""
    params = state.params
    grid = state.grid
    cache = deformation(grid, state.flowmap())
    funcs = energy_functionals(state, order=order)
    tfields, _, _ = taylor_sign(state.rho0, state, params)
    compat = state.seeds.residual_norms()
    compat = compat + [float("nan")] * (4 - len(compat))
    if equiv is None:
        from .model import heat_equiv_residual
        equiv = heat_equiv_residual(state, params) if params.kappa > 0 else 0.0
    return {
        "t": state.t,
        "physical_energy": physical_energy(state, params),
        "E_trunc": funcs["E"],
        "Escript_trunc": funcs["Escript"],
        "Ekappa_trunc": funcs["Ekappa"],
        "Esigma_trunc": funcs["Esigma"],
        "vorticity_residual": vorticity_residual(state),
        "piola_residual": piola_residual(state),
        "J_min": float(np.min(cache.J)),
        "J_max": float(np.max(cache.J)),
        "taylor_min": min(float(np.min(tfields[f])) for f in FACES),
        "compat_res_0": compat[0], "compat_res_1": compat[1],
        "compat_res_2": compat[2], "compat_res_3": compat[3],
        "equiv_residual": equiv,
        "beta_of_t": beta_correction(state.variant, state.seeds, params,
                                     state.t),
    }


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in COLUMNS})


def snapshot_json(path, state, meta=None):
    grid = state.grid
    doc = {
        "meta": {"t": state.t, "variant": state.variant.kind,
                 "params": {k: getattr(state.params, k) for k in
                            ("alpha", "gamma", "beta", "sigma", "kappa",
                             "eps", "mu", "lam", "nu")},
                 **(meta or {})},
        "grid": {"d_h": grid.d_h, "n_h": grid.n_h, "n_v": grid.n_v,
                 "L_h": grid.L_h},
        "fields": {
            "disp": state.disp.ravel().tolist(),
            "v": state.v.ravel().tolist(),
            "accum": state.accum.ravel().tolist(),
            "rho0": state.rho0.ravel().tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


@dataclass
class SweepTable:
    knob: str
    values: list
    differences: list          # |eta_i - eta_last|_2, one per non-final value
    rows: list = field(default_factory=list)
    aborted: dict = field(default_factory=dict)

    def monotone(self):
        ds = [d for d in self.differences if d is not None]
        return all(a > b for a, b in zip(ds, ds[1:]))

    def to_json(self):
        return json.dumps({"knob": self.knob, "values": self.values,
                           "differences": self.differences,
                           "aborted": self.aborted, "rows": self.rows},
                          indent=2)


def sweep(runner, knob, values):
    """Run the trajectory per knob value (descending) and report
    |eta_i - eta_last|_2 against the finest run."""
    if len(values) < 3:
        raise ValueError("a sweep needs at least 3 values")
    if not all(a > b for a, b in zip(values, values[1:])):
        raise ValueError("sweep values must be strictly descending")
    finals, rows, aborted = [], [], {}
    for val in values:
        traj, rr = runner(knob, val)
        finals.append(None if traj.aborted else traj.final)
        rows.append(rr[-1] if rr else None)
        if traj.aborted:
            aborted[val] = traj.abort_info
    ref = finals[-1]
    diffs = []
    for st in finals[:-1]:
        if st is None or ref is None:
            diffs.append(None)
            continue
        grid = st.grid
        d = st.disp - ref.disp
        diffs.append(math.sqrt(sum(grid._l2_sq(d[..., c]) for c in range(3))))
    return SweepTable(knob=knob, values=list(values), differences=diffs,
                      rows=rows, aborted=aborted)
