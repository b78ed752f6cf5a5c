"""Built-in initial-data families and the staged smoothing/compatibility
constructions at orders 0-2.

On the slab the initial surface is flat (eta(0) = e), so H_0 = 0 and the
order-0 condition pins the boundary density to the rest value; bumps enter
through the interior density and the velocity.  The constructed velocity is
the gradient of a potential, so it is exactly irrotational and identically
divergence-matched through the requested order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import FlowMap, deformation, lagrangian_curl
from .grid import BOTTOM, FACES, TOP, Grid
from .model import (EULER, SIGMA, CompatSeeds, PhysParams, SimState, Variant,
                    compatibility_seeds, q_field, taylor_sign)
from .smoothing import mollify_volume

CONSTRUCTION_TOL = 1e-8


@dataclass
class InitialData:
    rho0: np.ndarray
    u0: np.ndarray
    seeds: CompatSeeds
    residuals: list
    taylor_ok: bool
    taylor_min: float

    def to_json(self, grid):
        return json.dumps({
            "grid": {"d_h": grid.d_h, "n_h": grid.n_h, "n_v": grid.n_v,
                     "L_h": grid.L_h},
            "rho0": self.rho0.ravel().tolist(),
            "u0": self.u0.ravel().tolist(),
            "residuals": self.residuals,
            "taylor_ok": bool(self.taylor_ok),
            "taylor_min": self.taylor_min,
        })


def make_state(grid, params, variant, data, t=0.0):
    """Assemble a SimState at time t from an InitialData block."""
    e_cache = deformation(grid, FlowMap(disp=np.zeros(grid.shape + (3,))))
    curl0 = lagrangian_curl(grid, data.u0, e_cache)
    seeds = compatibility_seeds(grid, data.rho0, data.u0, params,
                                variant=variant, order=data.seeds.order)
    return SimState(grid=grid, params=params, variant=variant, rho0=data.rho0,
                    curl0=curl0, seeds=seeds, t=t,
                    disp=np.zeros(grid.shape + (3,)), v=np.array(data.u0),
                    accum=np.zeros(grid.shape + (3,)))


def _rest_density(params):
    return (params.beta / params.alpha) ** (1.0 / params.gamma)


def _tag_seeds(grid, rho0, u0, params, order=3):
    variant = Variant(SIGMA if params.sigma > 0 else EULER)
    seeds = compatibility_seeds(grid, rho0, u0, params, variant=variant,
                                order=order)
    return seeds, seeds.residual_norms()


def _taylor_of(grid, rho0, u0, params, seeds):
    state = SimState(grid=grid, params=params,
                     variant=Variant(SIGMA if params.sigma > 0 else EULER),
                     rho0=rho0, curl0=np.zeros(grid.shape + (3,)), seeds=seeds,
                     t=0.0, disp=np.zeros(grid.shape + (3,)), v=u0,
                     accum=np.zeros(grid.shape + (3,)))
    fields, ok, _ = taylor_sign(rho0, state, params)
    return ok, min(float(np.min(fields[f])) for f in FACES)


def _check_floor(rho0, params):
    floor = 1.5 * params.lam
    if float(np.min(rho0)) < floor:
        raise ValueError(
            f"constructed density fell below the floor {floor} "
            f"(min {float(np.min(rho0)):.3g}); reduce the amplitude")


def rest_state(grid, params):
    """Hydrostatic rest: rho0 = (beta/alpha)^(1/gamma), u0 = 0; compatible to
    every order with a flat boundary; Taylor quantity identically zero."""
    rho0 = np.full(grid.shape, _rest_density(params))
    u0 = np.zeros(grid.shape + (3,))
    seeds, residuals = _tag_seeds(grid, rho0, u0, params)
    ok, tmin = _taylor_of(grid, rho0, u0, params, seeds)
    return InitialData(rho0=rho0, u0=u0, seeds=seeds, residuals=residuals,
                       taylor_ok=ok, taylor_min=tmin)


def _face_laplacian(grid, bf):
    out = grid.d_face(grid.d_face(bf, axis=0), axis=0)
    if grid.d_h == 2:
        out = out + grid.d_face(grid.d_face(bf, axis=1), axis=1)
    return out


def compatible_data(grid, params, amp, mode_k=1, order=2,
                    rho0_guess=None, phi_guess=None,
                    smooth_mu=0.05, smooth_eps=0.02):
    """Bump data satisfying the boundary compatibility conditions through
    `order` (0, 1 or 2), by the staged elliptic constructions:

    order 0: shifted Dirichlet solve pinning the boundary density to the
             rest value (flat surface: H_0 = 0);
    order 1: triharmonic solve for a velocity potential whose Neumann and
             Laplacian traces enforce the order-1 condition (u0 = D phi is
             exactly irrotational);
    order 2: triharmonic solve for the density imposing the Dirichlet datum
             for lap rho0 together with the pinned lower-order traces.
    """
    if params.gamma != 2.0:
        raise ValueError("compatible_data is constructed at gamma = 2; "
                         "use enthalpy_reduce for other exponents")
    if order not in (0, 1, 2):
        raise ValueError("construction supports orders 0..2 only")
    rbar = _rest_density(params)
    if abs(amp) > 0.25 * rbar:
        raise ValueError("bump amplitude too large for the density floor")
    # flat initial surface: sigma H_0 = 0 must dominate 4 lam^2 - beta
    if 4.0 * params.lam ** 2 - params.beta > 0.0:
        raise ValueError("lam too large: sigma H_0 >= 4 lam^2 - beta fails")

    x = grid.coords()
    x1, x3 = x[0], x[-1]

    # --- order 0: boundary-pinned density -------------------------------
    if rho0_guess is None:
        wprof = 16.0 * (x3 * (1.0 - x3)) ** 2
        rho0_guess = rbar + amp * np.cos(mode_k * x1) * wprof
    bc_rho = np.full(grid.face_shape, rbar)
    rho0 = grid.solve_polyharmonic(
        1, smooth_mu, mollify_volume(grid, rho0_guess, smooth_mu),
        ((bc_rho,), (bc_rho,)))
    _check_floor(rho0, params)

    # --- order 0/1: velocity potential ----------------------------------
    gb = params.gamma * params.beta
    variant = Variant(SIGMA if params.sigma > 0 else EULER)
    if phi_guess is None:
        ch = np.cosh(mode_k * (x3 - 0.5)) / np.cosh(0.5 * mode_k)
        phi_guess = amp * np.sin(mode_k * x1) * ch
    if order == 0:
        phi = grid.solve_polyharmonic(
            1, smooth_eps, mollify_volume(grid, phi_guess, smooth_eps),
            tuple((grid.trace(phi_guess, f),) for f in FACES))
        u0 = grid.grad3(phi)
    else:
        dphi3 = grid.d_vertical(phi_guess)
        trace_bc, dn_bc, lap_datum = {}, {}, {}
        for face in FACES:
            trace_bc[face] = grid.trace(phi_guess, face)
            sign = -1.0 if face == BOTTOM else 1.0
            d3 = grid.trace(dphi3, face)
            dn_bc[face] = sign * d3
            # order-1 condition: lap phi = -+ sigma lap_h(d3 phi) / (gamma beta)
            lap_datum[face] = sign * params.sigma * _face_laplacian(grid, d3) / gb
        rhs_phi = mollify_volume(grid, phi_guess, smooth_eps)
        for _ in range(8):
            phi = grid.solve_polyharmonic(
                3, smooth_eps ** 3, rhs_phi,
                tuple((trace_bc[f], dn_bc[f], lap_datum[f]) for f in FACES))
            u0 = grid.grad3(phi)
            probe = compatibility_seeds(grid, rho0, u0, params,
                                        variant=variant, order=1)
            defect = {f: probe.defect_coeffs[f][1] for f in FACES}
            if max(float(np.max(np.abs(d))) for d in defect.values()) \
                    < 0.2 * CONSTRUCTION_TOL:
                break
            # the order-1 defect is -gb (Div u0 - required): Newton on the datum
            for face in FACES:
                lap_datum[face] = lap_datum[face] + defect[face] / gb

    # --- order 2: density with the lap rho0 datum -----------------------
    if order == 2:
        drho3 = grid.d_vertical(rho0)
        Du0 = np.stack([grid.grad3(u0[..., r]) for r in range(3)], axis=-2)
        k0 = np.einsum("...rr->...", Du0)
        trsq = np.einsum("...rs,...sr->...", Du0, Du0)
        probe = compatibility_seeds(grid, rho0, u0, params,
                                    variant=variant, order=2)
        trace_bc, dn_bc, lap_datum = {}, {}, {}
        for face in FACES:
            sign = -1.0 if face == BOTTOM else 1.0
            trace_bc[face] = np.full(grid.face_shape, rbar)
            dn_bc[face] = sign * grid.trace(drho3, face)
            H2 = probe.H_faces[face][2]
            f1 = -params.sigma * H2 / (2.0 * params.beta) \
                + 2.0 * grid.trace(k0, face) ** 2 + grid.trace(trsq, face)
            lap_datum[face] = -0.5 * f1 / params.alpha
        rhs_rho = mollify_volume(grid, rho0_guess, smooth_mu)
        for _ in range(8):
            rho0 = grid.solve_polyharmonic(
                3, smooth_mu ** 3, rhs_rho,
                tuple((trace_bc[f], dn_bc[f], lap_datum[f]) for f in FACES))
            probe = compatibility_seeds(grid, rho0, u0, params,
                                        variant=variant, order=2)
            defect = {f: 2.0 * probe.defect_coeffs[f][2] for f in FACES}
            if max(float(np.max(np.abs(d))) for d in defect.values()) \
                    < 0.2 * CONSTRUCTION_TOL:
                break
            # d(defect)/d(datum) = +2 alpha gamma beta: Newton on the datum
            for face in FACES:
                lap_datum[face] = lap_datum[face] \
                    - defect[face] / (2.0 * params.alpha * gb)
        _check_floor(rho0, params)

    seeds, residuals = _tag_seeds(grid, rho0, u0, params)
    if max(residuals[: order + 1]) > CONSTRUCTION_TOL:
        raise RuntimeError(
            "compatibility construction did not converge: enforced residuals "
            f"{residuals[: order + 1]} exceed {CONSTRUCTION_TOL}")
    ok, tmin = _taylor_of(grid, rho0, u0, params, seeds)
    return InitialData(rho0=rho0, u0=u0, seeds=seeds, residuals=residuals,
                       taylor_ok=ok, taylor_min=tmin)


def taylor_sign_data(grid, params, u0_amp=0.2, modulation=0.0, mode_k=1):
    """Zero-surface-tension data with a strict Taylor sign: the pressure-like
    field Q = beta + nu x3(1 - x3) (+ a modulation vanishing to second order
    on the faces) and a horizontally sheared, divergence-free velocity.
    Orders 0 and 1 of the compatibility conditions hold exactly."""
    x = grid.coords()
    x1, x3 = x[0], x[-1]
    shape = params.nu * x3 * (1.0 - x3)
    if modulation:
        shape = shape + modulation * (x3 * (1.0 - x3)) ** 2 * np.cos(mode_k * x1)
    Q = params.beta + shape
    if np.min(Q) <= 0:
        raise ValueError("modulation drove the pressure field negative")
    rho0 = (Q / params.alpha) ** (1.0 / params.gamma)
    _check_floor(rho0, params)
    u0 = np.zeros(grid.shape + (3,))
    u0[..., 0] = u0_amp * np.sin(math.pi * x3) * x3 * (1.0 - x3)
    seeds, residuals = _tag_seeds(grid, rho0, u0, params)
    ok, tmin = _taylor_of(grid, rho0, u0, params, seeds)
    return InitialData(rho0=rho0, u0=u0, seeds=seeds, residuals=residuals,
                       taylor_ok=ok, taylor_min=tmin)


FAMILIES = {
    "rest": rest_state,
    "compatible": compatible_data,
    "taylor": taylor_sign_data,
}
