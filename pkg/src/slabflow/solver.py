"""Method-of-lines time integration: explicit RK4 and an implicit
backward-Euler stepper whose inner Picard iteration mirrors the
frozen-coefficient linear heat solve of the fixed-point construction.

Both steppers advance the same semidiscrete system (the variant's
momentum_rhs), so their trajectories differ by the time-discretization
order alone.  The implicit stepper preconditions the Picard map with a
constant-coefficient heat operator solved by Fourier diagonalization plus
dense vertical solves; the lagged variable-coefficient remainder cancels at
the fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import deformation
from .grid import Grid
from .model import (DegenerateGeometry, SimState, momentum_rhs, sound_speed,
                    transport_rate, working_flowmap)


class NumericalBlowup(RuntimeError):
    """A field left the finite/Jacobian window; carries the monitor report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class PicardDivergence(RuntimeError):
    """The Picard iteration exhausted its budget; carries the distances."""

    def __init__(self, message, distances):
        super().__init__(message)
        self.distances = distances


@dataclass
class StepControl:
    dt: float | None = None          # None: use cfl_dt each step
    cfl_hyper: float = 0.4
    cfl_para: float = 0.25
    t_end: float = 0.1
    max_steps: int = 10000
    picard_tol: float = 1e-10
    picard_max: int = 50
    sample_every: int = 1

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("cfl_hyper", "cfl_para"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


def cfl_dt(state, params=None, ctrl=None):
    """dt = min(hyperbolic sound-speed bound, parabolic kappa bound)."""
    params = params or state.params
    ctrl = ctrl or StepControl()
    grid = state.grid
    cache = deformation(grid, state.flowmap())
    if cache.degenerate:
        raise DegenerateGeometry("cannot size a step on degenerate geometry")
    h_min = min(grid.h_v, grid.L_h / grid.n_h)
    rho = state.rho0 / cache.J
    c_max = float(np.max(sound_speed(rho, params)))
    dt_h = ctrl.cfl_hyper * h_min / c_max
    diffuse = float(np.max(params.kappa * rho))
    if diffuse > 0:
        return min(dt_h, ctrl.cfl_para * h_min ** 2 / diffuse)
    return dt_h


def kappa_boundary_dt(grid, params, safety=0.8):
    """Stability bound of the kappa boundary closure: the solved J_t carries
    the tangential Hessian of v.n, so the viscosity term acts like surface
    diffusion of strength ~ kappa k_max^2 / h_v in the boundary layer
    (measured growth-rate constant ~ 2.1, RK4 margin 2.8)."""
    if params.kappa <= 0:
        return float("inf")
    k_max = float(np.max(np.abs(grid.wavenumbers)))
    return safety * grid.h_v / (params.kappa * k_max ** 2)


def _check_window(state, params, where):
    if not (np.all(np.isfinite(state.v)) and np.all(np.isfinite(state.disp))):
        raise NumericalBlowup(f"non-finite field after {where}",
                              report=_monitor(state, params))
    J = deformation(state.grid, state.flowmap()).J
    if float(np.min(J)) < params.j_lo or float(np.max(J)) > params.j_hi:
        raise NumericalBlowup(
            f"Jacobian left [{params.j_lo}, {params.j_hi}] after {where}",
            report=_monitor(state, params))


def _monitor(state, params):
    """Runtime stand-in for the small-time continuation argument: the state
    of the monitored window when the run left it."""
    try:
        J = deformation(state.grid, state.flowmap()).J
        j_lo, j_hi = float(np.min(J)), float(np.max(J))
    except Exception:  # non-finite fields
        j_lo = j_hi = float("nan")
    return {"t": state.t, "J_min": j_lo, "J_max": j_hi,
            "v_max": float(np.max(np.abs(state.v)))
            if np.all(np.isfinite(state.v)) else float("inf"),
            "window": [params.j_lo, params.j_hi]}


def _ode_rhs(state, params, variant):
    """d/dt of (disp, v, accum) for the variant's semidiscrete system."""
    accel = momentum_rhs(state, params, variant)
    fm_w = working_flowmap(state.grid, state.flowmap(), params, variant)
    B = transport_rate(state, deformation(state.grid, fm_w))
    return state.v, accel, B


def step_rk4(state, dt, params=None, variant=None):
    """Classical four-stage step of (eta, v, curl accumulator); the
    accumulator uses the same stage weights as the trajectory."""
    params = params or state.params
    variant = variant or state.variant
    d0, v0, a0 = state.disp, state.v, state.accum
    t0 = state.t

    k1 = _ode_rhs(state, params, variant)
    s2 = state.advanced(t0 + dt / 2, d0 + dt / 2 * k1[0], v0 + dt / 2 * k1[1],
                        a0 + dt / 2 * k1[2])
    k2 = _ode_rhs(s2, params, variant)
    s3 = state.advanced(t0 + dt / 2, d0 + dt / 2 * k2[0], v0 + dt / 2 * k2[1],
                        a0 + dt / 2 * k2[2])
    k3 = _ode_rhs(s3, params, variant)
    s4 = state.advanced(t0 + dt, d0 + dt * k3[0], v0 + dt * k3[1],
                        a0 + dt * k3[2])
    k4 = _ode_rhs(s4, params, variant)

    new = state.advanced(
        t0 + dt,
        d0 + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        v0 + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        a0 + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))
    _check_window(new, params, f"RK4 step at t={t0:.6g}")
    return new


class _HeatPreconditioner:
    """(I - dt c L)^-1 with L the discrete Laplacian, per Fourier mode."""

    def __init__(self, grid, dt, c):
        self.grid = grid
        k2 = grid._mode_k2()
        n = grid.n_v
        L = grid.D2[None, :, :] - k2[:, None, None] * np.eye(n)[None]
        M = np.eye(n)[None] - dt * c * L
        self.lu = np.linalg.inv(M)  # small dense blocks; reused every pass

    def solve(self, f):
        grid = self.grid
        fh = np.fft.fftn(f, axes=grid.h_axes)
        flat = fh.reshape((-1, grid.n_v) + f.shape[grid.d_h + 1:])
        if flat.ndim == 3:  # vector field: (modes, n_v, 3)
            out = np.einsum("kij,kjc->kic", self.lu, flat)
        else:
            out = np.einsum("kij,kj->ki", self.lu, flat)
        full = out.reshape(fh.shape)
        return np.real(np.fft.ifftn(full, axes=grid.h_axes))


def _laplacian(grid, f):
    out = grid.d2_vertical(f) + grid.d_horizontal(grid.d_horizontal(f, 0), 0)
    if grid.d_h == 2:
        out = out + grid.d_horizontal(grid.d_horizontal(f, 1), 1)
    return out


def step_picard(state, dt, params=None, variant=None, ctrl=None):
    """Backward-Euler step solved by preconditioned Picard iteration.

    Each pass freezes the geometry at the latest iterate, evaluates the
    variant's momentum right-hand side, and solves the constant-coefficient
    linear heat system (I - dt c lap) v_new = v0 + dt [N(vbar) - c lap vbar];
    at the fixed point v_new = v0 + dt N(v_new), i.e. backward Euler on the
    same semidiscrete system the explicit stepper uses.  Convergence is
    declared when successive iterates differ by < picard_tol * dt in the
    discrete H1 norm (the dt scaling keeps the backward-Euler defect at the
    picard_tol level).

    Returns (new_state, info) with the iterate-distance sequence.
    """
    params = params or state.params
    variant = variant or state.variant
    if params.kappa <= 0:
        raise ValueError("the implicit stepper serves the kappa > 0 problems")
    ctrl = ctrl or StepControl()
    grid = state.grid

    cache0 = deformation(grid, state.flowmap())
    cbar = float(np.max(params.kappa * state.rho0 * cache0.J))
    pre = _HeatPreconditioner(grid, dt, cbar)

    d0, v0, a0 = state.disp, state.v, state.accum
    t1 = state.t + dt
    vbar = np.array(v0, copy=True)
    distances = []
    tol = ctrl.picard_tol * dt
    grow = 0
    for it in range(ctrl.picard_max):
        st_bar = state.advanced(t1, d0 + dt * vbar, vbar, a0)
        N = momentum_rhs(st_bar, params, variant)
        lag = np.stack([_laplacian(grid, vbar[..., c]) for c in range(3)], axis=-1)
        rhs = v0 + dt * (N - cbar * lag)
        vnew = pre.solve(rhs)
        # damped update: the lagged boundary closure makes the bare map
        # oscillatory; omega = 1/2 restores contraction for dt below the
        # boundary-stiffness scale (small-T contraction, as in the
        # fixed-point construction)
        vnew = 0.5 * (vbar + vnew)
        dist = sum(grid.sobolev_norm(vnew[..., c] - vbar[..., c], 1)
                   for c in range(3))
        distances.append(dist)
        vbar = vnew
        if dist < tol:
            break
        if len(distances) > 1 and dist > distances[-2]:
            grow += 1
            if grow >= 4:
                raise PicardDivergence(
                    "Picard iteration stopped contracting "
                    "(reduce dt below the boundary-stiffness scale)", distances)
    else:
        raise PicardDivergence(
            f"Picard iteration did not contract within {ctrl.picard_max} passes "
            "(the linearized solve needs a smaller step)", distances)

    new = state.advanced(t1, d0 + dt * vbar, vbar, a0)
    B = transport_rate(new, deformation(
        grid, working_flowmap(grid, new.flowmap(), params, variant)))
    new = new.advanced(t1, new.disp, new.v, a0 + dt * B)
    _check_window(new, params, f"Picard step at t={state.t:.6g}")
    return new, {"iterations": len(distances), "distances": distances}


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    aborted: bool = False
    abort_info: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.states[-1]


def run(state0, ctrl, stepper="rk4", sampler=None, keep_states=True):
    """Advance to t_end (or abort), sampling every `sample_every` steps.

    The sampler is called with (state, step_index) and its rows are returned
    alongside the trajectory; deterministic given identical inputs.
    """
    state = state0
    traj = Trajectory()
    rows = []

    def sample(s, k):
        if sampler is not None:
            rows.append(sampler(s, k))
        if keep_states:
            traj.times.append(s.t)
            traj.states.append(s)

    sample(state, 0)
    step = 0
    try:
        while state.t < ctrl.t_end - 1e-14 and step < ctrl.max_steps:
            if ctrl.dt is not None:
                dt = ctrl.dt
            else:
                dt = min(cfl_dt(state, None, ctrl),
                         kappa_boundary_dt(state.grid, state.params))
            dt = min(dt, ctrl.t_end - state.t)
            if stepper == "rk4":
                state = step_rk4(state, dt)
            elif stepper == "picard":
                state, _ = step_picard(state, dt, ctrl=ctrl)
            else:
                raise ValueError(f"unknown stepper {stepper!r}")
            step += 1
            if step % ctrl.sample_every == 0 or state.t >= ctrl.t_end - 1e-14:
                sample(state, step)
    except NumericalBlowup as exc:
        traj.aborted = True
        traj.abort_info = {"step": step, "message": str(exc), **exc.report}
    except DegenerateGeometry as exc:
        traj.aborted = True
        traj.abort_info = {"step": step, "message": str(exc)}
        if keep_states and (not traj.states or traj.states[-1] is not state):
            traj.times.append(state.t)
            traj.states.append(state)
    if not keep_states:
        traj.times.append(state.t)
        traj.states.append(state)
    return traj, rows
