"""Grid solvers for the scaled Schrodinger equation and the nonlinear transition equation.

Both equations are stepped with Crank-Nicolson on a uniform grid; the
friction factors ``exp(-gamma t)`` and ``exp(+gamma t)`` are evaluated at
the midpoint of each (sub)step. The kinetic operator uses the compact
fourth-order (Numerov) stencil by default, which keeps the system
tridiagonal. ``scheme="cn4"`` composes three Crank-Nicolson substeps
(symmetric triple jump) for fourth-order accuracy in time; every substep is
still unitary.

The module also holds the Bohmian diagnostics used to certify the closed
forms: polar decomposition, quantum potential, equation residuals and the
Newton-law check along trajectories.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lapack

from .core import (
    CKError,
    Free,
    Grid,
    Harmonic,
    Linear,
    ModelParams,
    NonFiniteDetected,
    NumericalError,
    Potential,
    ValidationError,
    WaveField,
    validate_params,
)

log = logging.getLogger(__name__)

EPSILON_FLOOR = 1e-3
AMPLITUDE_FLOOR = 1e-12

_TJ_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_TJ_W0 = 1.0 - 2.0 * _TJ_W1


class EpsilonZero(ValidationError):
    """The linear scaled equation has no content at epsilon = 0."""


class EpsilonBelowFloor(ValidationError):
    pass


class NonlinearDivergence(NumericalError):
    pass


class PhaseUnwrapFailure(CKError):
    pass


class AmplitudeFloorHit(UserWarning):
    """The nonlinear term was masked where the amplitude is below the floor."""


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """Grid, time step and numerical options of one solver run.

    ``sample_times`` selects output times (snapped to the step grid); when
    omitted every ``sample_every``-th step is returned.
    """

    grid: Grid
    dt: float
    t_end: float
    boundary: str = "box"
    nonlinear_max_iter: int = 50
    nonlinear_tol: float = 1e-10
    scheme: str = "cn"
    stencil: str = "numerov"
    sample_times: Optional[tuple] = None
    sample_every: int = 1
    edge_fraction: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if not self.t_end >= 0:
            raise ValidationError(f"t_end must be >= 0, got {self.t_end}")
        if self.boundary not in ("box", "damped-edges"):
            raise ValidationError(f"unknown boundary {self.boundary!r}")
        if self.scheme not in ("cn", "cn4"):
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.stencil not in ("numerov", "three-point"):
            raise ValidationError(f"unknown stencil {self.stencil!r}")
        if self.nonlinear_max_iter < 1 or self.nonlinear_tol <= 0:
            raise ValidationError("nonlinear_max_iter must be >= 1 and nonlinear_tol > 0")
        if self.sample_every < 1:
            raise ValidationError("sample_every must be >= 1")
        n = self.t_end / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ValidationError(f"t_end={self.t_end} is not a multiple of dt={self.dt}")
        if self.sample_times is not None:
            object.__setattr__(self, "sample_times", tuple(float(t) for t in self.sample_times))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def stability_ratio(self, params: ModelParams) -> float:
        """dt / (dx^2 m / hbar~); above 1 the explicit limit is exceeded (CN stays stable)."""
        return self.dt * params.hbar_tilde / (self.grid.dx ** 2 * params.mass)

    def sample_steps(self) -> list:
        if self.sample_times is None:
            steps = list(range(0, self.n_steps + 1, self.sample_every))
            if steps[-1] != self.n_steps:
                steps.append(self.n_steps)
            return steps
        steps = []
        for t in self.sample_times:
            k = t / self.dt
            if abs(k - round(k)) > 1e-6 or not 0 <= round(k) <= self.n_steps:
                raise ValidationError(f"sample time {t} is not on the step grid")
            steps.append(int(round(k)))
        return sorted(set(steps))


@dataclass(eq=False)
class Evolution:
    """Sampled output of a solver run plus run diagnostics."""

    fields: list
    max_norm_drift: float = 0.0
    iterations: list = field(default_factory=list)
    floor_hits: int = 0
    config: Optional[SolverConfig] = None
    anchors: list = field(default_factory=list)

    def __len__(self):
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, i):
        return self.fields[i]

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.fields])

    def at(self, t: float, tol: float = 1e-9) -> WaveField:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.fields[i].t - t) > tol:
            raise KeyError(f"no sample at t={t}")
        return self.fields[i]


# --------------------------------------------------------------------------
# tridiagonal Crank-Nicolson step
# --------------------------------------------------------------------------

def _stencil_weights(stencil: str):
    return (10.0 / 12.0, 1.0 / 12.0) if stencil == "numerov" else (1.0, 0.0)


def _cn_bands(psi_size, h, tm, planck, mass, gamma, dx, vx, extra, b0, b1):
    """Bands (dl, d, du) of A = B + i lam (-ck delta2 + B V) for a CN step of length ``h``."""
    lam = h / (2.0 * planck)
    a = lam * planck ** 2 / (2.0 * mass) * math.exp(-gamma * tm) / dx ** 2
    veff = vx * math.exp(gamma * tm) if vx is not None else None
    if extra is not None:
        veff = extra if veff is None else veff + extra
    if veff is None:
        d = np.full(psi_size, b0 + 2j * a)
        dl = np.full(psi_size - 1, b1 - 1j * a)
        return dl, d, dl.copy()
    lv = (1j * lam) * veff
    d = b0 * lv
    d += b0 + 2j * a
    dl = b1 * lv[:-1]
    dl += b1 - 1j * a
    du = b1 * lv[1:]
    du += b1 - 1j * a
    return dl, d, du


def _apply_rhs(psi, dl, d, du, b0, b1):
    # rhs operator is 2B - A
    rhs = (2.0 * b0 - d) * psi
    rhs[1:] += (2.0 * b1 - dl) * psi[:-1]
    rhs[:-1] += (2.0 * b1 - du) * psi[1:]
    return rhs


def _cn_substep(psi, h, tm, planck, mass, gamma, dx, vx, extra, b0, b1):
    """One CN step of length ``h`` for iP dpsi/dt = [-(P^2/2m) e^{-g t} D2 + V e^{g t} + W] psi."""
    dl, d, du = _cn_bands(psi.size, h, tm, planck, mass, gamma, dx, vx, extra, b0, b1)
    rhs = _apply_rhs(psi, dl, d, du, b0, b1)
    _, _, _, x, info = lapack.zgtsv(dl, d, du, rhs, overwrite_dl=1, overwrite_d=1,
                                    overwrite_du=1, overwrite_b=1)
    if info != 0:
        raise NumericalError(f"tridiagonal solve failed (info={info})")
    return x


class _FrozenStep:
    """CN substep with a time-independent operator (no friction, linear equation): factor once."""

    def __init__(self, n, h, planck, mass, dx, vx, b0, b1):
        self.b0, self.b1 = b0, b1
        self.bands = _cn_bands(n, h, 0.0, planck, mass, 0.0, dx, vx, None, b0, b1)
        dl, d, du = (b.copy() for b in self.bands)
        *self.lu, info = lapack.zgttrf(dl, d, du)
        if info != 0:
            raise NumericalError(f"tridiagonal factorization failed (info={info})")

    def __call__(self, psi):
        rhs = _apply_rhs(psi, *self.bands, self.b0, self.b1)
        x, info = lapack.zgttrs(*self.lu, rhs, overwrite_b=1)
        if info != 0:
            raise NumericalError(f"tridiagonal solve failed (info={info})")
        return x


def _substeps(t, dt, scheme):
    if scheme == "cn":
        return [(t, dt)]
    h1, h0 = _TJ_W1 * dt, _TJ_W0 * dt
    return [(t, h1), (t + h1, h0), (t + h1 + h0, h1)]


def _edge_mask(grid: Grid, fraction: float) -> np.ndarray:
    x = grid.x
    L = fraction * (grid.x_max - grid.x_min)
    d = np.minimum(x - grid.x_min, grid.x_max - x)
    mask = np.ones_like(x)
    inside = d < L
    mask[inside] = np.cos(0.5 * np.pi * (L - d[inside]) / L) ** 0.125
    return mask


def _l2(v, dx):
    return math.sqrt(float(np.sum(np.abs(v) ** 2)) * dx)


def _check_initial(config: SolverConfig, initial: WaveField):
    if initial.grid != config.grid:
        raise ValidationError("initial field grid differs from solver grid")
    nrm = initial.norm()
    if abs(nrm - 1.0) > 1e-6:
        raise ValidationError(f"initial field is not normalized (norm={nrm:.8g})")


def _run(config, params, potential, initial, planck, nonlinear_coef):
    validate_params(params, potential)
    _check_initial(config, initial)
    grid = config.grid
    dx = grid.dx
    b0, b1 = _stencil_weights(config.stencil)
    vx = np.asarray(potential.value(grid.x, params.mass), dtype=float)
    if not np.any(vx):
        vx = None
    mask = _edge_mask(grid, config.edge_fraction) if config.boundary == "damped-edges" else None
    steps = config.sample_steps()
    want = set(steps)
    out = []
    t0 = initial.t
    psi = initial.values.astype(complex).copy()
    ref_node = int(np.argmax(np.abs(psi)))
    ref_phase = float(np.angle(psi[ref_node]))
    anchors = []
    if 0 in want:
        out.append(WaveField(grid, psi, t0))
        anchors.append((ref_node, ref_phase))
    norm_prev = float(np.sum(np.abs(psi) ** 2) * dx)
    drift = 0.0
    iters = []
    floor_hits = 0
    frozen = {}
    g, m = params.gamma, params.mass
    for n in range(1, config.n_steps + 1):
        t = t0 + (n - 1) * config.dt
        psi_prev = psi
        for ts, h in _substeps(t, config.dt, config.scheme):
            tm = ts + 0.5 * h
            if nonlinear_coef is None:
                if g == 0.0:
                    if h not in frozen:
                        frozen[h] = _FrozenStep(psi.size, h, planck, m, dx, vx, b0, b1)
                    psi = frozen[h](psi)
                else:
                    psi = _cn_substep(psi, h, tm, planck, m, g, dx, vx, None, b0, b1)
                continue
            coef = nonlinear_coef * math.exp(-g * tm)
            r_old = np.abs(psi)
            guess = psi
            for k in range(1, config.nonlinear_max_iter + 1):
                r_mid = 0.5 * (r_old + np.abs(guess))
                w, hits = _amplitude_curvature(r_mid, dx)
                floor_hits += hits
                new = _cn_substep(psi, h, tm, planck, m, g, dx, vx, coef * w, b0, b1)
                change = _l2(new - guess, dx)
                guess = new
                if change < config.nonlinear_tol:
                    break
            else:
                raise NonlinearDivergence(
                    f"fixed-point iteration did not converge in {config.nonlinear_max_iter} "
                    f"iterations at t={tm:.6g} (last change {change:.3g})")
            iters.append(k)
            psi = guess
        if mask is not None:
            psi = psi * mask
        if not np.all(np.isfinite(psi)):
            raise NonFiniteDetected(f"non-finite values after step {n} (t={t + config.dt:.6g})")
        norm = float(np.sum(np.abs(psi) ** 2) * dx)
        drift = max(drift, abs(norm - norm_prev))
        norm_prev = norm
        ref_node, ref_phase = _track_anchor(psi_prev, psi, ref_node, ref_phase)
        if n in want:
            out.append(WaveField(grid, psi, t0 + n * config.dt))
            anchors.append((ref_node, ref_phase))
    if floor_hits:
        log.info("nonlinear term masked at %d node evaluations below amplitude floor", floor_hits)
    return Evolution(out, drift, iters, floor_hits, config, anchors)


def _track_anchor(prev, new, node, phase):
    """Carry the phase at the amplitude maximum continuously through one step."""
    phase += float(np.angle(new[node] * np.conj(prev[node])))
    j = int(np.argmax(np.abs(new)))
    if j != node:
        lo, hi = sorted((node, j))
        inc = np.angle(new[lo + 1:hi + 1] * np.conj(new[lo:hi]))
        phase += float(np.sum(inc)) if j > node else -float(np.sum(inc))
    return j, phase


def _second_derivative(f, dx):
    """Fourth-order centred second derivative (second order at the two edge nodes)."""
    d2 = np.zeros_like(f)
    c = f[2:-2]
    # difference form: exactly zero on constants
    d2[2:-2] = (16 * ((f[3:-1] - c) + (f[1:-3] - c)) - ((f[4:] - c) + (f[:-4] - c))) / (12 * dx * dx)
    d2[1] = (f[2] - 2 * f[1] + f[0]) / (dx * dx)
    d2[-2] = (f[-1] - 2 * f[-2] + f[-3]) / (dx * dx)
    return d2


def _first_derivative(f, dx):
    """Fourth-order centred first derivative (second order near the edges)."""
    d = np.zeros_like(f)
    d[2:-2] = (8 * (f[3:-1] - f[1:-3]) - (f[4:] - f[:-4])) / (12 * dx)
    d[1] = (f[2] - f[0]) / (2 * dx)
    d[-2] = (f[-1] - f[-3]) / (2 * dx)
    d[0] = (f[1] - f[0]) / dx
    d[-1] = (f[-1] - f[-2]) / dx
    return d


def _amplitude_curvature(r, dx):
    """(d^2 r/dx^2) / r, zero where r is below the amplitude floor."""
    d2 = _second_derivative(r, dx)
    ok = r >= AMPLITUDE_FLOOR
    ok[[0, -1]] = False
    w = np.zeros_like(r)
    w[ok] = d2[ok] / r[ok]
    return w, int(np.count_nonzero(~ok)) - 2


# --------------------------------------------------------------------------
# public solvers
# --------------------------------------------------------------------------

def solve_scaled(config: SolverConfig, params: ModelParams, potential: Potential,
                 initial: WaveField) -> Evolution:
    """Evolve the scaled linear equation (Planck constant ``hbar * sqrt(eps)``)."""
    if params.epsilon == 0:
        raise EpsilonZero("solve_scaled needs epsilon > 0; use the analytic module at epsilon = 0")
    return _run(config, params, potential, initial, params.hbar_tilde, None)


def solve_transition(config: SolverConfig, params: ModelParams, potential: Potential,
                     initial: WaveField) -> Evolution:
    """Evolve the nonlinear transition equation for ``psi_eps`` (Planck constant ``hbar``).

    The term ``(1 - eps) hbar^2/(2m) e^{-gamma t} (d^2|psi|/dx^2)/|psi|`` is
    resolved at each step by fixed-point iteration on a frozen amplitude.
    """
    if params.epsilon < EPSILON_FLOOR:
        raise EpsilonBelowFloor(
            f"solve_transition needs epsilon >= {EPSILON_FLOOR}, got {params.epsilon}")
    coef = (1.0 - params.epsilon) * params.hbar ** 2 / (2.0 * params.mass)
    if coef == 0.0:
        return _run(config, params, potential, initial, params.hbar, None)
    return _run(config, params, potential, initial, params.hbar, coef)


def transition_initial(field: WaveField, params: ModelParams) -> WaveField:
    """Transition-equation state with the same amplitude and action as a scaled field."""
    pol = polar_decompose(field, params)
    return WaveField(field.grid, pol.R * np.exp(1j * pol.S / params.hbar), field.t)


# --------------------------------------------------------------------------
# polar decomposition
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PolarFields:
    """Amplitude R, action S and quantum potential Q of one field."""

    grid: Grid
    t: float
    R: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    planck: float

    @property
    def x(self):
        return self.grid.x


def _unwrap_from_anchor(phase, r, floor, max_jump):
    n = phase.size
    i0 = int(np.argmax(r))
    out = np.empty(n)
    out[i0] = phase[i0]
    inc = np.angle(np.exp(1j * np.diff(phase)))
    above = (r[1:] >= floor) & (r[:-1] >= floor)
    bad = above & (np.abs(inc) > max_jump)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise PhaseUnwrapFailure(f"phase jump {inc[j]:.3f} rad between nodes {j} and {j + 1}")
    out[i0 + 1:] = phase[i0] + np.cumsum(inc[i0:])
    out[:i0] = phase[i0] - np.cumsum(inc[:i0][::-1])[::-1]
    return out


def polar_decompose(field: WaveField, params: ModelParams, amplitude_floor: float = 1e-8,
                    planck: Optional[float] = None, max_jump: float = 0.9 * np.pi) -> PolarFields:
    """R = |psi|, S = planck * (unwrapped arg psi), Q = -(planck^2/2m) R''/R.

    ``planck`` defaults to the scaled constant; pass ``params.hbar`` for
    transition-equation fields. The phase is continued node by node from
    the amplitude maximum; an increment larger than ``max_jump`` between two
    nodes above the floor raises :class:`PhaseUnwrapFailure`.
    """
    P = params.hbar_tilde if planck is None else planck
    psi = field.values
    R = np.abs(psi)
    floor = amplitude_floor * float(np.max(R)) if np.max(R) > 0 else amplitude_floor
    S = P * _unwrap_from_anchor(np.angle(psi), R, floor, max_jump)
    d2 = _second_derivative(R, field.grid.dx)
    Q = np.zeros_like(R)
    ok = R > 0
    Q[ok] = -(P ** 2 / (2 * params.mass)) * d2[ok] / R[ok]
    Q[[0, -1]] = Q[[1, -2]]
    return PolarFields(field.grid, field.t, R, S, Q, P)


def polar_series(fields, params: ModelParams, amplitude_floor: float = 1e-8,
                 planck: Optional[float] = None) -> list:
    """Polar decomposition of a time series with S continuous in time.

    When ``fields`` is an :class:`Evolution`, the phase tracked by the
    solver at every step fixes the 2*pi branch of each sample, so sparse
    sampling is safe. For a plain sequence the branch is chosen by
    unwrapping in time node by node, which needs phase changes below pi
    between samples.
    """
    pols = [polar_decompose(f, params, amplitude_floor, planck) for f in fields]
    if len(pols) < 2:
        return pols
    P = pols[0].planck
    anchors = getattr(fields, "anchors", None)
    if anchors and len(anchors) == len(pols):
        out = []
        for p, (node, ref) in zip(pols, anchors):
            k = np.round((ref - p.S[node] / P) / (2 * np.pi))
            out.append(PolarFields(p.grid, p.t, p.R, p.S + 2 * np.pi * k * P, p.Q, P))
        return out
    phase = np.array([p.S / P for p in pols])
    phase = np.unwrap(phase, axis=0)
    return [PolarFields(p.grid, p.t, p.R, P * ph, p.Q, P) for p, ph in zip(pols, phase)]


def map_transition_to_scaled(field: WaveField, params: ModelParams,
                             polar: Optional[PolarFields] = None) -> WaveField:
    """psi~ = psi_eps exp[(i/hbar)(1/sqrt(eps) - 1) S_eps]."""
    if params.epsilon <= 0:
        raise EpsilonZero("the transition-to-scaled map needs epsilon > 0")
    if polar is None:
        polar = polar_decompose(field, params, planck=params.hbar)
    k = (1.0 / math.sqrt(params.epsilon) - 1.0) / params.hbar
    return WaveField(field.grid, field.values * np.exp(1j * k * polar.S), field.t)


def map_transition_series(fields, params: ModelParams) -> list:
    """Map a time series (preferably a solver :class:`Evolution`) with an action continuous in time."""
    pols = polar_series(fields, params, planck=params.hbar)
    return [map_transition_to_scaled(f, params, p) for f, p in zip(fields, pols)]


# --------------------------------------------------------------------------
# residual diagnostics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualReport:
    """L2 norms over the bulk of the continuity and Hamilton-Jacobi residuals."""

    times: np.ndarray
    continuity: np.ndarray
    hamilton_jacobi: np.ndarray
    classical_hj: np.ndarray

    def max(self) -> dict:
        return {"continuity": float(np.max(self.continuity)),
                "hamilton_jacobi": float(np.max(self.hamilton_jacobi)),
                "classical_hj": float(np.max(self.classical_hj))}


def _time_derivative(stack, dt, i, order):
    if order == 4:
        return (8 * (stack[i + 1] - stack[i - 1]) - (stack[i + 2] - stack[i - 2])) / (12 * dt)
    return (stack[i + 1] - stack[i - 1]) / (2 * dt)


def equation_residuals(polars: Sequence[PolarFields], params: ModelParams, potential: Potential,
                       bulk: float = 1e-3) -> ResidualReport:
    """Residuals of continuity and quantum Hamilton-Jacobi equations.

    Needs at least three equally spaced samples; with five or more, time
    derivatives are fourth order. Norms are taken where R^2 exceeds ``bulk``
    times its maximum.
    """
    if len(polars) < 3:
        raise ValidationError("equation_residuals needs at least 3 time samples")
    ts = np.array([p.t for p in polars])
    dts = np.diff(ts)
    if np.max(np.abs(dts - dts[0])) > 1e-9 * max(1.0, abs(dts[0])):
        raise ValidationError("time samples must be equally spaced")
    dt = dts[0]
    order = 4 if len(polars) >= 5 else 2
    lo = 2 if order == 4 else 1
    grid = polars[0].grid
    dx = grid.dx
    m, g = params.mass, params.gamma
    vx = potential.value(grid.x, m)
    rho = np.array([p.R ** 2 for p in polars])
    S = np.array([p.S for p in polars])
    times, cont, hj, chj = [], [], [], []
    for i in range(lo, len(polars) - lo):
        t = ts[i]
        Sx = _first_derivative(S[i], dx)
        flux = rho[i] * Sx * math.exp(-g * t) / m
        c_res = _time_derivative(rho, dt, i, order) + _first_derivative(flux, dx)
        base = _time_derivative(S, dt, i, order) + Sx ** 2 * math.exp(-g * t) / (2 * m) + vx * math.exp(g * t)
        h_res = base + polars[i].Q * math.exp(-g * t)
        sel = rho[i] > bulk * np.max(rho[i])
        sel[:3] = False
        sel[-3:] = False
        norm = lambda r: math.sqrt(float(np.sum(r[sel] ** 2)) * dx)
        times.append(t)
        cont.append(norm(c_res))
        hj.append(norm(h_res))
        chj.append(norm(base))
    return ResidualReport(np.array(times), np.array(cont), np.array(hj), np.array(chj))


@dataclass(frozen=True)
class ForceCheck:
    """Max |m x'' + m g x' + d/dx(V + e^{-gt} Q)| along each trajectory."""

    max_deviation: float
    per_trajectory: np.ndarray
    times: np.ndarray


def bohmian_force_check(polars: Sequence[PolarFields], params: ModelParams, potential: Potential,
                        times, positions) -> ForceCheck:
    """Evaluate the Bohmian Newton law along trajectories.

    ``times`` (shape ``(nt,)``) and ``positions`` (``(nt, n_traj)``) are
    trajectory samples, equally spaced and containing every polar sample
    time at least two steps from either end. Accelerations use fourth-order
    central differences of the positions.
    """
    times = np.asarray(times, dtype=float)
    X = np.asarray(positions, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    h = times[1] - times[0]
    m, g = params.mass, params.gamma
    devs = []
    used = []
    for p in polars:
        i = int(np.argmin(np.abs(times - p.t)))
        if abs(times[i] - p.t) > 1e-9 * max(1.0, abs(p.t)) or i < 2 or i > len(times) - 3:
            continue
        xd = (-X[i + 2] + 8 * X[i + 1] - 8 * X[i - 1] + X[i - 2]) / (12 * h)
        xdd = (-X[i + 2] + 16 * X[i + 1] - 30 * X[i] + 16 * X[i - 1] - X[i - 2]) / (12 * h * h)
        dQ = _first_derivative(p.Q, p.grid.dx)
        dQx = np.interp(X[i], p.grid.x, dQ)
        dV = potential.gradient(X[i], m)
        devs.append(np.abs(m * xdd + m * g * xd + dV + math.exp(-2 * g * p.t) * dQx))
        used.append(p.t)
    if not devs:
        raise ValidationError("no polar sample time lies inside the trajectory sampling")
    D = np.array(devs)
    return ForceCheck(float(np.max(D)), np.max(D, axis=0), np.array(used))


# --------------------------------------------------------------------------
# closed-form polar fields (for residuals at any epsilon, including 0)
# --------------------------------------------------------------------------

def analytic_polar_fields(potential: Potential, gaussian, params: ModelParams,
                          grid: Grid, t: float) -> PolarFields:
    """Polar fields of the closed-form packet, valid also at epsilon = 0.

    S is the action whose gradient gives the scaled velocity field:
    ``S = m e^{gt} [slope (x-x_t)^2 / 2] + p_t e^{gt} (x - x_t) + A_t``.
    At epsilon = 0 the width-dependent phase of the prefactor is absent.
    """
    from . import analytic as an

    x = grid.x
    path = an.classical_path(potential, gaussian, params, t)
    slope = float(an.velocity_slope(potential, gaussian, params, t))
    sig = float(an.complex_width(potential, gaussian, params, t).sigma)
    xt, pt, act = float(path.x), float(path.p), float(path.action)
    E = math.exp(params.gamma * t)
    R = (2 * math.pi * sig * sig) ** -0.25 * np.exp(-(x - xt) ** 2 / (4 * sig * sig))
    S = params.mass * E * slope * (x - xt) ** 2 / 2 + pt * E * (x - xt) + act
    if params.hbar_tilde > 0:
        # Gaussian prefactor phase: -(1/2) arg s_t, times hbar~
        if isinstance(potential, Harmonic):
            arg = float(an._continuous_arg_harmonic(potential, gaussian, params, t))
        else:
            arg = float(np.angle(an.complex_width(potential, gaussian, params, t).s))
        S = S - 0.5 * params.hbar_tilde * arg
    Q = np.asarray(an.quantum_potential(potential, gaussian, params, x, t), dtype=float)
    return PolarFields(grid, float(t), R, S, Q, params.hbar_tilde)


# --------------------------------------------------------------------------
# binary snapshot dump
# --------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"CKWFSNAP"
SNAPSHOT_VERSION = 1


def write_snapshots(path, fields: Sequence[WaveField], params: Optional[ModelParams] = None,
                    extra: Optional[dict] = None) -> Path:
    """Write a field sequence in the documented binary layout.

    Layout (all little-endian):
      8 bytes  magic ``CKWFSNAP``
      uint32   format version (1)
      uint32   header length H in bytes
      H bytes  UTF-8 JSON header: grid, params, times, n_times, n_points, dtype
      data     n_times * n_points complex64 values (float32 re, float32 im),
               time-major
    """
    fields = list(fields)
    if not fields:
        raise ValidationError("no fields to write")
    grid = fields[0].grid
    if any(f.grid != grid for f in fields):
        raise ValidationError("all snapshots must share one grid")
    header = {
        "grid": grid.to_dict(),
        "params": params.to_dict() if params is not None else None,
        "times": [f.t for f in fields],
        "n_times": len(fields),
        "n_points": grid.n_points,
        "dtype": "<c8",
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header).encode("utf-8")
    data = np.stack([f.values for f in fields]).astype("<c8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(data.tobytes())
    return path


def read_snapshots(path):
    """Read a file written by :func:`write_snapshots`; returns ``(header, fields)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != SNAPSHOT_MAGIC:
        raise ValidationError("not a CK snapshot file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != SNAPSHOT_VERSION:
        raise ValidationError(f"unsupported snapshot version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    grid = Grid.from_dict(header["grid"])
    data = np.frombuffer(raw[16 + hlen:], dtype="<c8")
    data = data.reshape(header["n_times"], header["n_points"])
    fields = [WaveField(grid, row.astype(complex), t) for row, t in zip(data, header["times"])]
    return header, fields
