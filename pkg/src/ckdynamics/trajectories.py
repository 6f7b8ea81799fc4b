"""Scaled trajectory ensembles: Born-rule seeding, guidance integration and checks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import norm

from . import analytic as an
from .core import (
    CKError,
    GaussianSpec,
    Harmonic,
    ModelParams,
    NumericalError,
    Potential,
    ValidationError,
    WaveField,
    validate_params,
)

SEEDINGS = ("quantiles", "offsets", "random")


class LeftDomain(NumericalError):
    """A trajectory left the grid of a sampled velocity field."""


class SingularVelocityField(NumericalError):
    """The velocity field is not finite along a trajectory (e.g. a classical focal point)."""


class Undetermined(CKError):
    """No crossing by the end of the sampling, and arrival cannot be ruled out."""


@dataclass(frozen=True)
class EnsembleSpec:
    """How initial positions are drawn.

    ``quantiles`` maps equispaced quantiles through the inverse Gaussian
    CDF, ``offsets`` places particles at ``x0 + k sigma0`` for each ``k`` in
    ``offsets``, ``random`` samples the density with ``rng_seed``.
    """

    n_particles: int = 7
    seeding: str = "quantiles"
    offsets: Optional[tuple] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.seeding not in SEEDINGS:
            raise ValidationError(f"seeding must be one of {SEEDINGS}, got {self.seeding!r}")
        if self.seeding == "offsets":
            if not self.offsets:
                raise ValidationError("offsets seeding needs a non-empty offsets list")
            object.__setattr__(self, "offsets", tuple(float(k) for k in self.offsets))
            object.__setattr__(self, "n_particles", len(self.offsets))
        if self.n_particles < 1:
            raise ValidationError("n_particles must be >= 1")

    def to_dict(self) -> dict:
        d = {"n_particles": self.n_particles, "seeding": self.seeding, "rng_seed": self.rng_seed}
        if self.offsets is not None:
            d["offsets"] = list(self.offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        unknown = set(d) - {"n_particles", "seeding", "offsets", "rng_seed"}
        if unknown:
            raise ValidationError(f"unknown ensemble keys: {sorted(unknown)}")
        offs = d.get("offsets")
        return cls(int(d.get("n_particles", len(offs) if offs else 7)), d.get("seeding", "quantiles"),
                   tuple(offs) if offs is not None else None, int(d.get("rng_seed", 0)))


def seed_ensemble(spec: EnsembleSpec, gaussian: GaussianSpec):
    """Initial positions (ascending for quantile and random modes) and Born weights."""
    x0, s0 = gaussian.x0, gaussian.sigma0
    n = spec.n_particles
    if spec.seeding == "quantiles":
        u = (np.arange(n) + 0.5) / n
        x = norm.ppf(u, loc=x0, scale=s0)
        # exact symmetry about x0
        x = x0 + 0.5 * ((x - x0) - (x[::-1] - x0))
        return x, np.full(n, 1.0 / n)
    if spec.seeding == "random":
        rng = np.random.default_rng(spec.rng_seed)
        return np.sort(rng.normal(x0, s0, n)), np.full(n, 1.0 / n)
    x = x0 + s0 * np.asarray(spec.offsets, dtype=float)
    if n == 1:
        return x, np.ones(1)
    order = np.argsort(x)
    spacing = np.empty(n)
    spacing[order] = np.gradient(x[order])
    w = gaussian.density(x) * spacing
    return x, w / np.sum(w)


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Positions ``x[k, i]`` and velocities ``v[k, i]`` at times ``t[k]``."""

    x_init: np.ndarray
    weights: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.x.shape != (self.t.size, self.x_init.size) or self.v.shape != self.x.shape:
            raise ValidationError("trajectory arrays have inconsistent shapes")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-10:
            raise ValidationError("ensemble weights must sum to 1")

    @property
    def n_particles(self) -> int:
        return self.x_init.size

    @property
    def initial_order(self) -> np.ndarray:
        return np.argsort(self.x_init, kind="stable")

    def at(self, t: float, tol: float = 1e-9):
        k = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[k] - t) > tol:
            raise KeyError(f"no sample at t={t}")
        return self.x[k], self.v[k]


# --------------------------------------------------------------------------
# velocity sources
# --------------------------------------------------------------------------

class AnalyticVelocity:
    """Closed-form scaled velocity field of a Gaussian packet."""

    domain = None
    dx = None

    def __init__(self, potential: Potential, gaussian: GaussianSpec, params: ModelParams):
        validate_params(params, potential)
        self.potential, self.gaussian, self.params = potential, gaussian, params
        self._cache = (None, None)

    def _coeffs(self, t):
        if self._cache[0] != t:
            path = an.classical_path(self.potential, self.gaussian, self.params, t)
            slope = float(an.velocity_slope(self.potential, self.gaussian, self.params, t))
            self._cache = (t, (float(path.x), float(path.p) / self.params.mass, slope))
        return self._cache[1]

    def check_times(self, t_grid):
        """Raise if the dressing factor vanishes on the window (velocity pole)."""
        D = np.atleast_1d(an.dressing_factor(self.potential, self.gaussian, self.params,
                                             np.asarray(t_grid, dtype=float)))
        if np.any(D == 0) or np.any(np.diff(np.sign(D)) != 0):
            k = int(np.flatnonzero((D[:-1] * D[1:]) <= 0)[0])
            raise SingularVelocityField(
                f"velocity field has a pole between t={t_grid[k]:.6g} and t={t_grid[k + 1]:.6g}")

    def __call__(self, x, t):
        xt, u, slope = self._coeffs(t)
        if not math.isfinite(slope):
            raise SingularVelocityField(f"velocity slope is not finite at t={t:.6g}")
        return slope * (np.asarray(x, dtype=float) - xt) + u


class FieldVelocity:
    """Velocity field read off a sequence of sampled wavefunctions.

    ``v = e^{-gamma t} planck Im(conj(psi) dpsi/dx) / (m |psi|^2)``, linear
    interpolation in x and four-point (cubic) Lagrange interpolation in t.
    ``planck`` defaults to the scaled constant; use ``params.hbar`` for
    transition-equation fields, whose action equals the scaled one.
    """

    def __init__(self, fields: Sequence[WaveField], params: ModelParams,
                 planck: Optional[float] = None, amplitude_floor: float = 1e-300):
        fields = list(fields)
        if len(fields) < 4:
            raise ValidationError("a field velocity source needs at least 4 time samples")
        grid = fields[0].grid
        P = params.hbar_tilde if planck is None else planck
        self.grid = grid
        self.times = np.array([f.t for f in fields])
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("field samples must be strictly increasing in time")
        V = np.empty((len(fields), grid.n_points))
        for k, f in enumerate(fields):
            psi = f.values
            dpsi = _d1(psi, grid.dx)
            rho = np.maximum(np.abs(psi) ** 2, amplitude_floor)
            V[k] = P * np.imag(np.conj(psi) * dpsi) / rho * math.exp(-params.gamma * f.t) / params.mass
        self.values = V
        self.domain = (grid.x_min, grid.x_max)
        self.dx = grid.dx

    def __call__(self, x, t):
        ts = self.times
        if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
            raise LeftDomain(f"t={t} outside the sampled field times [{ts[0]}, {ts[-1]}]")
        i = int(np.clip(np.searchsorted(ts, t) - 2, 0, ts.size - 4))
        nodes = ts[i:i + 4]
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for a in range(4):
            w = 1.0
            for b in range(4):
                if a != b:
                    w *= (t - nodes[b]) / (nodes[a] - nodes[b])
            out += w * np.interp(x, self.grid.x, self.values[i + a])
        return out


def _d1(f, dx):
    d = np.empty_like(f)
    d[2:-2] = (8 * (f[3:-1] - f[1:-3]) - (f[4:] - f[:-4])) / (12 * dx)
    d[1] = (f[2] - f[0]) / (2 * dx)
    d[-2] = (f[-1] - f[-3]) / (2 * dx)
    d[0] = (f[1] - f[0]) / dx
    d[-1] = (f[-1] - f[-2]) / dx
    return d


# --------------------------------------------------------------------------
# integration
# --------------------------------------------------------------------------

def _check_domain(source, x, t):
    if source.domain is not None:
        lo, hi = source.domain
        if np.any(x < lo) or np.any(x > hi):
            raise LeftDomain(f"a trajectory left [{lo}, {hi}] at t={t:.6g}")
    if not np.all(np.isfinite(x)):
        raise SingularVelocityField(f"non-finite position at t={t:.6g}")


def integrate_guidance(source: Callable, x_init, t_grid, weights=None,
                       max_step: Optional[float] = None, slope_limit: float = 0.5) -> TrajectoryEnsemble:
    """Integrate dx/dt = v(x, t) with classical RK4, vectorized over particles.

    Each output interval is split into substeps so that ``|v| h`` stays
    below half the field spacing (field sources), ``h |dv/dx|`` stays below
    ``slope_limit``, and ``h <= max_step``.
    """
    x = np.array(x_init, dtype=float).ravel()
    ts = np.asarray(t_grid, dtype=float)
    if ts.ndim != 1 or ts.size < 1 or np.any(np.diff(ts) <= 0):
        raise ValidationError("t_grid must be strictly increasing")
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, dtype=float)
    if hasattr(source, "check_times"):
        source.check_times(ts)
    X = np.empty((ts.size, x.size))
    Vv = np.empty_like(X)
    _check_domain(source, x, ts[0])
    X[0] = x
    Vv[0] = source(x, ts[0])
    for k in range(ts.size - 1):
        t, h = ts[k], ts[k + 1] - ts[k]
        n = 1
        if max_step:
            n = max(n, math.ceil(h / max_step - 1e-12))
        v0 = Vv[k]
        if not np.all(np.isfinite(v0)):
            raise SingularVelocityField(f"non-finite velocity at t={t:.6g}")
        if source.dx:
            n = max(n, math.ceil(float(np.max(np.abs(v0))) * h / (0.5 * source.dx)))
        if slope_limit:
            d = 1e-4 * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
            try:
                sl = np.abs(source(x + d, t) - source(x - d, t)) / (2 * d)
            except LeftDomain:
                sl = np.zeros_like(x)
            n = max(n, math.ceil(h * float(np.max(sl)) / slope_limit))
        hs = h / n
        for j in range(n):
            tj = t + j * hs
            k1 = source(x, tj)
            k2 = source(x + 0.5 * hs * k1, tj + 0.5 * hs)
            k3 = source(x + 0.5 * hs * k2, tj + 0.5 * hs)
            k4 = source(x + hs * k3, tj + hs)
            x = x + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            _check_domain(source, x, tj + hs)
        X[k + 1] = x
        Vv[k + 1] = source(x, ts[k + 1])
    return TrajectoryEnsemble(np.array(x_init, dtype=float).ravel(), w, ts, X, Vv)


def integrate_newton(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
                     x_init, t_grid, weights=None, max_step: float = 1e-2) -> TrajectoryEnsemble:
    """Integrate m x'' + m gamma x' + dV/dx + e^{-gamma t} dQ/dx = 0 with RK4.

    The initial velocity comes from the guidance law at t = t_grid[0]. This
    second-order form stays regular where the first-order velocity field
    is singular (focal points of the classical oscillator).
    """
    validate_params(params, potential)
    m, g = params.mass, params.gamma
    ts = np.asarray(t_grid, dtype=float)
    x = np.array(x_init, dtype=float).ravel()
    v = np.asarray(an.velocity_field(potential, gaussian, params, x, ts[0]), dtype=float)
    quantum = params.hbar_tilde > 0

    def acc(xx, vv, tt):
        a = -g * vv - potential.gradient(xx, m) / m
        if quantum:
            a = a + math.exp(-2 * g * tt) * an.quantum_force(potential, gaussian, params, xx, tt) / m
        return a

    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, dtype=float)
    X = np.empty((ts.size, x.size))
    Vv = np.empty_like(X)
    X[0], Vv[0] = x, v
    for k in range(ts.size - 1):
        t, h = ts[k], ts[k + 1] - ts[k]
        n = max(1, math.ceil(h / max_step - 1e-12))
        hs = h / n
        for j in range(n):
            tj = t + j * hs
            a1 = acc(x, v, tj)
            x2, v2 = x + 0.5 * hs * v, v + 0.5 * hs * a1
            a2 = acc(x2, v2, tj + 0.5 * hs)
            x3, v3 = x + 0.5 * hs * v2, v + 0.5 * hs * a2
            a3 = acc(x3, v3, tj + 0.5 * hs)
            x4, v4 = x + hs * v3, v + hs * a3
            a4 = acc(x4, v4, tj + hs)
            x = x + hs / 6 * (v + 2 * v2 + 2 * v3 + v4)
            v = v + hs / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise SingularVelocityField(f"non-finite state at t={ts[k + 1]:.6g}")
        X[k + 1], Vv[k + 1] = x, v
    return TrajectoryEnsemble(np.array(x_init, dtype=float).ravel(), w, ts, X, Vv)


def closed_form_ensemble(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
                         x_init, t_grid, weights=None) -> TrajectoryEnsemble:
    """Ensemble evaluated from the dressing decomposition (no integration)."""
    x_init = np.array(x_init, dtype=float).ravel()
    ts = np.asarray(t_grid, dtype=float)
    path = an.classical_path(potential, gaussian, params, ts)
    D = np.atleast_1d(an.dressing_factor(potential, gaussian, params, ts))
    dD = np.atleast_1d(an.dressing_rate(potential, gaussian, params, ts))
    d = x_init - gaussian.x0
    X = np.atleast_1d(path.x)[:, None] + d[None, :] * D[:, None]
    V = np.atleast_1d(path.p)[:, None] / params.mass + d[None, :] * dD[:, None]
    w = np.full(x_init.size, 1.0 / x_init.size) if weights is None else np.asarray(weights, dtype=float)
    return TrajectoryEnsemble(x_init, w, ts, X, V)


# --------------------------------------------------------------------------
# structural checks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NonCrossingReport:
    ordered: bool
    min_gap: float
    min_gap_time: float
    first_violation_time: Optional[float]

    def to_dict(self) -> dict:
        return {"ordered": self.ordered, "min_gap": self.min_gap,
                "min_gap_time": self.min_gap_time, "first_violation_time": self.first_violation_time}


def neighbour_gaps(ensemble: TrajectoryEnsemble) -> np.ndarray:
    """Gaps between neighbours in initial order, shape ``(nt, n - 1)``."""
    Xs = ensemble.x[:, ensemble.initial_order]
    return np.diff(Xs, axis=1)


def check_noncrossing(ensemble: TrajectoryEnsemble) -> NonCrossingReport:
    """Check that the initial ordering is preserved at every sampled time."""
    if ensemble.n_particles < 2:
        raise ValidationError("non-crossing needs at least 2 trajectories")
    gaps = neighbour_gaps(ensemble)
    per_t = np.min(gaps, axis=1)
    k = int(np.argmin(per_t))
    bad = np.flatnonzero(per_t <= 0)
    first = float(ensemble.t[bad[0]]) if bad.size else None
    return NonCrossingReport(bad.size == 0, float(per_t[k]), float(ensemble.t[k]), first)


def first_crossing_time(t, x, X: float, asymptote: Optional[float] = None, v=None):
    """First time a sampled trajectory reaches the detector at ``X``.

    Interpolates between the bracketing samples: cubic Hermite when the
    velocities ``v`` are given, linear otherwise. If the samples never
    reach ``X``, returns None when ``asymptote`` (the t -> infinity
    position) lies on the starting side of ``X``, and raises
    :class:`Undetermined` otherwise.
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(x, dtype=float) - X
    if f[0] == 0:
        return float(t[0])
    side = np.sign(f[0])
    hit = np.flatnonzero(np.sign(f[1:]) != side)
    if hit.size:
        k = int(hit[0])
        f0, f1 = f[k], f[k + 1]
        t0, h = t[k], t[k + 1] - t[k]
        lin = float(t0 + h * f0 / (f0 - f1))
        if v is None or f1 == 0:
            return lin if f1 != 0 else float(t[k + 1])
        d0, d1 = h * v[k], h * v[k + 1]

        def herm(s):
            return ((2 * s ** 3 - 3 * s ** 2 + 1) * f0 + (s ** 3 - 2 * s ** 2 + s) * d0
                    + (-2 * s ** 3 + 3 * s ** 2) * f1 + (s ** 3 - s ** 2) * d1)

        if herm(0.0) * herm(1.0) > 0:
            return lin
        return float(t0 + h * optimize.brentq(herm, 0.0, 1.0, xtol=1e-15))
    if asymptote is not None and np.sign(asymptote - X) != -side:
        return None
    raise Undetermined(f"detector X={X} not reached by t={t[-1]:.6g} and arrival is not excluded")


def crossing_times(ensemble: TrajectoryEnsemble, X: float, asymptotes=None,
                   hermite: bool = True) -> np.ndarray:
    """First-crossing times of every trajectory; NaN for particles that never arrive."""
    out = np.empty(ensemble.n_particles)
    for i in range(ensemble.n_particles):
        asym = None if asymptotes is None else float(np.asarray(asymptotes)[i])
        v = ensemble.v[:, i] if hermite else None
        T = first_crossing_time(ensemble.t, ensemble.x[:, i], X, asym, v)
        out[i] = np.nan if T is None else T
    return out


def critical_friction(gaussian: GaussianSpec, params: ModelParams, x_init: float, X: float,
                      bracket=(1e-8, 10.0), xtol: float = 1e-12) -> float:
    """Largest gamma for which the free trajectory from ``x_init`` still reaches ``X``.

    Bisection on the sign of ``x(x_init, infinity) - X``.
    """
    def gap(g):
        return float(an.localization_point(gaussian, params.replace(gamma=g), x_init)) - X

    lo, hi = bracket
    if gap(lo) * gap(hi) > 0:
        raise ValidationError(f"reachability does not change sign on gamma in {bracket}")
    return float(optimize.bisect(gap, lo, hi, xtol=xtol))


def classical_arrival_time(gaussian: GaussianSpec, params: ModelParams, x_init, X: float):
    """Closed-form classical free arrival time; NaN where the detector is never reached."""
    m, g, p0 = params.mass, params.gamma, gaussian.p0
    x_init = np.asarray(x_init, dtype=float)
    if g == 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            T = m * (X - x_init) / p0
        return np.where(T >= 0, T, np.nan)
    arg = 1 - g * m * (X - x_init) / p0
    with np.errstate(divide="ignore", invalid="ignore"):
        T = -np.log(arg) / g
    return np.where((arg > 0) & (T >= 0), T, np.nan)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def write_trajectory_csv(path, ensemble: TrajectoryEnsemble, header: Optional[dict] = None,
                         digits: int = 12) -> Path:
    """CSV with columns t, x_0..x_{n-1}, v_0..v_{n-1} and '#' metadata lines."""
    path = Path(path)
    n = ensemble.n_particles
    cols = ["t"] + [f"x_{i}" for i in range(n)] + [f"v_{i}" for i in range(n)]
    meta = dict(header or {})
    meta["x_init"] = ensemble.x_init.tolist()
    meta["weights"] = ensemble.weights.tolist()
    data = np.column_stack([ensemble.t, ensemble.x, ensemble.v])
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt=f"%.{digits - 1}e")
    return path


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`; returns ``(meta, ensemble)``."""
    with open(path) as fh:
        first = fh.readline()
    meta = json.loads(first[1:]) if first.startswith("#") else {}
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=2, ndmin=2)
    n = (data.shape[1] - 1) // 2
    w = np.asarray(meta.get("weights", np.full(n, 1.0 / n)))
    ens = TrajectoryEnsemble(np.asarray(meta.get("x_init", data[0, 1:1 + n])), w,
                             data[:, 0], data[:, 1:1 + n], data[:, 1 + n:])
    return meta, ens
