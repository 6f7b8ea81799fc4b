"""Arrival-time and actual-momentum statistics by the current route and the trajectory route."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from . import analytic as an
from .core import CKError, Free, GaussianSpec, Linear, ModelParams, Potential, ValidationError, validate_params
from .trajectories import TrajectoryEnsemble, crossing_times

MODES = ("all-arrive", "renormalized")
ALL_ARRIVE_TOL = 1e-6


class ZeroFlux(CKError):
    """No probability flux reaches the detector."""


class ZeroArrivals(CKError):
    """No trajectory of the ensemble reaches the detector."""


class IncompleteArrival(CKError):
    """All-arrive mode was requested but part of the ensemble never arrives."""


@dataclass(frozen=True, eq=False)
class ArrivalDistribution:
    """Normalized arrival-time density at detector ``X``.

    ``normalization`` is the arriving fraction before renormalization
    (the flux integral, or the summed weights of arriving trajectories).
    For the trajectory route ``t`` holds bin centres and ``edges`` the bin
    edges.
    """

    X: float
    t: np.ndarray
    density: np.ndarray
    normalization: float
    mode: str
    mean: float
    variance: float
    route: str
    edges: Optional[np.ndarray] = None

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))

    def peak(self) -> float:
        return float(self.t[int(np.argmax(self.density))])

    def fwhm(self) -> float:
        """Full width at half maximum from the sampled density (linear interpolation)."""
        d, t = self.density, self.t
        k = int(np.argmax(d))
        half = 0.5 * d[k]
        left = np.flatnonzero(d[:k] < half)
        right = np.flatnonzero(d[k:] < half)
        if not left.size or not right.size:
            return float("nan")
        i = left[-1]
        tl = t[i] + (half - d[i]) * (t[i + 1] - t[i]) / (d[i + 1] - d[i])
        j = k + right[0]
        tr_ = t[j - 1] + (half - d[j - 1]) * (t[j] - t[j - 1]) / (d[j] - d[j - 1])
        return float(tr_ - tl)


@dataclass(frozen=True, eq=False)
class MomentumDistribution:
    """Actual-momentum distribution: ``gaussian`` (center, width), ``delta`` or ``histogram``."""

    kind: str
    t: float
    center: float
    width: float = 0.0
    edges: Optional[np.ndarray] = None
    masses: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "delta", "histogram"):
            raise ValidationError(f"unknown momentum distribution kind {self.kind!r}")
        if self.width < 0:
            raise ValidationError("width must be >= 0")
        if self.masses is not None and abs(float(np.sum(self.masses)) - 1.0) > 1e-10:
            raise ValidationError("histogram masses must sum to 1")

    @property
    def mean(self) -> float:
        return self.center

    @property
    def std(self) -> float:
        return self.width

    def pdf(self, p):
        if self.kind != "gaussian":
            raise ValidationError(f"a {self.kind} distribution has no density function")
        p = np.asarray(p, dtype=float)
        return np.exp(-(p - self.center) ** 2 / (2 * self.width ** 2)) / math.sqrt(2 * math.pi * self.width ** 2)


# --------------------------------------------------------------------------
# current route
# --------------------------------------------------------------------------

def _flux_vec(potential, gaussian, params, X, t):
    """Vectorized |j(X, t)| over an array of times."""
    t = np.asarray(t, dtype=float)
    # the action overflows at very large gamma t; the flux does not use it
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        path = an.classical_path(potential, gaussian, params, t)
        sig = an.complex_width(potential, gaussian, params, t).sigma
        slope = an.velocity_slope(potential, gaussian, params, t)
        rho = np.exp(-(X - path.x) ** 2 / (2 * sig ** 2)) / np.sqrt(2 * np.pi * sig ** 2)
        j = rho * (slope * (X - path.x) + path.p / params.mass)
    return np.abs(np.nan_to_num(j, nan=0.0, posinf=0.0, neginf=0.0))


def _horizon(fun, window, max_time, rel=1e-14, quiet=3, samples=16, chunk=64):
    """End of the flux support: 3 consecutive windows below rel * running max."""
    peak = 0.0
    below = 0
    t0 = 0.0
    while t0 < max_time:
        ts = t0 + window * np.arange(chunk * samples + 1) / samples
        f = fun(ts)
        for w in range(chunk):
            m = float(np.max(f[w * samples:(w + 1) * samples + 1]))
            peak = max(peak, m)
            if peak > 0 and m < rel * peak:
                below += 1
                if below >= quiet:
                    return t0 + (w + 1) * window, peak
            else:
                below = 0
        t0 += chunk * window
    return max_time, peak


_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


def _gauss_panels(fun, a, b, rtol=1e-12, panels=64, max_panels=2 ** 16):
    """Composite 20-point Gauss-Legendre, doubling panels until two estimates agree.

    Returns the nodes and the weighted integrand values so moments can be
    formed without re-evaluating ``fun``.
    """
    prev = None
    while True:
        e = np.linspace(a, b, panels + 1)
        h = 0.5 * (e[1:] - e[:-1])
        c = 0.5 * (e[1:] + e[:-1])
        x = (c[:, None] + h[:, None] * _GL_X[None, :]).ravel()
        wf = (h[:, None] * _GL_W[None, :]).ravel() * fun(x)
        est = float(np.sum(wf))
        if prev is not None and abs(est - prev) <= rtol * max(abs(est), 1e-300):
            return x, wf
        if panels >= max_panels:
            return x, wf
        prev = est
        panels *= 2


def arrival_distribution_current(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
                                 X: float, t_grid=None, mode: str = "renormalized",
                                 window: float = 0.25, max_time: float = 1e4,
                                 n_samples: int = 2001) -> ArrivalDistribution:
    """Arrival density ``|j(X,t)| / int |j(X,t')| dt'`` from the closed-form current.

    The integration horizon ends once ``|j|`` stays below 1e-14 of its
    maximum for three consecutive windows; the integrals use composite
    Gauss-Legendre panels refined until successive estimates agree to 1e-12. ``mode="all-arrive"`` raises
    :class:`IncompleteArrival` when the flux integral falls short of one.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    validate_params(params, potential)
    fun = lambda t: _flux_vec(potential, gaussian, params, X, t)
    T, peak = _horizon(fun, window, max_time)
    if peak == 0.0:
        raise ZeroFlux(f"no flux through X={X}")
    nodes, f = _gauss_panels(fun, 0.0, T)
    norm = float(np.sum(f))
    if norm < 1e-12:
        raise ZeroFlux(f"flux integral {norm:.3g} through X={X} is below 1e-12")
    if mode == "all-arrive" and norm < 1 - ALL_ARRIVE_TOL:
        raise IncompleteArrival(f"only {norm:.6g} of the ensemble reaches X={X}")
    mean = float(np.sum(nodes * f)) / norm
    var = float(np.sum((nodes - mean) ** 2 * f)) / norm
    if t_grid is None:
        t_grid = np.linspace(0.0, T, n_samples)
    t_grid = np.asarray(t_grid, dtype=float)
    return ArrivalDistribution(float(X), t_grid, fun(t_grid) / norm, float(norm), mode,
                               float(mean), float(var), "current")


def peak_time(potential: Potential, gaussian: GaussianSpec, params: ModelParams, X: float,
              dist: Optional[ArrivalDistribution] = None) -> float:
    """Refined location of the maximum of ``|j(X, t)|``."""
    if dist is None:
        dist = arrival_distribution_current(potential, gaussian, params, X)
    k = int(np.argmax(dist.density))
    lo = dist.t[max(k - 1, 0)]
    hi = dist.t[min(k + 1, dist.t.size - 1)]
    if hi <= lo:
        return float(dist.t[k])
    res = optimize.minimize_scalar(lambda t: -float(_flux_vec(potential, gaussian, params, X, np.array([t]))[0]),
                                   bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
    return float(res.x)


# --------------------------------------------------------------------------
# trajectory route
# --------------------------------------------------------------------------

def _weighted_quantile(x, w, q):
    o = np.argsort(x)
    x, w = x[o], w[o]
    c = np.cumsum(w) - 0.5 * w
    c /= np.sum(w)
    return np.interp(q, c, x)


def fd_bin_edges(x, w=None, max_bins: int = 10000):
    """Freedman-Diaconis bin edges (weighted quantiles when ``w`` is given)."""
    x = np.asarray(x, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        pad = 1e-12 * max(1.0, abs(lo))
        return np.array([lo - pad, hi + pad])
    iqr = float(_weighted_quantile(x, w, 0.75) - _weighted_quantile(x, w, 0.25))
    n_eff = float(np.sum(w)) ** 2 / float(np.sum(w ** 2))
    h = 2 * iqr * n_eff ** (-1 / 3)
    nb = 1 if h <= 0 else int(min(max_bins, max(1, math.ceil((hi - lo) / h))))
    return np.linspace(lo, hi, nb + 1)


def arrival_distribution_trajectories(ensemble: TrajectoryEnsemble, X: float, mode: str = "renormalized",
                                      bins=None, asymptotes=None) -> ArrivalDistribution:
    """Weighted histogram and mean of first-crossing times."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    T = crossing_times(ensemble, X, asymptotes)
    ok = np.isfinite(T)
    if not np.any(ok):
        raise ZeroArrivals(f"no trajectory reaches X={X}")
    w = ensemble.weights[ok]
    frac = float(np.sum(w))
    if mode == "all-arrive" and frac < 1 - ALL_ARRIVE_TOL:
        raise IncompleteArrival(f"only {frac:.6g} of the ensemble weight reaches X={X}")
    Ta = T[ok]
    wn = w / frac
    mean = float(np.sum(wn * Ta))
    var = float(np.sum(wn * (Ta - mean) ** 2))
    edges = fd_bin_edges(Ta, wn) if bins is None else np.histogram_bin_edges(Ta, bins=bins)
    dens, edges = np.histogram(Ta, bins=edges, weights=wn, density=True)
    centres = 0.5 * (edges[1:] + edges[:-1])
    return ArrivalDistribution(float(X), centres, dens, frac, mode, mean, var, "trajectories", edges)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SweepTable:
    """Mean arrival times ``tau[(eps, a)][k]`` on ``gamma[k]``; NaN marks unreachable cells."""

    gamma: np.ndarray
    tau: dict
    fraction: dict
    mode: str
    X: float
    failures: dict = field(default_factory=dict)

    def nondecreasing_in_gamma(self) -> dict:
        out = {}
        for key, col in self.tau.items():
            c = col[np.isfinite(col)]
            out[key] = bool(np.all(np.diff(c) >= 0))
        return out


def potential_for(a: float) -> Potential:
    return Free() if a == 0 else Linear(float(a))


def _sweep_cell(args):
    gaussian, params, a, X, mode = args
    try:
        d = arrival_distribution_current(potential_for(a), gaussian, params, X, mode=mode, n_samples=2)
        return d.mean, d.normalization, None
    except (ZeroFlux, IncompleteArrival) as exc:
        return float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"


def mean_arrival_sweep(gaussian: GaussianSpec, params_base: ModelParams, gamma_grid: Sequence[float],
                       epsilon_set: Sequence[float], a_set: Sequence[float], X: float = 0.0,
                       mode: str = "renormalized", jobs: int = 1) -> SweepTable:
    """Current-route mean arrival time over a (gamma, epsilon, a) grid."""
    gamma = np.asarray(gamma_grid, dtype=float)
    cells = [(e, a, g) for e in epsilon_set for a in a_set for g in gamma]
    args = [(gaussian, params_base.replace(gamma=float(g), epsilon=float(e)), a, X, mode) for e, a, g in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            res = list(ex.map(_sweep_cell, args))
    else:
        res = [_sweep_cell(x) for x in args]
    tau, frac, fails = {}, {}, {}
    for (e, a, g), (m, f, err) in zip(cells, res):
        key = (float(e), float(a))
        tau.setdefault(key, []).append(m)
        frac.setdefault(key, []).append(f)
        if err:
            fails[(float(e), float(a), float(g))] = err
    tau = {k: np.array(v) for k, v in tau.items()}
    frac = {k: np.array(v) for k, v in frac.items()}
    return SweepTable(gamma, tau, frac, mode, float(X), fails)


# --------------------------------------------------------------------------
# momentum
# --------------------------------------------------------------------------

def momentum_distribution(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
                          t: float) -> MomentumDistribution:
    """Gaussian (p_t, Sigma_t) for epsilon > 0, or an exact delta when the width vanishes."""
    validate_params(params, potential)
    pt = float(an.classical_path(potential, gaussian, params, t).p)
    Sigma = float(an.sigma_momentum(potential, gaussian, params, t).Sigma)
    if params.epsilon == 0 or Sigma == 0.0:
        return MomentumDistribution("delta", float(t), pt)
    return MomentumDistribution("gaussian", float(t), pt, Sigma)


def momentum_histogram_from_ensemble(ensemble: TrajectoryEnsemble, t: float, bins=None,
                                     mass: float = 1.0) -> MomentumDistribution:
    """Weighted histogram of ``m v_i(t)``; center and width are the sample moments."""
    _, v = ensemble.at(t)
    p = mass * v
    w = ensemble.weights / np.sum(ensemble.weights)
    mean = float(np.sum(w * p))
    std = math.sqrt(max(float(np.sum(w * (p - mean) ** 2)), 0.0))
    edges = fd_bin_edges(p, w) if bins is None else np.histogram_bin_edges(p, bins=bins)
    masses, edges = np.histogram(p, bins=edges, weights=w)
    masses = masses / np.sum(masses)
    return MomentumDistribution("histogram", float(t), mean, std, edges, masses)


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def _write_csv(path, columns, data, meta, digits=12):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True, default=_json_default) + "\n")
        fh.write(",".join(columns) + "\n")
        np.savetxt(fh, np.asarray(data, dtype=float), delimiter=",", fmt=f"%.{digits - 1}e")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def write_arrival_csv(path, dist: ArrivalDistribution, meta: Optional[dict] = None) -> Path:
    m = dict(meta or {})
    m.update(X=dist.X, mode=dist.mode, route=dist.route, normalization=dist.normalization,
             mean=dist.mean, variance=dist.variance)
    return _write_csv(path, ["t", "density"], np.column_stack([dist.t, dist.density]), m)


def write_momentum_csv(path, dist: MomentumDistribution, p=None, meta: Optional[dict] = None) -> Path:
    """Gaussian: sampled density on ``p``. Delta: the exact center only. Histogram: bins."""
    m = dict(meta or {})
    m.update(kind=dist.kind, t=dist.t, center=dist.center, width=dist.width)
    if dist.kind == "gaussian":
        if p is None:
            p = dist.center + dist.width * np.linspace(-6, 6, 481)
        return _write_csv(path, ["p", "density"], np.column_stack([p, dist.pdf(p)]), m)
    if dist.kind == "delta":
        return _write_csv(path, ["p", "mass"], np.array([[dist.center, 1.0]]), m)
    e = dist.edges
    return _write_csv(path, ["p_lo", "p_hi", "mass"], np.column_stack([e[:-1], e[1:], dist.masses]), m)


def write_sweep_csv(path, table: SweepTable, meta: Optional[dict] = None) -> Path:
    keys = sorted(table.tau)
    cols = ["gamma"] + [f"tau_eps{e:g}_a{a:g}" for e, a in keys]
    data = np.column_stack([table.gamma] + [table.tau[k] for k in keys])
    m = dict(meta or {})
    m.update(mode=table.mode, X=table.X, nondecreasing={f"eps{e:g}_a{a:g}": v for (e, a), v
                                                         in table.nondecreasing_in_gamma().items()})
    return _write_csv(path, cols, data, m)
