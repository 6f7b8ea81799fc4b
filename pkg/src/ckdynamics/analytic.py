"""Closed-form evolution of a scaled Gaussian packet in the CK model.

Every function is vectorised over ``t`` (and ``x`` where it appears) and
valid for ``gamma = 0`` as well as ``gamma > 0``: the friction enters only
through entire functions of ``z = gamma*t`` evaluated by power series near
``z = 0``.

The three solvable potentials share one structure: the packet stays
Gaussian, its centre follows the classical path ``x_t``, and every scaled
trajectory is ``x_t + (x_init - x0) * D(t)`` with a dressing factor ``D``
that depends only on the width.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.special import ndtr

from .core import (
    CKError,
    Free,
    GaussianSpec,
    Grid,
    GridTooNarrowWarning,
    Harmonic,
    Linear,
    ModelParams,
    Potential,
    ValidationError,
    WaveField,
    validate_params,
)


class EpsilonZero(ValidationError):
    """The requested object does not exist in the classical limit."""


class RequiresFriction(ValidationError):
    pass


class ZeroTime(ValidationError):
    pass


class CausticTime(CKError):
    """The harmonic kernel is singular (sin(omega t) = 0)."""


# --------------------------------------------------------------------------
# entire functions of z = gamma t
# --------------------------------------------------------------------------

_SERIES_CUT = 0.5
_NTERMS = 24


def _switch(z, direct, coeffs):
    z = np.asarray(z, dtype=float)
    zz = np.atleast_1d(z)
    out = np.empty_like(zz)
    small = np.abs(zz) < _SERIES_CUT
    if np.any(small):
        out[small] = np.polynomial.polynomial.polyval(zz[small], coeffs)
    if np.any(~small):
        out[~small] = direct(zz[~small])
    return out.reshape(z.shape) if z.ndim else out[0]


_C_E1 = [(-1) ** n / factorial(n + 1) for n in range(_NTERMS)]
_C_E2 = [(-1) ** n / factorial(n + 2) for n in range(_NTERMS)]
_C_K1 = [1 / factorial(n + 1) for n in range(_NTERMS)]
_C_K2 = [1 / factorial(n + 2) for n in range(_NTERMS)]
_C_C2 = [2 / factorial(n + 2) if n % 2 == 0 else 0.0 for n in range(_NTERMS)]
_C_C4 = [2 / factorial(n + 4) if n % 2 == 0 else 0.0 for n in range(_NTERMS)]
_C_H3 = [(2 * n - 3 - (-1) ** n) / factorial(n) for n in range(3, _NTERMS + 3)]


def _e1(z):
    """(1 - e^-z) / z"""
    return _switch(z, lambda z: -np.expm1(-z) / z, _C_E1)


def _e2(z):
    """(z - 1 + e^-z) / z^2"""
    return _switch(z, lambda z: (z + np.expm1(-z)) / z ** 2, _C_E2)


def _k1(z):
    """(e^z - 1) / z"""
    return _switch(z, lambda z: np.expm1(z) / z, _C_K1)


def _k2(z):
    """(e^z - z - 1) / z^2"""
    return _switch(z, lambda z: (np.expm1(z) - z) / z ** 2, _C_K2)


def _c2(z):
    """(e^z + e^-z - 2) / z^2"""
    return _switch(z, lambda z: 2 * (np.cosh(z) - 1) / z ** 2, _C_C2)


def _c4(z):
    """(e^z + e^-z - 2 - z^2) / z^4"""
    return _switch(z, lambda z: (2 * (np.cosh(z) - 1) - z ** 2) / z ** 4, _C_C4)


def _h3(z):
    """(4 + (2z - 3) e^z - e^-z) / z^3"""
    return _switch(z, lambda z: (4 + (2 * z - 3) * np.exp(z) - np.exp(-z)) / z ** 3, _C_H3)


def damping_time(gamma: float, t):
    """(1 - e^{-gamma t}) / gamma, equal to t when gamma = 0."""
    t = np.asarray(t, dtype=float)
    return t * _e1(gamma * t)


# --------------------------------------------------------------------------
# result types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassicalPath:
    x: np.ndarray
    p: np.ndarray
    action: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class ComplexWidth:
    s: np.ndarray
    sigma: np.ndarray
    dsigma_dt: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class HarmonicCoefficients:
    omega: float
    alpha: np.ndarray
    eta: np.ndarray
    theta: np.ndarray
    Theta: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class AuxiliaryFunctions:
    g: np.ndarray
    f: np.ndarray


@dataclass(frozen=True)
class MomentumWidth:
    Sigma: np.ndarray
    sigma_p: float


@dataclass(frozen=True, eq=False)
class MomentumField:
    """Momentum-space wavefunction on a uniform momentum grid."""

    p: np.ndarray
    values: np.ndarray
    t: float

    @property
    def dp(self) -> float:
        return float(self.p[1] - self.p[0])

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        return float(np.sum(self.density) * self.dp)

    def mean(self) -> float:
        rho = self.density
        return float(np.sum(self.p * rho) / np.sum(rho))

    def width(self) -> float:
        rho = self.density
        pm = np.sum(self.p * rho) / np.sum(rho)
        return float(np.sqrt(np.sum((self.p - pm) ** 2 * rho) / np.sum(rho)))


# --------------------------------------------------------------------------
# classical path and widths
# --------------------------------------------------------------------------

def _check(potential, params):
    validate_params(params, potential)


def _harmonic_parts(potential: Harmonic, params: ModelParams, t):
    g = params.gamma
    w = math.sqrt(potential.omega0 ** 2 - g * g / 4)
    wt = w * t
    S, C = np.sin(wt), np.cos(wt)
    # sin(wt)/w, regular as w -> 0
    sinc = t * np.sinc(wt / np.pi)
    return w, S, C, sinc, np.exp(-g * t / 2)


def classical_path(potential: Potential, gaussian: GaussianSpec,
                   params: ModelParams, t) -> ClassicalPath:
    """Centre position, kinematic momentum and action along the classical path."""
    _check(potential, params)
    t = np.asarray(t, dtype=float)
    m, g = params.mass, params.gamma
    x0, p0 = gaussian.x0, gaussian.p0
    if isinstance(potential, Harmonic):
        w0 = potential.omega0
        w, S, C, sinc, env = _harmonic_parts(potential, params, t)
        x = env * (x0 * (C + g / 2 * sinc) + p0 / m * sinc)
        p = env * (-m * w0 ** 2 * x0 * sinc + p0 * (C - g / 2 * sinc))
        action = (m / 4) * (
            2 * sinc * C * (p0 ** 2 / m ** 2 - w0 ** 2 * x0 ** 2)
            - sinc ** 2 * (g * (p0 / m + g * x0 / 2) ** 2
                           + 4 * w * w * x0 * (p0 / m + g * x0 / 4)))
        return ClassicalPath(x, p, action, t)
    a = potential.a if isinstance(potential, Linear) else 0.0
    z = g * t
    u = t * _e1(z)
    x = x0 + p0 / m * u - a * t ** 2 * _e2(z)
    p = p0 * np.exp(-z) - m * a * u
    # Lagrangian action, integral of (m xdot^2/2 - V) e^{gamma t}
    action = (p0 ** 2 / (2 * m) * u
              - a * (p0 * t ** 2 * _c2(z) + m * x0 * t * _k1(z))
              + a * a * m * t ** 3 * _h3(z) / 2)
    return ClassicalPath(x, p, action, t)


def _harmonic_width(potential: Harmonic, gaussian: GaussianSpec, params: ModelParams, t):
    """Complex width, signed real part ratio and their derivatives."""
    m, g, ht = params.mass, params.gamma, params.hbar_tilde
    s0 = gaussian.sigma0
    w, S, C, sinc, env = _harmonic_parts(potential, params, t)
    kap = ht / (2 * m * s0 ** 2)
    re = C + g / 2 * sinc
    im = kap * sinc
    s = s0 * env * (re + 1j * im)
    # d/dt of the bracket terms
    dre = -w * S + g / 2 * C
    dim = kap * C
    return s, re, im, dre, dim, env


def complex_width(potential: Potential, gaussian: GaussianSpec,
                  params: ModelParams, t) -> ComplexWidth:
    """Complex width ``s_t``, its modulus and the time derivative of the modulus."""
    _check(potential, params)
    t = np.asarray(t, dtype=float)
    m, g, ht = params.mass, params.gamma, params.hbar_tilde
    s0 = gaussian.sigma0
    if isinstance(potential, Harmonic):
        s, re, im, dre, dim, env = _harmonic_width(potential, gaussian, params, t)
        if params.epsilon == 0:
            sigma = s0 * env * np.abs(re)
            dsig = s0 * env * np.sign(re) * (dre - g / 2 * re)
        else:
            mod = np.hypot(re, im)
            sigma = s0 * env * mod
            dsig = s0 * env * ((re * dre + im * dim) / mod - g / 2 * mod)
        return ComplexWidth(s, sigma, dsig, t)
    z = g * t
    u = t * _e1(z)
    kap = ht / (2 * m * s0 ** 2)
    s = s0 * (1 + 1j * kap * u)
    sigma = s0 * np.sqrt(1 + (kap * u) ** 2)
    dsig = s0 ** 2 * kap ** 2 * u * np.exp(-z) / sigma
    return ComplexWidth(s, sigma, dsig, t)


def dressing_factor(potential: Potential, gaussian: GaussianSpec,
                    params: ModelParams, t):
    """D(t) in ``x(t) = x_t + (x_init - x0) D(t)``.

    For free and linear motion D is the width ratio. For the oscillator it
    is the exponential of the integrated velocity-field slope, which equals
    the width ratio whenever epsilon > 0 and the signed classical factor
    at epsilon = 0 (where trajectories do cross).
    """
    _check(potential, params)
    t = np.asarray(t, dtype=float)
    if isinstance(potential, Harmonic) and params.epsilon == 0:
        _, re, _, _, _, env = _harmonic_width(potential, gaussian, params, t)
        return env * re
    return complex_width(potential, gaussian, params, t).sigma / gaussian.sigma0


def dressing_rate(potential: Potential, gaussian: GaussianSpec, params: ModelParams, t):
    """Time derivative of the dressing factor."""
    _check(potential, params)
    t = np.asarray(t, dtype=float)
    if isinstance(potential, Harmonic) and params.epsilon == 0:
        _, re, _, dre, _, env = _harmonic_width(potential, gaussian, params, t)
        return env * (dre - params.gamma / 2 * re)
    return complex_width(potential, gaussian, params, t).dsigma_dt / gaussian.sigma0


def velocity_slope(potential: Potential, gaussian: GaussianSpec, params: ModelParams, t):
    """Coefficient of ``(x - x_t)`` in the scaled velocity field.

    Infinite at the focal times of the classical oscillator.
    """
    D = dressing_factor(potential, gaussian, params, t)
    dD = dressing_rate(potential, gaussian, params, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        return dD / D


def harmonic_coefficients(potential: Harmonic, gaussian: GaussianSpec,
                          params: ModelParams, t) -> HarmonicCoefficients:
    """omega, alpha_t, eta_t, theta(t) and Theta(t) for the damped oscillator.

    ``alpha`` is evaluated in the form ``-1/(4 sigma^2) + i m e^{gt} theta / (2 hbar~)``,
    which is regular at the zeros of sin(omega t); at epsilon = 0 it is NaN.
    """
    if not isinstance(potential, Harmonic):
        raise ValidationError("harmonic_coefficients needs a Harmonic potential")
    _check(potential, params)
    t = np.asarray(t, dtype=float)
    m, g, ht = params.mass, params.gamma, params.hbar_tilde
    w = math.sqrt(potential.omega0 ** 2 - g * g / 4)
    eta = classical_path(potential, gaussian, params, t).action
    theta = velocity_slope(potential, gaussian, params, t)
    Theta = dressing_factor(potential, gaussian, params, t)
    if ht > 0:
        sigma = complex_width(potential, gaussian, params, t).sigma
        alpha = -1 / (4 * sigma ** 2) + 1j * m * np.exp(g * t) * theta / (2 * ht)
    else:
        alpha = np.full(np.shape(t), complex(np.nan, np.nan))
    return HarmonicCoefficients(w, alpha, eta, theta, Theta, t)


def auxiliary_functions(potential: Potential, gaussian: GaussianSpec,
                        params: ModelParams, t) -> AuxiliaryFunctions:
    """g(t) and f(t) of the dressing decomposition.

    Both are identically one for free and linear motion. For the oscillator
    g = sigma0 Theta / sigma, which is +-1, so f = g away from focal points.
    """
    _check(potential, params)
    t = np.asarray(t, dtype=float)
    if isinstance(potential, Harmonic):
        D = dressing_factor(potential, gaussian, params, t)
        sig = complex_width(potential, gaussian, params, t).sigma
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(sig > 0, gaussian.sigma0 * D / sig, 1.0)
        return AuxiliaryFunctions(g, g.copy())
    one = np.ones(np.shape(t))
    return AuxiliaryFunctions(one, one.copy())


def sigma_momentum(potential: Potential, gaussian: GaussianSpec,
                   params: ModelParams, t) -> MomentumWidth:
    """Width of the actual-momentum distribution and the canonical width."""
    _check(potential, params)
    Sigma = params.mass * gaussian.sigma0 * np.abs(dressing_rate(potential, gaussian, params, t))
    return MomentumWidth(Sigma, params.hbar_tilde / (2 * gaussian.sigma0))


# --------------------------------------------------------------------------
# wavefunction, density, current, velocity
# --------------------------------------------------------------------------

def _continuous_arg_harmonic(potential, gaussian, params, t):
    """Continuous argument of s_t for the oscillator (Maslov branch)."""
    m, g, ht = params.mass, params.gamma, params.hbar_tilde
    w = math.sqrt(potential.omega0 ** 2 - g * g / 4)
    kap = ht / (2 * m * gaussian.sigma0 ** 2 * w)
    b = g / (2 * w)
    # s_t e^{-i w t} / (sigma0 env) = c1 + c2 e^{-2iwt} with |c1| > |c2| for kap > 0,
    # a circle that never meets the negative real axis.
    c1 = (1 + kap - 1j * b) / 2
    c2 = (1 - kap + 1j * b) / 2
    return w * t + np.angle(c1 + c2 * np.exp(-2j * w * t))


def wavefunction_values(potential: Potential, gaussian: GaussianSpec,
                        params: ModelParams, x, t: float) -> np.ndarray:
    """Scaled wavefunction at positions ``x`` and a single time ``t``."""
    _check(potential, params)
    ht = params.hbar_tilde
    if ht == 0:
        raise EpsilonZero("the scaled wavefunction is undefined at epsilon = 0")
    x = np.asarray(x, dtype=float)
    t = float(t)
    path = classical_path(potential, gaussian, params, t)
    xt, pt, act = float(path.x), float(path.p), float(path.action)
    pc = pt * math.exp(params.gamma * t)
    cw = complex_width(potential, gaussian, params, t)
    s = complex(cw.s)
    dxs = x - xt
    if isinstance(potential, Harmonic):
        arg = float(_continuous_arg_harmonic(potential, gaussian, params, t))
        pref = (2 * math.pi) ** -0.25 * abs(s) ** -0.5 * np.exp(-0.5j * arg)
        alpha = complex(harmonic_coefficients(potential, gaussian, params, t).alpha)
        expo = alpha * dxs ** 2
    else:
        pref = (2 * math.pi) ** -0.25 / np.sqrt(s)
        expo = -dxs ** 2 / (4 * gaussian.sigma0 * s)
    return pref * np.exp(expo + 1j * (pc * dxs + act) / ht)


def outside_mass(potential, gaussian, params, grid: Grid, t) -> float:
    """Probability of the closed-form density lying outside ``grid``."""
    xt = float(classical_path(potential, gaussian, params, t).x)
    sig = float(complex_width(potential, gaussian, params, t).sigma)
    if sig == 0:
        return 0.0 if grid.x_min <= xt <= grid.x_max else 1.0
    return float(ndtr((grid.x_min - xt) / sig) + ndtr(-(grid.x_max - xt) / sig))


def wavefunction(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
                 grid: Grid, t: float, strict: bool = False) -> WaveField:
    """Closed-form scaled wavefunction sampled on ``grid``.

    Warns with :class:`GridTooNarrowWarning` (raises if ``strict``) when more
    than 1e-6 of the probability lies outside the grid.
    """
    lost = outside_mass(potential, gaussian, params, grid, t)
    if lost > 1e-6:
        msg = f"{lost:.3g} of the probability lies outside the grid at t={t}"
        if strict:
            raise ValidationError(msg)
        warnings.warn(msg, GridTooNarrowWarning, stacklevel=2)
    return WaveField(grid, wavefunction_values(potential, gaussian, params, grid.x, t), t)


def velocity_field(potential: Potential, gaussian: GaussianSpec,
                   params: ModelParams, x, t):
    """Scaled velocity field ``slope(t) (x - x_t) + p_t / m``."""
    x = np.asarray(x, dtype=float)
    path = classical_path(potential, gaussian, params, t)
    slope = velocity_slope(potential, gaussian, params, t)
    return slope * (x - path.x) + path.p / params.mass


def density_and_current(potential: Potential, gaussian: GaussianSpec,
                        params: ModelParams, x, t):
    """Closed-form density and current (friction factor included).

    Valid at epsilon = 0, where it returns the classical Liouville density
    and current.
    """
    x = np.asarray(x, dtype=float)
    path = classical_path(potential, gaussian, params, t)
    sig = complex_width(potential, gaussian, params, t).sigma
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        rho = np.exp(-(x - path.x) ** 2 / (2 * sig ** 2)) / np.sqrt(2 * np.pi * sig ** 2)
    rho = np.nan_to_num(rho, nan=0.0, posinf=0.0)
    v = velocity_field(potential, gaussian, params, x, t)
    j = np.where(rho > 0, rho * v, 0.0)
    return rho, j


def field_density_and_current(field: WaveField, params: ModelParams):
    """Density and current of a sampled field (centred differences)."""
    psi = field.values
    dpsi = np.gradient(psi, field.grid.dx, edge_order=2)
    rho = np.abs(psi) ** 2
    j = params.hbar_tilde / params.mass * np.imag(np.conj(psi) * dpsi) * math.exp(-params.gamma * field.t)
    return rho, j


def quantum_potential(potential: Potential, gaussian: GaussianSpec,
                      params: ModelParams, x, t):
    """Closed-form quantum potential of the Gaussian amplitude (scaled hbar)."""
    x = np.asarray(x, dtype=float)
    xt = classical_path(potential, gaussian, params, t).x
    sig = complex_width(potential, gaussian, params, t).sigma
    ht = params.hbar_tilde
    return ht ** 2 / (2 * params.mass) * (1 / (2 * sig ** 2) - (x - xt) ** 2 / (4 * sig ** 4))


def quantum_force(potential: Potential, gaussian: GaussianSpec,
                  params: ModelParams, x, t):
    """-dQ/dx of :func:`quantum_potential`."""
    x = np.asarray(x, dtype=float)
    xt = classical_path(potential, gaussian, params, t).x
    sig = complex_width(potential, gaussian, params, t).sigma
    return params.hbar_tilde ** 2 * (x - xt) / (4 * params.mass * sig ** 4)


# --------------------------------------------------------------------------
# trajectories in closed form
# --------------------------------------------------------------------------

def scaled_trajectory(potential: Potential, gaussian: GaussianSpec,
                      params: ModelParams, x_init, t):
    """Position at ``t`` of the scaled trajectory launched from ``x_init``."""
    x_init = np.asarray(x_init, dtype=float)
    xt = classical_path(potential, gaussian, params, t).x
    D = dressing_factor(potential, gaussian, params, t)
    return xt + (x_init - gaussian.x0) * D


def localization_point(gaussian: GaussianSpec, params: ModelParams, x_init):
    """Final resting point of a free scaled trajectory in a viscid medium."""
    if params.gamma <= 0:
        raise RequiresFriction("localization needs gamma > 0")
    m, g = params.mass, params.gamma
    x_init = np.asarray(x_init, dtype=float)
    kap = params.hbar_tilde / (2 * m * gaussian.sigma0 ** 2 * g)
    return gaussian.x0 + gaussian.p0 / (m * g) + (x_init - gaussian.x0) * math.sqrt(1 + kap * kap)


def asymptotic_position(potential: Potential, gaussian: GaussianSpec,
                        params: ModelParams, x_init):
    """Limit of the trajectory as t -> infinity, or None if not available.

    Returns +-inf for unbounded motion. The oscillator has no useful bound
    for first-passage questions and returns None.
    """
    x_init = np.asarray(x_init, dtype=float)
    m, g = params.mass, params.gamma
    ht = params.hbar_tilde
    s0 = gaussian.sigma0
    if isinstance(potential, Harmonic):
        return None
    a = potential.a if isinstance(potential, Linear) else 0.0
    d = x_init - gaussian.x0
    if g > 0:
        if a != 0:
            return np.full_like(d, -np.sign(a) * np.inf)
        return localization_point(gaussian, params, x_init)
    # gamma = 0: x ~ t^2 (-a/2) or t (p0/m + d hbar~/(2 m s0^2))
    if a != 0:
        return np.full_like(d, -np.sign(a) * np.inf)
    rate = gaussian.p0 / m + d * ht / (2 * m * s0 ** 2)
    return np.where(rate > 0, np.inf, np.where(rate < 0, -np.inf, x_init))


def trajectory_distance(gaussian: GaussianSpec, params: ModelParams, x1_init, x2_init, t,
                        potential: Potential = Free()):
    """Separation of two scaled trajectories (free or linear potential)."""
    if isinstance(potential, Harmonic):
        raise ValidationError("trajectory_distance is defined for free and linear potentials")
    sig = complex_width(potential, gaussian, params, t).sigma
    return (np.asarray(x1_init, float) - np.asarray(x2_init, float)) * sig / gaussian.sigma0


# --------------------------------------------------------------------------
# propagators
# --------------------------------------------------------------------------

def _scaled_hbar_for_kernel(params: ModelParams) -> float:
    ht = params.hbar_tilde
    if ht == 0:
        raise EpsilonZero("propagators need hbar_tilde > 0")
    return ht


def propagator_free(params: ModelParams, x, x_prime, t: float):
    """Free CK kernel G(x, x'; t) with the scaled Planck constant."""
    if t <= 0:
        raise ZeroTime(f"propagator needs t > 0, got {t}")
    ht = _scaled_hbar_for_kernel(params)
    m = params.mass
    u = float(damping_time(params.gamma, t))
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    return np.sqrt(m / (2j * math.pi * ht * u)) * np.exp(1j * m * (x - xp) ** 2 / (2 * ht * u))


def propagator_linear(params: ModelParams, a: float, x, x_prime, t: float):
    """CK kernel for V = m a x: a phase factor times the free kernel."""
    G = propagator_free(params, x, x_prime, t)
    ht = params.hbar_tilde
    m, g = params.mass, params.gamma
    z = g * t
    e1 = _e1(z)
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    phase = (-(m * a / ht) * t * (x * _k2(z) + xp * _k2(-z)) / e1
             - (m * a * a / (2 * ht)) * t ** 3 * _c4(z) / e1)
    return np.exp(1j * phase) * G


def propagator_harmonic(params: ModelParams, omega0: float, x, x_prime, t: float,
                        caustic_tol: float = 1e-8):
    """CK kernel of the damped oscillator, with the Maslov phase past each caustic."""
    if t <= 0:
        raise ZeroTime(f"propagator needs t > 0, got {t}")
    ht = _scaled_hbar_for_kernel(params)
    validate_params(params, Harmonic(omega0))
    m, g = params.mass, params.gamma
    w = math.sqrt(omega0 ** 2 - g * g / 4)
    S, C = math.sin(w * t), math.cos(w * t)
    if abs(S) < caustic_tol:
        raise CausticTime(f"sin(omega t) = {S:.3g} at t={t}")
    n_caustics = math.floor(w * t / math.pi)
    E, Eh = math.exp(g * t), math.exp(g * t / 2)
    pref = (math.sqrt(m * w * Eh / (2 * math.pi * ht * abs(S)))
            * np.exp(-1j * math.pi / 4 - 1j * math.pi * n_caustics / 2))
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    phase = (m * g / (4 * ht) * (xp ** 2 - x ** 2 * E)
             + m * w / (2 * ht * S) * ((x ** 2 * E + xp ** 2) * C - 2 * x * xp * Eh))
    return pref * np.exp(1j * phase)


def propagator(potential: Potential, params: ModelParams, x, x_prime, t: float):
    if isinstance(potential, Harmonic):
        return propagator_harmonic(params, potential.omega0, x, x_prime, t)
    if isinstance(potential, Linear):
        return propagator_linear(params, potential.a, x, x_prime, t)
    return propagator_free(params, x, x_prime, t)


def convolve_propagator(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
                        x, t: float, half_width: float = 14.0, max_nodes: int = 4_000_000):
    """Propagate the initial packet by direct quadrature of ``G * psi0``.

    Trapezoid rule on a window of ``half_width`` initial widths; the node
    spacing resolves the fastest phase of the integrand.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ht = _scaled_hbar_for_kernel(params)
    s0, x0 = gaussian.sigma0, gaussian.x0
    lo, hi = x0 - half_width * s0, x0 + half_width * s0
    m = params.mass
    r_src = max(abs(lo), abs(hi))
    if isinstance(potential, Harmonic):
        w = math.sqrt(potential.omega0 ** 2 - params.gamma ** 2 / 4)
        S, C = math.sin(w * t), math.cos(w * t)
        r_dst = float(np.max(np.abs(x))) * math.exp(params.gamma * t / 2)
        kmax = (m * w / (ht * abs(S)) * 2 * (r_src * abs(C) + r_dst)
                + m * params.gamma * r_src / (2 * ht))
    else:
        reach = float(np.max(np.abs(x[:, None] - np.array([lo, hi])[None, :])))
        kmax = m * reach / (ht * float(damping_time(params.gamma, t)))
    kmax += abs(gaussian.p0) / ht + 1.0
    if isinstance(potential, Linear):
        kmax += m * abs(potential.a) * t / ht
    n = int(min(max_nodes, max(20001, 8 * kmax * (hi - lo) / math.pi)))
    xp = np.linspace(lo, hi, n)
    psi0 = gaussian.amplitude(xp, ht)
    wts = np.full(n, (hi - lo) / (n - 1))
    wts[[0, -1]] *= 0.5
    out = np.empty(x.shape, dtype=complex)
    for i, xi in enumerate(x):
        out[i] = np.sum(propagator(potential, params, xi, xp, t) * psi0 * wts)
    return out


# --------------------------------------------------------------------------
# momentum space
# --------------------------------------------------------------------------

def momentum_transform(field: WaveField, params: ModelParams) -> MomentumField:
    """Discrete version of ``(2 pi hbar~)^-1/2 int exp(-i p x / hbar~) psi dx``.

    Sampled on the conjugate grid ``p = hbar~ k``; Parseval holds exactly.
    """
    ht = _scaled_hbar_for_kernel(params)
    grid = field.grid
    n, dx = grid.n_points, grid.dx
    k = 2 * np.pi * np.fft.fftfreq(n, d=dx)
    F = np.fft.fft(field.values)
    phi = dx / np.sqrt(2 * np.pi * ht) * np.exp(-1j * k * grid.x_min) * F
    k = np.fft.fftshift(k)
    phi = np.fft.fftshift(phi)
    return MomentumField(ht * k, phi, field.t)


def canonical_momentum_density(gaussian: GaussianSpec, params: ModelParams, p):
    """Closed-form density of canonical momentum for free motion (time independent)."""
    sp = params.hbar_tilde / (2 * gaussian.sigma0)
    p = np.asarray(p, dtype=float)
    if sp == 0:
        raise EpsilonZero("canonical momentum density is a delta at epsilon = 0")
    return np.exp(-(p - gaussian.p0) ** 2 / (2 * sp * sp)) / (math.sqrt(2 * math.pi) * sp)


# --------------------------------------------------------------------------
# grid sizing
# --------------------------------------------------------------------------

def auto_grid(potential: Potential, gaussian: GaussianSpec, params: ModelParams,
              t_max: float, dx: float, margin: float = 8.0, n_probe: int = 2001) -> Grid:
    """Grid covering the packet over ``[0, t_max]`` with ``margin`` widths each side."""
    ts = np.linspace(0.0, t_max, n_probe)
    xt = classical_path(potential, gaussian, params, ts).x
    sig = np.maximum(complex_width(potential, gaussian, params, ts).sigma, gaussian.sigma0)
    smax = float(np.max(sig))
    lo = float(np.min(xt)) - margin * smax
    hi = float(np.max(xt)) + margin * smax
    lo = math.floor(lo / dx) * dx
    return Grid.from_spacing(lo, hi, dx)
