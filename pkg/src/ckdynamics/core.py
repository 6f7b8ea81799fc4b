"""Parameter, potential and state types shared by every other module.

All types are frozen dataclasses. Physical quantities are in caller-chosen
natural units; nothing here rescales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class CKError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(CKError, ValueError):
    """An input violates a physical or structural invariant."""


class NonPositiveMass(ValidationError):
    pass


class NonPositivePlanck(ValidationError):
    pass


class NegativeFriction(ValidationError):
    pass


class EpsilonOutOfRange(ValidationError):
    pass


class OverdampedUnsupported(ValidationError):
    pass


class NonPositiveWidth(ValidationError):
    pass


class InvalidGrid(ValidationError):
    pass


class NumericalError(CKError, ArithmeticError):
    """A numerical procedure failed or produced unusable output."""


class NonFiniteDetected(NumericalError):
    pass


class GridTooNarrowWarning(UserWarning):
    """More probability than allowed lies outside a sampling grid."""


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def scaled_planck(hbar: float, epsilon: float) -> float:
    """Scaled Planck constant ``hbar * sqrt(epsilon)``."""
    if hbar <= 0:
        raise NonPositivePlanck(f"hbar must be > 0, got {hbar}")
    if not 0.0 <= epsilon <= 1.0:
        raise EpsilonOutOfRange(f"epsilon must lie in [0, 1], got {epsilon}")
    return hbar * math.sqrt(epsilon)


@dataclass(frozen=True)
class ModelParams:
    """Mass, Planck constant, friction and quantumness of one run."""

    mass: float = 1.0
    hbar: float = 1.0
    gamma: float = 0.0
    epsilon: float = 1.0

    def __post_init__(self):
        for name in ("mass", "hbar", "gamma", "epsilon"):
            v = getattr(self, name)
            if not isinstance(v, (int, float, np.floating, np.integer)) or not math.isfinite(v):
                raise ValidationError(f"{name} must be a finite number, got {v!r}")
            object.__setattr__(self, name, float(v))
        if self.mass <= 0:
            raise NonPositiveMass(f"mass must be > 0, got {self.mass}")
        if self.hbar <= 0:
            raise NonPositivePlanck(f"hbar must be > 0, got {self.hbar}")
        if self.gamma < 0:
            raise NegativeFriction(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise EpsilonOutOfRange(f"epsilon must lie in [0, 1], got {self.epsilon}")

    @property
    def hbar_tilde(self) -> float:
        return scaled_planck(self.hbar, self.epsilon)

    def replace(self, **changes) -> "ModelParams":
        d = self.to_dict()
        d.update(changes)
        return ModelParams.from_dict(d)

    def to_dict(self) -> dict:
        return {"mass": self.mass, "hbar": self.hbar,
                "gamma": self.gamma, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        _reject_unknown(d, {"mass", "hbar", "gamma", "epsilon"}, "params")
        return cls(**d)


# --------------------------------------------------------------------------
# potentials
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Free:
    """V(x) = 0."""

    kind = "free"

    def value(self, x, mass: float):
        return np.zeros_like(np.asarray(x, dtype=float))

    def gradient(self, x, mass: float):
        return np.zeros_like(np.asarray(x, dtype=float))

    def to_dict(self) -> dict:
        return {"kind": "free"}


@dataclass(frozen=True)
class Linear:
    """V(x) = m a x; ``a`` is the constant acceleration (any sign)."""

    a: float = 0.0
    kind = "linear"

    def __post_init__(self):
        if not math.isfinite(self.a):
            raise ValidationError(f"acceleration must be finite, got {self.a}")
        object.__setattr__(self, "a", float(self.a))

    def value(self, x, mass: float):
        return mass * self.a * np.asarray(x, dtype=float)

    def gradient(self, x, mass: float):
        return np.full_like(np.asarray(x, dtype=float), mass * self.a)

    def to_dict(self) -> dict:
        return {"kind": "linear", "a": self.a}


@dataclass(frozen=True)
class Harmonic:
    """V(x) = m omega0^2 x^2 / 2."""

    omega0: float = 1.0
    kind = "harmonic"

    def __post_init__(self):
        if not math.isfinite(self.omega0) or self.omega0 <= 0:
            raise ValidationError(f"omega0 must be > 0, got {self.omega0}")
        object.__setattr__(self, "omega0", float(self.omega0))

    def value(self, x, mass: float):
        x = np.asarray(x, dtype=float)
        return 0.5 * mass * self.omega0 ** 2 * x ** 2

    def gradient(self, x, mass: float):
        return mass * self.omega0 ** 2 * np.asarray(x, dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "harmonic", "omega0": self.omega0}


Potential = Union[Free, Linear, Harmonic]


def potential_from_dict(d: dict) -> Potential:
    kind = d.get("kind")
    if kind == "free":
        _reject_unknown(d, {"kind"}, "potential")
        return Free()
    if kind == "linear":
        _reject_unknown(d, {"kind", "a"}, "potential")
        return Linear(a=d.get("a", 0.0))
    if kind == "harmonic":
        _reject_unknown(d, {"kind", "omega0"}, "potential")
        if "omega0" not in d:
            raise ValidationError("harmonic potential requires omega0")
        return Harmonic(omega0=d["omega0"])
    raise ValidationError(f"unknown potential kind {kind!r}")


# --------------------------------------------------------------------------
# initial packet, grid, field
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSpec:
    """Initial Gaussian packet: width ``sigma0``, centre ``x0``, momentum ``p0``."""

    sigma0: float = 1.0
    x0: float = 0.0
    p0: float = 0.0

    def __post_init__(self):
        for name in ("sigma0", "x0", "p0"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, float(v))
        if self.sigma0 <= 0:
            raise NonPositiveWidth(f"sigma0 must be > 0, got {self.sigma0}")

    def density(self, x):
        x = np.asarray(x, dtype=float)
        s = self.sigma0
        return np.exp(-(x - self.x0) ** 2 / (2 * s * s)) / math.sqrt(2 * math.pi * s * s)

    def amplitude(self, x, hbar_tilde: float):
        """Initial scaled wavefunction sampled at ``x``."""
        if hbar_tilde <= 0:
            raise ValidationError("the initial scaled wavefunction needs hbar_tilde > 0")
        x = np.asarray(x, dtype=float)
        s = self.sigma0
        return ((2 * math.pi * s * s) ** -0.25
                * np.exp(-(x - self.x0) ** 2 / (4 * s * s)
                         + 1j * self.p0 * (x - self.x0) / hbar_tilde))

    def to_dict(self) -> dict:
        return {"sigma0": self.sigma0, "x0": self.x0, "p0": self.p0}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSpec":
        _reject_unknown(d, {"sigma0", "x0", "p0"}, "gaussian")
        return cls(**d)


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``n_points`` nodes on ``[x_min, x_max]``."""

    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise InvalidGrid(f"n_points must be an integer >= 2, got {self.n_points}")
        object.__setattr__(self, "n_points", int(self.n_points))
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise InvalidGrid("grid bounds must be finite")
        if not self.x_min < self.x_max:
            raise InvalidGrid(f"x_min must be < x_max, got {self.x_min} >= {self.x_max}")
        object.__setattr__(self, "x_min", float(self.x_min))
        object.__setattr__(self, "x_max", float(self.x_max))

    @classmethod
    def from_spacing(cls, x_min: float, x_max: float, dx: float) -> "Grid":
        """Grid starting at ``x_min`` with spacing exactly ``dx``, covering ``x_max``."""
        if dx <= 0:
            raise InvalidGrid(f"dx must be > 0, got {dx}")
        n = int(math.ceil((x_max - x_min) / dx - 1e-9)) + 1
        return cls(x_min, x_min + (n - 1) * dx, n)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "n_points": self.n_points}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        _reject_unknown(d, {"x_min", "x_max", "n_points"}, "grid")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class WaveField:
    """Complex wavefunction samples on ``grid`` at time ``t``."""

    grid: Grid
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.grid.n_points,):
            raise ValidationError(
                f"values shape {v.shape} does not match grid of {self.grid.n_points} points")
        if not np.all(np.isfinite(v)):
            raise NonFiniteDetected(f"non-finite wavefunction values at t={self.t}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        return float(np.sum(self.density) * self.grid.dx)

    def normalized(self) -> "WaveField":
        return WaveField(self.grid, self.values / math.sqrt(self.norm()), self.t)

    def mean_position(self) -> float:
        rho = self.density
        return float(np.sum(self.x * rho) / np.sum(rho))

    def width(self) -> float:
        rho = self.density
        xm = np.sum(self.x * rho) / np.sum(rho)
        return float(math.sqrt(np.sum((self.x - xm) ** 2 * rho) / np.sum(rho)))


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Config:
    """A validated (params, potential) pair."""

    params: ModelParams
    potential: Potential

    @property
    def hbar_tilde(self) -> float:
        return self.params.hbar_tilde


def validate_params(params: ModelParams, potential: Potential) -> Config:
    """Check the combination of parameters and potential.

    ModelParams already enforces its own field bounds on construction; this
    adds the cross-field rule that harmonic runs must be underdamped.
    """
    if not isinstance(params, ModelParams):
        raise ValidationError(f"expected ModelParams, got {type(params).__name__}")
    if not isinstance(potential, (Free, Linear, Harmonic)):
        raise ValidationError(f"unsupported potential {potential!r}")
    if isinstance(potential, Harmonic) and potential.omega0 <= params.gamma / 2:
        raise OverdampedUnsupported(
            f"harmonic potential needs omega0 > gamma/2 (underdamped); "
            f"got omega0={potential.omega0}, gamma/2={params.gamma / 2}")
    return Config(params, potential)


def _reject_unknown(d: dict, allowed: set, what: str) -> None:
    if not isinstance(d, dict):
        raise ValidationError(f"{what} must be a mapping, got {type(d).__name__}")
    extra = set(d) - allowed
    if extra:
        raise ValidationError(f"unknown {what} field(s): {', '.join(sorted(extra))}")


def to_yaml(obj: Any) -> str:
    """Serialize a core type (or a dict of them) to YAML text."""
    import yaml

    def conv(o):
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if isinstance(o, dict):
            return {k: conv(v) for k, v in o.items()}
        return o

    return yaml.safe_dump(conv(obj), sort_keys=False)


def from_yaml(text: str, cls):
    import yaml

    d = yaml.safe_load(text)
    if cls in (Free, Linear, Harmonic) or cls is Potential:
        return potential_from_dict(d)
    return cls.from_dict(d)
