"""Named built-in real functions used to describe diffusion coefficients and densities.

Every function is vectorized over numpy arrays, exposes ``log`` (for densities that
under/overflow in linear space) and, when available in closed form, an
``antiderivative`` used to integrate drift/diffusion ratios exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


class Func:
    kind = "abstract"

    def __call__(self, x):
        raise NotImplementedError

    def log(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(self(x))

    def antiderivative(self, x):
        """Return a primitive F with F' = self, or raise NotImplementedError."""
        raise NotImplementedError

    @property
    def has_antiderivative(self) -> bool:
        try:
            self.antiderivative(np.array([1.0]))
        except NotImplementedError:
            return False
        return True

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(Func):
    value: float
    kind = "constant"

    def __call__(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.value)

    def log(self, x):
        with np.errstate(divide="ignore"):
            return np.full_like(np.asarray(x, dtype=float), np.log(self.value) if self.value > 0 else -np.inf)

    def antiderivative(self, x):
        return self.value * np.asarray(x, dtype=float)

    def to_dict(self):
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class Affine(Func):
    slope: float
    intercept: float = 0.0
    kind = "affine"

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * self.slope * x * x + self.intercept * x

    def to_dict(self):
        return {"kind": self.kind, "slope": self.slope, "intercept": self.intercept}


@dataclass(frozen=True)
class Exponential(Func):
    """``scale * exp(rate * x)``."""

    scale: float
    rate: float
    kind = "exponential"

    def __call__(self, x):
        return self.scale * np.exp(self.rate * np.asarray(x, dtype=float))

    def log(self, x):
        if self.scale <= 0:
            return super().log(x)
        return np.log(self.scale) + self.rate * np.asarray(x, dtype=float)

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.rate == 0:
            return self.scale * x
        return self.scale * np.expm1(self.rate * x) / self.rate

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "rate": self.rate}


@dataclass(frozen=True)
class Power(Func):
    """``scale * x**exponent`` on x > 0."""

    scale: float
    exponent: float
    kind = "power"

    def __call__(self, x):
        with np.errstate(divide="ignore"):
            return self.scale * np.power(np.asarray(x, dtype=float), self.exponent)

    def log(self, x):
        if self.scale <= 0:
            return super().log(x)
        with np.errstate(divide="ignore"):
            return np.log(self.scale) + self.exponent * np.log(np.asarray(x, dtype=float))

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.exponent == -1:
            return self.scale * np.log(x)
        p = self.exponent + 1.0
        return self.scale * np.power(x, p) / p

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "exponent": self.exponent}


@dataclass(frozen=True)
class Tabulated(Func):
    """Piecewise-linear interpolation of a user table, constant beyond the ends."""

    xs: tuple
    ys: tuple
    kind = "tabulated"
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
            raise ConfigError("tabulated function needs matching x/y arrays of length >= 2")
        if np.any(np.diff(xs) <= 0):
            raise ConfigError("tabulated x values must be strictly increasing")
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs))])
        object.__setattr__(self, "_cum", cum)

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.xs, self.ys)

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        xs = np.asarray(self.xs)
        ys = np.asarray(self.ys)
        k = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 2)
        x0 = xs[k]
        y0 = ys[k]
        slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
        inside = self._cum[k] + y0 * (x - x0) + 0.5 * slope * (x - x0) ** 2
        left = ys[0] * (x - xs[0])
        right = self._cum[-1] + ys[-1] * (x - xs[-1])
        return np.where(x < xs[0], left, np.where(x > xs[-1], right, inside))

    def to_dict(self):
        return {"kind": self.kind, "x": list(self.xs), "y": list(self.ys)}


def ou_drift(rate: float = 1.0) -> Affine:
    """Ornstein-Uhlenbeck restoring drift ``-rate * x``."""
    return Affine(-float(rate), 0.0)


def bm_drift(speed: float = 1.0) -> Constant:
    """Constant negative drift ``-speed`` of Brownian motion with drift."""
    return Constant(-float(speed))


def _req(desc, key):
    try:
        return float(desc[key])
    except KeyError:
        raise ConfigError(f"function of kind {desc.get('kind')!r} requires key {key!r}") from None


_ALLOWED = {
    "constant": {"value"},
    "affine": {"slope", "intercept"},
    "exponential": {"scale", "rate"},
    "power": {"scale", "exponent"},
    "ou": {"rate"},
    "bm_drift": {"speed"},
    "tabulated": {"x", "y", "file"},
}


def from_descriptor(desc) -> Func:
    """Build a built-in function from a config descriptor (a dict with ``kind``)."""
    if isinstance(desc, (int, float)):
        return Constant(float(desc))
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ConfigError(f"function descriptor must be a number or a table with 'kind': {desc!r}")
    kind = desc["kind"]
    if kind not in _ALLOWED:
        raise ConfigError(f"unknown function kind {kind!r}; expected one of {sorted(_ALLOWED)}")
    extra = set(desc) - _ALLOWED[kind] - {"kind"}
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} for function kind {kind!r}")
    if kind == "constant":
        return Constant(_req(desc, "value"))
    if kind == "affine":
        return Affine(_req(desc, "slope"), float(desc.get("intercept", 0.0)))
    if kind == "exponential":
        return Exponential(_req(desc, "scale"), _req(desc, "rate"))
    if kind == "power":
        return Power(_req(desc, "scale"), _req(desc, "exponent"))
    if kind == "ou":
        return ou_drift(desc.get("rate", 1.0))
    if kind == "bm_drift":
        return bm_drift(desc.get("speed", 1.0))
    if "file" in desc:
        data = np.loadtxt(desc["file"], delimiter=",", ndmin=2)
        return Tabulated(tuple(data[:, 0]), tuple(data[:, 1]))
    return Tabulated(tuple(map(float, desc["x"])), tuple(map(float, desc["y"])))
