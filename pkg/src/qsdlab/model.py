"""One-dimensional diffusions in Feller canonical form ``d/dm d/ds`` on ``(0, ell)``.

A :class:`DiffusionSpec` is stored through its log speed density ``log m'`` and
log scale density ``log s'`` (Lebesgue densities).  The scale function is
normalized so that ``s(0) = 0``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _quad
from .errors import (
    ClassificationInconclusiveError,
    InvalidCoefficientError,
    QuadratureError,
    UnsupportedSpecError,
)
from .functions import Constant, Func

# log-density magnitude beyond which double precision cannot resolve O(1) products
_LOG_PRECISION_GUARD = 1e12


@dataclass(frozen=True)
class DiffusionSpec:
    ell: float
    log_speed_density: Callable
    log_scale_density: Callable
    ref_point: float = 1.0
    coefficients: Optional[tuple] = None
    natural: bool = False
    scale_closed: Optional[Callable] = None
    scale_inverse_closed: Optional[Callable] = None
    name: str = "diffusion"
    descriptor: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.ell > 0:
            raise UnsupportedSpecError(f"interval right end must be positive, got {self.ell}")
        if not 0 <= self.ref_point < self.ell:
            raise UnsupportedSpecError(f"reference point {self.ref_point} outside [0, ell)")

    # densities ---------------------------------------------------------
    def speed_density(self, x):
        return np.exp(self.log_speed_density(np.asarray(x, dtype=float)))

    def scale_density(self, x):
        return np.exp(self.log_scale_density(np.asarray(x, dtype=float)))

    # scale function ----------------------------------------------------
    def log_scale(self, x):
        """``log s(x)`` with ``s(0) = 0``; robust for huge scale values."""
        x = np.asarray(x, dtype=float)
        if self.scale_closed is not None:
            with np.errstate(divide="ignore", over="ignore"):
                val = np.log(self.scale_closed(x))
            if np.all(np.isfinite(val) | (x == 0)):
                return val
        return _quad.log_integral(self.log_scale_density, 0.0, x, levels=40, order=8)

    def scale(self, x):
        x = np.asarray(x, dtype=float)
        if self.scale_closed is not None:
            return self.scale_closed(x)
        return np.exp(self.log_scale(x))

    def scale_inverse(self, y):
        """Inverse of the scale function (vectorized safeguarded Newton when not closed form)."""
        y = np.asarray(y, dtype=float)
        if self.scale_inverse_closed is not None:
            return self.scale_inverse_closed(y)
        return _invert_scale(self, y)

    def speed_mass(self, a, b):
        """``m((a, b])`` by geometric Gauss-Legendre quadrature."""
        return np.exp(_quad.log_integral(self.log_speed_density, a, b, levels=30))

    @property
    def has_coefficients(self) -> bool:
        return self.coefficients is not None

    def diffusion_coefficient(self, x):
        return self.coefficients[0](x)

    def drift(self, x):
        return self.coefficients[1](x)

    # constructors ------------------------------------------------------
    @classmethod
    def from_coefficients(cls, a, b, ell=math.inf, ref_point=1.0, name="coefficients", descriptor=None):
        """Diffusion with generator ``a(x) d^2/dx^2 + b(x) d/dx`` (Feller conversion about ``ref_point``)."""
        speed, scale_d, ratio = _coefficient_parts(a, b, ref_point)
        closed = inverse = None
        if isinstance(a, Constant) and isinstance(b, Constant):
            closed, inverse = _exponential_scale(b.value / a.value, ref_point)
        return cls(
            ell=float(ell),
            log_speed_density=lambda x: -_checked_log_a(a, x) + ratio(x),
            log_scale_density=lambda x: -ratio(x),
            ref_point=float(ref_point),
            coefficients=(a, b),
            scale_closed=closed,
            scale_inverse_closed=inverse,
            natural=isinstance(b, Constant) and b.value == 0,
            name=name,
            descriptor=descriptor,
        )

    @classmethod
    def from_measures(cls, speed: Func, scale_density: Func, ell=math.inf, ref_point=1.0, name="measures", descriptor=None):
        natural = isinstance(scale_density, Constant) and scale_density.value == 1.0
        closed = None
        if natural:
            closed = lambda x: np.asarray(x, dtype=float)  # noqa: E731
        elif scale_density.has_antiderivative:
            with np.errstate(divide="ignore", invalid="ignore"):
                s0 = float(np.asarray(scale_density.antiderivative(np.array([0.0])))[0])
            if np.isfinite(s0):
                closed = lambda x, F=scale_density.antiderivative, s0=s0: F(x) - s0  # noqa: E731
        coeffs = None
        if natural:
            coeffs = (lambda y, f=speed: 1.0 / f(y), Constant(0.0))
        return cls(
            ell=float(ell),
            log_speed_density=speed.log,
            log_scale_density=scale_density.log,
            ref_point=float(ref_point),
            coefficients=coeffs,
            natural=natural,
            scale_closed=closed,
            scale_inverse_closed=(lambda y: np.asarray(y, dtype=float)) if natural else None,
            name=name,
            descriptor=descriptor,
        )


def _checked_log_a(a, x):
    vals = np.asarray(a(x), dtype=float)
    if np.any(~(vals > 0)):
        bad = np.asarray(x)[~(vals > 0)].ravel()[:3]
        raise InvalidCoefficientError(f"diffusion coefficient a(x) must be > 0; violated at x={bad}")
    return np.log(vals)


def _coefficient_parts(a, b, c):
    """Return (speed density, scale density, ratio integral ``int_c^x b/a``)."""
    if isinstance(a, Constant) and b.has_antiderivative:
        if not a.value > 0:
            raise InvalidCoefficientError(f"diffusion coefficient a must be > 0, got {a.value}")
        bc = float(np.asarray(b.antiderivative(np.array([c])))[0])

        def ratio(x):
            return (b.antiderivative(x) - bc) / a.value
    else:
        def integrand(u):
            av = np.asarray(a(u), dtype=float)
            if np.any(~(av > 0)):
                raise InvalidCoefficientError("diffusion coefficient a(x) must be > 0 on (0, ell)")
            return b(u) / av

        def ratio(x):
            x = np.asarray(x, dtype=float)
            out = _quad.integral(integrand, c, x, levels=16, order=10)
            if not np.all(np.isfinite(out)):
                raise QuadratureError("divergent integral of b/a on a compact set")
            return out

    def speed(x):
        return np.exp(-_checked_log_a(a, x) + ratio(x))

    def scale_density(x):
        return np.exp(-ratio(x))

    return speed, scale_density, ratio


def from_coefficients(a, b, c):
    """Feller conversion: return ``(m', s')`` for the operator ``a d^2/dx^2 + b d/dx``.

    ``m'(x) = exp(int_c^x b/a) / a(x)`` and ``s'(x) = exp(-int_c^x b/a)``, so that
    ``m' s' a = 1`` pointwise.
    """
    speed, scale_d, _ = _coefficient_parts(a, b, c)
    return speed, scale_d


def _exponential_scale(kappa, c):
    """Closed-form ``s(x) = int_0^x exp(-kappa (y - c)) dy`` and its inverse."""
    if kappa == 0:
        ident = lambda x: np.asarray(x, dtype=float)  # noqa: E731
        return ident, ident
    f = math.exp(kappa * c) / kappa

    def scale(x):
        with np.errstate(over="ignore"):
            return -f * np.expm1(-kappa * np.asarray(x, dtype=float))

    def inverse(y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.log1p(-np.asarray(y, dtype=float) / f) / kappa

    return scale, inverse


def _invert_scale(spec, y, max_iter=80):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.zeros_like(y)
    pos = y > 0
    if not np.any(pos):
        return out.reshape(np.shape(y))
    yt = y[pos]
    lo = np.zeros_like(yt)
    hi = np.full_like(yt, max(spec.ref_point, 1.0))
    if math.isfinite(spec.ell):
        hi = np.minimum(hi, spec.ell)
    for _ in range(200):
        short = spec.scale(hi) < yt
        if not np.any(short):
            break
        if math.isfinite(spec.ell):
            hi = np.where(short, 0.5 * (hi + spec.ell), hi)
        else:
            hi = np.where(short, 2 * hi, hi)
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        sx = spec.scale(x)
        too_big = sx > yt
        hi = np.where(too_big, x, hi)
        lo = np.where(too_big, lo, x)
        step = (sx - yt) / spec.scale_density(x)
        cand = x - step
        bad = ~((cand > lo) & (cand < hi)) | ~np.isfinite(cand)
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        done = np.abs(cand - x) <= 1e-15 * np.maximum(np.abs(x), 1e-300)
        x = cand
        if np.all(done):
            break
    out[pos] = x
    return out.reshape(np.shape(y))


# ---------------------------------------------------------------------------
# improper integrals with divergence detection


@dataclass(frozen=True)
class ImproperIntegral:
    status: str  # "finite" | "infinite" | "inconclusive"
    log_value: float
    log_partials: tuple
    cutoffs: tuple

    @property
    def value(self) -> float:
        if self.status == "infinite":
            return math.inf
        return math.exp(self.log_value) if self.log_value > -math.inf else 0.0


def _cutoff(c, end, ell, k):
    if end == 0:
        return c * 0.5**k
    if math.isinf(ell):
        return c * 2.0**k
    return ell - (ell - c) * 0.5**k


def _levels(a, b):
    """Geometric refinement depth so the smallest piece has length <= 2**-12 (absolute) or relative."""
    length = float(np.max(np.abs(np.asarray(b) - np.asarray(a))))
    return 12 + max(0, int(math.ceil(math.log2(length)))) if length > 0 else 12


def _decide(log_partials, log_incs, threshold, growth, rtol, stall=5):
    lps = np.asarray(log_partials)
    lp = lps[-1]
    if math.isinf(lp) and lp > 0:
        return "infinite"
    if np.all(np.diff(lps[-4:]) > math.log1p(growth)) and lp > math.log(threshold):
        return "infinite"
    incs = np.asarray(log_incs)
    # increments that stop shrinking signal (at least logarithmic) divergence
    if incs.size > stall and np.all(np.diff(incs[-stall:]) >= math.log(0.99)) and incs[-1] - lp > math.log(rtol):
        return "infinite"
    if np.all(incs[-3:] - lp < math.log(rtol)):
        return "finite"
    return None


def improper_log_integral(
    logf,
    c,
    end,
    ell,
    guard=None,
    threshold=1e8,
    growth=0.01,
    min_cutoffs=8,
    max_cutoffs=64,
    rtol=1e-9,
    inner_log=None,
):
    """Integrate ``exp(logf)`` from ``c`` toward the boundary ``end`` over a geometric cutoff sequence.

    The integral is declared infinite when the partial values grow by more than
    ``growth`` per step at the final three cutoffs and exceed ``threshold``, or
    when the increments stop shrinking; finite when the final three relative
    increments are below ``rtol``.

    With ``inner_log`` the integrand is ``exp(logf(y)) * |int_c^y exp(inner_log)|``
    (an iterated integral), accumulated cutoff by cutoff.
    """
    log_partials, log_incs, cutoffs = [], [], []
    lp = -math.inf
    inner_acc = -math.inf
    prev = c
    for k in range(1, max_cutoffs + 1):
        x = _cutoff(c, end, ell, k)
        if x == prev or (end != 0 and not math.isinf(ell) and x >= ell):
            break
        if guard is not None and not guard(x):
            break
        a, b = (x, prev) if end == 0 else (prev, x)
        lev = _levels(a, b)
        if inner_log is None:
            inc = float(_quad.log_integral(logf, a, b, levels=lev))
        else:
            acc = inner_acc

            def composite(u, acc=acc, prev=prev, lev=lev):
                lo = np.minimum(u, prev)
                hi = np.maximum(u, prev)
                part = _quad.log_integral(inner_log, lo, hi, levels=lev)
                return logf(u) + np.logaddexp(acc, part)

            inc = float(_quad.log_integral(composite, a, b, levels=lev))
            inner_acc = float(np.logaddexp(inner_acc, _quad.log_integral(inner_log, a, b, levels=lev)))
        lp = float(np.logaddexp(lp, inc))
        log_partials.append(lp)
        log_incs.append(inc)
        cutoffs.append(x)
        prev = x
        if k >= min_cutoffs:
            verdict = _decide(log_partials, log_incs, threshold, growth, rtol)
            if verdict is not None:
                return ImproperIntegral(verdict, lp, tuple(log_partials), tuple(cutoffs))
    return ImproperIntegral("inconclusive", lp, tuple(log_partials), tuple(cutoffs))


def _precision_guard(spec):
    def ok(x):
        v = np.array([x])
        ls = abs(float(spec.log_scale_density(v)[0]))
        lm = abs(float(spec.log_speed_density(v)[0]))
        return np.isfinite(ls) and np.isfinite(lm) and max(ls, lm) < _LOG_PRECISION_GUARD
    return ok


def scale_status_at_ell(spec) -> str:
    """``"infinite"``, ``"finite"`` or ``"inconclusive"`` for ``s(ell)``."""
    c = spec.ref_point if spec.ref_point > 0 else min(1.0, spec.ell / 2)
    return improper_log_integral(spec.log_scale_density, c, spec.ell, spec.ell, guard=_precision_guard(spec)).status


# ---------------------------------------------------------------------------
# boundary classification


class BoundaryKind(str, enum.Enum):
    REGULAR = "Regular"
    EXIT = "Exit"
    ENTRANCE = "Entrance"
    NATURAL = "Natural"


@dataclass(frozen=True)
class BoundaryClass:
    kind: BoundaryKind
    i_value: float
    j_value: float
    end: float = 0.0

    @staticmethod
    def from_values(i_value, j_value, end=0.0):
        i_inf, j_inf = math.isinf(i_value), math.isinf(j_value)
        if not i_inf and not j_inf:
            kind = BoundaryKind.REGULAR
        elif i_inf and not j_inf:
            kind = BoundaryKind.EXIT
        elif not i_inf and j_inf:
            kind = BoundaryKind.ENTRANCE
        else:
            kind = BoundaryKind.NATURAL
        return BoundaryClass(kind, i_value, j_value, end)


def boundary_integrals(spec, end, c=None, **kw):
    """Return the improper integrals ``(I, J)`` at ``end`` (0 or ``spec.ell``).

    ``I = int dm(y) |s(y) - s(c)|`` and ``J = int ds(y) |m(c, y)|`` with ``y`` running
    from ``c`` to the boundary, which equal Feller's iterated integrals by Fubini.
    """
    c = spec.ref_point if c is None else c
    if c == 0:
        c = min(1.0, spec.ell / 2)
    end = 0 if end == 0 else spec.ell
    guard = _precision_guard(spec)
    i_int = improper_log_integral(
        spec.log_speed_density, c, end, spec.ell, guard=guard, inner_log=spec.log_scale_density, **kw
    )
    j_int = improper_log_integral(
        spec.log_scale_density, c, end, spec.ell, guard=guard, inner_log=spec.log_speed_density, **kw
    )
    return i_int, j_int


def classify_boundary(spec: DiffusionSpec, end, c=None, **kw) -> BoundaryClass:
    """Feller classification of the boundary ``end`` (``0`` or ``spec.ell``)."""
    i_int, j_int = boundary_integrals(spec, end, c, **kw)
    for name, res in (("I", i_int), ("J", j_int)):
        if res.status == "inconclusive":
            raise ClassificationInconclusiveError(
                f"{name}({end}) neither converged nor diverged within the cutoff budget",
                partial_values={
                    "I": [math.exp(v) for v in i_int.log_partials],
                    "J": [math.exp(v) for v in j_int.log_partials],
                },
            )
    return BoundaryClass.from_values(i_int.value, j_int.value, 0.0 if end == 0 else spec.ell)


def validate_spec(spec: DiffusionSpec, probes: int = 9) -> BoundaryClass:
    """Reject specs whose boundary 0 is not regular or exit; return the classification of 0."""
    c = spec.ref_point if spec.ref_point > 0 else min(1.0, spec.ell / 2)
    pts = np.geomspace(c * 1e-3, min(c * 1e3, 0.999 * spec.ell if math.isfinite(spec.ell) else c * 1e3), probes)
    with np.errstate(all="ignore"):
        lm = spec.log_speed_density(pts)
        ls = spec.log_scale_density(pts)
    if not (np.all(np.isfinite(lm)) and np.all(np.isfinite(ls))):
        raise UnsupportedSpecError("speed/scale densities must be finite and positive on (0, ell)")
    bc = classify_boundary(spec, 0)
    if bc.kind not in (BoundaryKind.REGULAR, BoundaryKind.EXIT):
        raise UnsupportedSpecError(f"boundary 0 is {bc.kind.value}; it must be regular or exit")
    return bc


# ---------------------------------------------------------------------------
# natural scale


class _ScaleTable:
    """Tabulated scale function with Newton-polished inversion.

    ``s`` is accumulated cell by cell on a node set dense near 0; between nodes
    ``s(x) = S_k + int_{x_k}^x s'`` by a short Gauss-Legendre rule, which keeps
    the inverse at rounding accuracy for a few microseconds per point.
    """

    def __init__(self, spec: DiffusionSpec, guard, n_per_octave: int = 64):
        c = spec.ref_point if spec.ref_point > 0 else min(1.0, spec.ell / 2)
        lo = np.geomspace(c * 2.0**-40, c, 40 * n_per_octave // 4, endpoint=False)
        hi_end = spec.ell if math.isfinite(spec.ell) else c * 2.0**30
        hi = [c]
        step = c / n_per_octave
        while hi[-1] < hi_end:
            nxt = min(hi[-1] + step, hi_end) if math.isfinite(spec.ell) else hi[-1] + step
            if math.isfinite(spec.ell) and nxt >= hi_end:
                break
            if not guard(nxt) or float(spec.log_scale(np.array([nxt]))[0]) > 690.0:
                break
            hi.append(nxt)
            step = max(step, nxt / n_per_octave)
        self.spec = spec
        self.x = np.concatenate([[0.0], lo, hi])
        first = float(spec.scale(self.x[1:2])[0])
        cells = np.exp(_quad.log_integral(spec.log_scale_density, self.x[1:-1], self.x[2:], levels=4, order=16))
        self.s = np.concatenate([[0.0, first], first + np.cumsum(cells)])

    def scale(self, x):
        x = np.asarray(x, dtype=float)
        k = np.clip(np.searchsorted(self.x, x, side="right") - 1, 1, self.x.size - 1)
        inside = (x >= self.x[1]) & (x <= self.x[-1])
        out = np.empty_like(x)
        if np.any(inside):
            xk = self.x[k[inside]]
            part = _quad.integral(self.spec.scale_density, xk, x[inside], levels=1, order=16)
            out[inside] = self.s[k[inside]] + part
        if np.any(~inside):
            out[~inside] = self.spec.scale(x[~inside])
        return out

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        shape = y.shape
        y = np.atleast_1d(y).ravel()
        out = np.zeros_like(y)
        inside = (y >= self.s[1]) & (y <= self.s[-1])
        if np.any(inside):
            yi = y[inside]
            x = np.interp(yi, self.s, self.x)
            for _ in range(4):
                x = x - (self.scale(x) - yi) / self.spec.scale_density(x)
            out[inside] = x
        rest = ~inside & (y > 0)
        if np.any(rest):
            out[rest] = _invert_scale(self.spec, y[rest])
        return out.reshape(shape)


def natural_scale_transform(spec: DiffusionSpec) -> DiffusionSpec:
    """Push the diffusion forward through its scale function ``y = s(x)``.

    The result lives on ``(0, s(ell))`` with unit scale density and speed density
    ``m'(s^{-1}(y)) / s'(s^{-1}(y))``.
    """
    if spec.natural and spec.scale_closed is not None:
        return spec
    c = spec.ref_point if spec.ref_point > 0 else min(1.0, spec.ell / 2)
    near0 = improper_log_integral(spec.log_scale_density, c, 0, spec.ell)
    if near0.status != "finite":
        raise UnsupportedSpecError("s(0+) = -infinity: boundary 0 is not reachable")
    far = improper_log_integral(spec.log_scale_density, c, spec.ell, spec.ell, guard=_precision_guard(spec))
    if far.status == "infinite":
        new_ell = math.inf
    elif far.status == "finite":
        new_ell = float(spec.scale(np.array([c]))[0]) + far.value
    else:
        raise ClassificationInconclusiveError("could not decide whether s(ell) is finite")

    if spec.scale_inverse_closed is not None:
        inverse = spec.scale_inverse
    else:
        inverse = _ScaleTable(spec, _precision_guard(spec)).inverse

    def log_speed(y):
        x = inverse(y)
        return spec.log_speed_density(x) - spec.log_scale_density(x)

    def diff_coef(y):
        return np.exp(-log_speed(y))

    return DiffusionSpec(
        ell=new_ell,
        log_speed_density=log_speed,
        log_scale_density=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        ref_point=float(spec.scale(np.array([spec.ref_point]))[0]),
        coefficients=(diff_coef, Constant(0.0)),
        natural=True,
        scale_closed=lambda y: np.asarray(y, dtype=float),
        scale_inverse_closed=lambda y: np.asarray(y, dtype=float),
        name=f"{spec.name} (natural scale)",
        descriptor=spec.descriptor,
    )


# ---------------------------------------------------------------------------
# infinite-QSD criterion


@dataclass(frozen=True)
class QSDCriterion:
    verdict: str  # "yes" | "no" | "inconclusive" | "unique"
    limsup: float
    speed_tail: float
    boundary: BoundaryClass
    probes: tuple = ()
    values: tuple = ()
    note: str = ""


def has_infinitely_many_qsds(spec: DiffusionSpec, c=None, min_probes=8, max_probes=60) -> QSDCriterion:
    """Decide ``m(c, ell) < inf`` and ``limsup_{x -> ell} s(x) m(x, ell) < inf`` numerically."""
    c = spec.ref_point if c is None else c
    if c == 0:
        c = min(1.0, spec.ell / 2)
    bc = classify_boundary(spec, spec.ell, c)
    if bc.kind != BoundaryKind.NATURAL:
        return QSDCriterion("unique", math.nan, math.nan, bc, note="ell is not natural: unique-QSD regime")
    guard = _precision_guard(spec)
    tail = improper_log_integral(spec.log_speed_density, c, spec.ell, spec.ell, guard=guard)
    if tail.status == "infinite":
        return QSDCriterion("no", math.inf, math.inf, bc, note="m(c, ell) = infinity")
    if tail.status == "inconclusive":
        return QSDCriterion("inconclusive", math.nan, math.nan, bc, note="m(c, ell) undecided")
    probes, logs = [], []
    for k in range(1, max_probes + 1):
        x = _cutoff(c, spec.ell, spec.ell, k)
        if not guard(x):
            break
        ls = float(spec.log_scale(np.array([x]))[0])
        mt = improper_log_integral(spec.log_speed_density, x, spec.ell, spec.ell, guard=guard)
        if mt.status == "infinite":
            return QSDCriterion("no", math.inf, tail.value, bc, note="m(x, ell) diverged")
        probes.append(x)
        logs.append(ls + mt.log_value)
        if k >= min_probes:
            lv = np.array(logs)
            if np.all(np.diff(lv[-4:]) > math.log1p(0.01)) and lv[-1] > math.log(1e8):
                return QSDCriterion("no", math.inf, tail.value, bc, tuple(probes), tuple(np.exp(lv)),
                                    note="s(x) m(x, ell) diverges")
            last = np.exp(lv[-3:])
            settled = np.all(np.abs(np.diff(last)) <= 1e-3 * last[-1]) or np.all(np.diff(lv[-3:]) <= 0)
            if settled:
                return QSDCriterion("yes", float(last.max()), tail.value, bc, tuple(probes), tuple(np.exp(lv)))
    return QSDCriterion("inconclusive", math.nan, tail.value, bc, tuple(probes), tuple(np.exp(logs)),
                        note="probe budget exhausted")
