"""Experiment configuration: TOML sections, initial-measure mini-language, canonical form and hash.

Example::

    [diffusion]
    form = "coefficients"
    a = 0.5
    b = { kind = "bm_drift", speed = 1.0 }
    ell = inf
    ref_point = 1.0

    [grid]
    R = 100.0
    N = 4000

    [mc]
    seed = 7
    scheme = "exact-bm-drift"
"""

from __future__ import annotations

import hashlib
import math
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError
from .functions import from_descriptor
from .model import DiffusionSpec

SCHEMA = {
    "diffusion": {"form", "a", "b", "speed", "scale_density", "ell", "ref_point", "name"},
    "grid": {"R", "N", "grading"},
    "eigen": {"tol", "lambda"},
    "iterate": {"init", "n"},
    "mc": {"h", "horizon", "n_paths", "seed", "scheme", "bridge", "chunk", "workers", "t", "s", "burn_in"},
    "output": {"dir"},
}

DEFAULTS = {
    "grid": {"R": "auto", "N": 4000, "grading": 1.0},
    "eigen": {"tol": 1e-4},
    "iterate": {"init": "dirac x=1", "n": 30},
    "mc": {},
    "output": {},
}


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the section header)."""
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", stripped)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return no
    return None


@dataclass
class Config:
    """Parsed configuration; ``data`` holds the validated sections with defaults applied."""

    data: dict
    source: str = ""
    path: str | None = None
    _spec: DiffusionSpec | None = field(default=None, repr=False)

    @property
    def canonical(self) -> str:
        return canonical_text(self.data)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical.encode()).hexdigest()

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    @property
    def spec(self) -> DiffusionSpec:
        if self._spec is None:
            self._spec = build_spec(self.data["diffusion"], self.source)
        return self._spec

    def override(self, section: str, **values) -> None:
        """Apply command-line overrides (``None`` values are ignored)."""
        for k, v in values.items():
            if v is not None:
                self.data.setdefault(section, {})[k] = v


def _normalize(value):
    if isinstance(value, float) and math.isinf(value):
        return value
    if isinstance(value, dict):
        return {k: _normalize(value[k]) for k in sorted(value)}
    if isinstance(value, list):
        return [_normalize(v) for v in value]
    return value


def canonical_text(data: dict) -> str:
    """Deterministic TOML rendering (sorted keys)."""
    return tomli_w.dumps(_normalize(data))


def parse_config(text: str, path: str | None = None) -> Config:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"cannot parse config: {exc}", int(m.group(1)) if m else None) from None
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section, None))
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table", _line_of(text, None, section))
        for key in body:
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; expected one of {sorted(SCHEMA[section])}",
                    _line_of(text, section, key),
                )
    if "diffusion" not in raw:
        raise ConfigError("missing [diffusion] section")
    data = {name: dict(DEFAULTS.get(name, {})) for name in SCHEMA if name != "diffusion"}
    for section, body in raw.items():
        data.setdefault(section, {}).update(body)
    cfg = Config(data, text, path)
    build_spec(data["diffusion"], text)  # validate eagerly
    return cfg


def load_config(path) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(p))


def _ell(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "+inf"):
            return math.inf
        raise ConfigError(f"ell must be a number or 'inf', got {value!r}")
    return float(value)


def build_spec(d: dict, text: str = "") -> DiffusionSpec:
    form = d.get("form", "coefficients")
    ell = _ell(d.get("ell", math.inf))
    name = d.get("name", form)

    def func(key):
        if key not in d:
            raise ConfigError(f"[diffusion] form {form!r} requires key {key!r}", _line_of(text, "diffusion", None))
        try:
            return from_descriptor(d[key])
        except ConfigError as exc:
            raise ConfigError(f"[diffusion] {key}: {exc}", _line_of(text, "diffusion", key)) from None

    if form == "coefficients":
        ref = float(d.get("ref_point", min(1.0, ell / 2)))
        return DiffusionSpec.from_coefficients(func("a"), func("b"), ell=ell, ref_point=ref, name=name, descriptor=d)
    if form == "measures":
        ref = float(d.get("ref_point", min(1.0, ell / 2)))
        return DiffusionSpec.from_measures(func("speed"), func("scale_density"), ell=ell, ref_point=ref, name=name, descriptor=d)
    raise ConfigError(f"form must be 'coefficients' or 'measures', got {form!r}", _line_of(text, "diffusion", "form"))


# ---------------------------------------------------------------------------
# initial-measure mini-language


def _kv(tokens, allowed, what):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"{what}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"{what}: unknown parameter {k!r}; expected {sorted(allowed)}")
        out[k] = v
    missing = set(allowed) - set(out)
    if missing and what != "density":
        raise ConfigError(f"{what}: missing parameter(s) {sorted(missing)}")
    return out


def _split_top(text: str):
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch in ",;" and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def parse_init(text: str, grid):
    """Build a ``GridMeasure`` from the mini-language.

    ``dirac x=1`` | ``qsd lambda=0.2`` | ``uniform a=0 b=5`` (normalized speed
    measure on ``[a, b]``) | ``density table=FILE`` (CSV ``x,density`` of a
    Lebesgue density, interpolated to the nodes) |
    ``mixture [0.5*qsd lambda=0.2, 0.5*qsd lambda=0.5]``.
    """
    from .eigen import qsd
    from .measure import GridMeasure

    text = text.strip()
    if text.startswith("mixture"):
        body = text[len("mixture"):].strip()
        if not (body.startswith("[") and body.endswith("]")):
            raise ConfigError(f"mixture needs a bracketed list, got {body!r}")
        parts, weights = [], []
        for item in _split_top(body[1:-1]):
            m = re.match(r"^([0-9.eE+-]+)\s*\*\s*(.+)$", item)
            w, sub = (float(m.group(1)), m.group(2)) if m else (1.0, item)
            parts.append(parse_init(sub, grid))
            weights.append(w)
        if not parts:
            raise ConfigError("empty mixture")
        return GridMeasure.mixture(parts, weights)
    tokens = shlex.split(text)
    if not tokens:
        raise ConfigError("empty initial-measure description")
    kind, rest = tokens[0], tokens[1:]
    if kind == "dirac":
        x = float(_kv(rest, {"x"}, "dirac")["x"])
        return GridMeasure.dirac(grid, x)
    if kind == "qsd":
        lam = float(_kv(rest, {"lambda"}, "qsd")["lambda"])
        return qsd(grid, lam)
    if kind == "uniform":
        kv = _kv(rest, {"a", "b"}, "uniform")
        return GridMeasure.uniform_in_m(grid, float(kv["a"]), float(kv["b"]))
    if kind == "density":
        kv = _kv(rest, {"table"}, "density")
        if "table" not in kv:
            raise ConfigError("density: missing parameter 'table'")
        data = np.loadtxt(kv["table"], delimiter=",", ndmin=2)
        leb = np.interp(grid.nodes, data[:, 0], data[:, 1], left=0.0, right=0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.where(leb > 0, leb / grid.speed_at_nodes, 0.0)
        return GridMeasure.from_density(grid, dens, label=f"density {kv['table']}")
    raise ConfigError(f"unknown initial measure {kind!r}; expected dirac, qsd, uniform, density or mixture")
