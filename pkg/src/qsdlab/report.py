"""CSV emission and run reports.

Floats are written with 17 significant digits through ``%``-formatting, which
does not depend on the locale, so reruns with equal inputs give byte-identical
files.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    try:
        f = float(v)  # numpy scalars
    except (TypeError, ValueError):
        return str(v)
    if hasattr(v, "dtype") and v.dtype.kind in "iu":
        return str(int(v))
    return format_value(f)


def csv_text(columns, rows) -> str:
    lines = [",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, expected {len(columns)}")
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def emit_csv(path, columns, rows) -> Path:
    """Write a CSV table; an empty ``rows`` gives a header-only file."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="", encoding="ascii") as fh:
        fh.write(csv_text(columns, rows))
    return p


@dataclass
class Section:
    columns: tuple
    rows: list
    units: str = ""


@dataclass
class RunReport:
    """Results of one command: tables, summary lines, warnings and provenance."""

    command: str
    config_hash: str = ""
    seed: int | None = None
    sections: dict = field(default_factory=dict)
    summary: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    started: float = field(default_factory=time.time)
    wall_clock: float = 0.0

    def add(self, name: str, columns, rows, units: str = "") -> None:
        self.sections[name] = Section(tuple(columns), list(rows), units)

    def line(self, text: str) -> None:
        self.summary.append(text)

    def finish(self) -> "RunReport":
        self.wall_clock = time.time() - self.started
        return self

    def write(self, outdir) -> list:
        """Write one CSV per section plus ``summary.txt`` (the only file with wall-clock time)."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        written = [emit_csv(out / f"{name}.csv", s.columns, s.rows) for name, s in self.sections.items()]
        meta = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "sections": {k: {"columns": list(s.columns), "units": s.units} for k, s in self.sections.items()},
            "warnings": self.warnings,
        }
        text = "\n".join(self.summary) + "\n\n" + json.dumps(meta, indent=2, sort_keys=True)
        text += f"\nwall_clock_seconds: {self.wall_clock:.3f}\n"
        (out / "summary.txt").write_text(text)
        written.append(out / "summary.txt")
        return written
