"""Attention-trace files, the synthetic trace generator, and report emission.

Trace format (UTF-8 NDJSON)::

    {"version": "zigzag-trace/1", "L": 2, "h": 4, "n": 64, "w": 8}
    {"layer": 0, "head": 0, "row": 0, "values": [...n floats...]}
    ...

Row ``j`` is the attention of query position ``n - w + j``; entries past the
causal limit are stored as explicit ``0.0``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import MetricsReport
from .model import LayerState, PrefillResult

TRACE_VERSION = "zigzag-trace/1"
ROW_SUM_TOL = 1e-6


class TraceError(ValueError):
    """Trace file failed validation; ``diagnostics`` lists every problem found."""

    def __init__(self, message: str, diagnostics: Sequence[str] = ()):
        self.diagnostics = list(diagnostics) or [message]
        super().__init__(message if not diagnostics else f"{message}: " + "; ".join(self.diagnostics[:5]))


class TraceVersionError(TraceError):
    pass


class TraceShapeError(TraceError):
    pass


class TraceRowError(TraceError):
    pass


@dataclass
class TraceFile:
    attention: np.ndarray  # (L, h, w, n)
    version: str = TRACE_VERSION

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.attention.shape)

    @property
    def num_layers(self) -> int:
        return self.attention.shape[0]

    @property
    def num_heads(self) -> int:
        return self.attention.shape[1]

    @property
    def window(self) -> int:
        return self.attention.shape[2]

    @property
    def n(self) -> int:
        return self.attention.shape[3]

    def to_states(self) -> list[LayerState]:
        return [LayerState(layer=l, attention=self.attention[l]) for l in range(self.num_layers)]

    def dumps(self) -> str:
        L, h, w, n = self.shape
        lines = [json.dumps({"version": self.version, "L": L, "h": h, "n": n, "w": w})]
        for l in range(L):
            for head in range(h):
                for row in range(w):
                    values = [float(v) for v in self.attention[l, head, row]]
                    lines.append(json.dumps({"layer": l, "head": head, "row": row, "values": values}))
        return "\n".join(lines) + "\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def validate_attention(attention: np.ndarray, tol: float = ROW_SUM_TOL) -> list[str]:
    """Row-level diagnostics for an ``(L, h, w, n)`` window-attention array."""
    problems = []
    L, h, w, n = attention.shape
    for l in range(L):
        for head in range(h):
            for row in range(w):
                values = attention[l, head, row]
                limit = n - w + row + 1
                where = f"layer {l} head {head} row {row}"
                if not np.all(np.isfinite(values)):
                    problems.append(f"{where}: non-finite entry")
                    continue
                if np.any(values < 0):
                    problems.append(f"{where}: negative entry")
                if np.any(values[limit:] != 0.0):
                    problems.append(f"{where}: non-zero padding beyond causal limit {limit}")
                total = float(values[:limit].sum())
                if abs(total - 1.0) > tol:
                    problems.append(f"{where}: row sums to {total:.6g}, expected 1")
    return problems


def loads_trace(text: str) -> TraceFile:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TraceShapeError("empty trace file")
    header = json.loads(lines[0])
    if header.get("version") != TRACE_VERSION:
        raise TraceVersionError(
            f"unsupported trace version {header.get('version')!r}, expected {TRACE_VERSION!r}"
        )
    try:
        L, h, n, w = (int(header[k]) for k in ("L", "h", "n", "w"))
    except KeyError as exc:
        raise TraceShapeError(f"header missing field {exc}") from None
    if min(L, h, n, w) < 1:
        raise TraceShapeError(f"header dimensions must be >= 1: {header}")
    if n < w:
        raise TraceShapeError(f"header n={n} is smaller than window w={w}")
    attention = np.zeros((L, h, w, n))
    seen = np.zeros((L, h, w), dtype=bool)
    problems = []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        l, head, row, values = rec["layer"], rec["head"], rec["row"], rec["values"]
        if not (0 <= l < L and 0 <= head < h and 0 <= row < w):
            problems.append(f"line {lineno}: index (layer {l}, head {head}, row {row}) out of range")
            continue
        if len(values) != n:
            problems.append(f"line {lineno}: layer {l} head {head} row {row} has {len(values)} values, expected {n}")
            continue
        if seen[l, head, row]:
            problems.append(f"line {lineno}: duplicate layer {l} head {head} row {row}")
        seen[l, head, row] = True
        attention[l, head, row] = values
    if problems:
        raise TraceShapeError("trace shape mismatch", problems)
    if not seen.all():
        missing = [f"layer {l} head {hh} row {r}" for l, hh, r in np.argwhere(~seen)]
        raise TraceShapeError("trace is missing rows", missing)
    problems = validate_attention(attention)
    if problems:
        raise TraceRowError("trace row validation failed", problems)
    return TraceFile(attention)


def load_trace(path) -> TraceFile:
    return loads_trace(Path(path).read_text(encoding="utf-8"))


def save_trace(trace: TraceFile, path) -> None:
    Path(path).write_text(trace.dumps(), encoding="utf-8")


def trace_from_states(states: Sequence[LayerState]) -> TraceFile:
    return TraceFile(np.stack([s.attention for s in states]))


def trace_from_prefill(result: PrefillResult) -> TraceFile:
    return trace_from_states(result.states)


@dataclass
class SynthSpec:
    """Recipe for a synthetic window-attention trace.

    Each (layer, head) picks ``ceil(kappa_l)`` hot key positions shared by its
    observation rows. Every row puts ``hot_mass`` on those positions (split by
    a symmetric Dirichlet draw) and spreads the rest uniformly over its causal
    keys. Needle positions, when given, receive ``needle_mass`` in every row.
    """

    num_layers: int
    num_heads: int
    n: int
    window: int
    kappa: Sequence[float]
    seed: int = 0
    hot_mass: float = 0.95
    concentration: float = 20.0
    needles: Sequence[int] = field(default_factory=tuple)
    needle_mass: float = 0.5

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.n, self.window) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.window > self.n:
            raise ValueError(f"window {self.window} exceeds n={self.n}")
        if len(self.kappa) != self.num_layers:
            raise ValueError(f"need {self.num_layers} kappa values, got {len(self.kappa)}")
        if any(k <= 0 for k in self.kappa):
            raise ValueError("kappa values must be positive")
        if not 0 <= self.hot_mass <= 1 or not 0 <= self.needle_mass < 1:
            raise ValueError("hot_mass must lie in [0, 1] and needle_mass in [0, 1)")
        if any(not 0 <= p < self.n for p in self.needles):
            raise ValueError(f"needle positions must lie in [0, {self.n})")


def generate_synth(spec: SynthSpec) -> TraceFile:
    L, h, n, w = spec.num_layers, spec.num_heads, spec.n, spec.window
    rng = np.random.default_rng(spec.seed)
    # hot keys must be visible to every observation row
    visible = n - w + 1
    needles = np.asarray(sorted(set(spec.needles)), dtype=np.int64)
    attention = np.zeros((L, h, w, n))
    for l in range(L):
        hot_count = min(visible, math.ceil(spec.kappa[l]))
        for head in range(h):
            hot = rng.choice(visible, size=hot_count, replace=False)
            for row in range(w):
                limit = n - w + row + 1
                weights = rng.dirichlet(np.full(hot_count, spec.concentration))
                values = np.zeros(n)
                values[:limit] = (1.0 - spec.hot_mass) / limit
                np.add.at(values, hot, spec.hot_mass * weights)
                live_needles = needles[needles < limit]
                if live_needles.size:
                    values *= 1.0 - spec.needle_mass
                    values[live_needles] += spec.needle_mass / live_needles.size
                attention[l, head, row] = values / values.sum()
    return TraceFile(attention)


# ---------------------------------------------------------------- reports

REPORT_CSV_COLUMNS = ("layer", "metric", "value")


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_CSV_COLUMNS)
    for metric, values in report.per_layer().items():
        for layer, value in enumerate(values):
            writer.writerow((layer, metric, repr(float(value)) if isinstance(value, float) else value))
    return buf.getvalue()


def emit_report(report: MetricsReport, fmt: str, path) -> Path:
    """Write ``report`` as ``json`` or ``csv``; returns the path written."""
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
