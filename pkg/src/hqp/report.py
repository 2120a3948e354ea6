"""Comparison table with latency, speedup, size, accuracy and sparsity columns."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = (
    "Method",
    "Latency (ms)",
    "Speedup (x)",
    "Model Size Reduction",
    "Accuracy Drop (Top-1)",
    "Sparsity Ratio (theta)",
    "Energy Ratio",
)

_LABELS = {"FP32": "Baseline (FP32)", "Q8": "Quantization Only (Q8)", "HQP": "HQP"}


def method_label(method: str) -> str:
    if method in _LABELS:
        return _LABELS[method]
    if method.startswith("P") and method[1:].isdigit():
        return f"Pruning Only ({method})"
    return method


@dataclass(frozen=True)
class MethodRow:
    method: str
    latency_ms: float
    speedup: float
    size_reduction_pct: float
    accuracy_drop_pct: float
    sparsity_pct: float
    energy_ratio: float
    p50_ms: float = float("nan")
    p95_ms: float = float("nan")
    flops: int = 0
    weight_bytes: int = 0

    def cells(self):
        return (
            method_label(self.method),
            f"{self.latency_ms:.3f}",
            f"{self.speedup:.2f}",
            f"{self.size_reduction_pct:.1f}%",
            f"{self.accuracy_drop_pct:.1f}%",
            f"{self.sparsity_pct:.1f}%",
            f"{self.energy_ratio:.2f}",
        )


@dataclass
class RunReport:
    model_label: str
    rows: list
    layer_sparsity: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def energy_ratio(self):
        """Per-method energy reduction; equals the speedup at constant power."""
        return {r.method: r.energy_ratio for r in self.rows}

    def row(self, method):
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def build_report(model_label, results, latencies, counters=None, config=None, notes=()):
    """Assemble a :class:`RunReport`.

    ``results`` is a list of :class:`~hqp.pipeline.MethodResult` whose first
    entry is the FP32 baseline; ``latencies`` maps each method to its
    :class:`~hqp.pipeline.LatencyStats`.  Accuracy drops are absolute
    percentage points of holdout top-1 against the baseline.
    """
    if not results:
        raise ValueError("no results to report")
    base = results[0]
    base_lat = latencies[base.method]
    rows = []
    sparsity = {}
    for res in results:
        lat = latencies[res.method]
        speedup = base_lat.mean_ms / lat.mean_ms
        rows.append(
            MethodRow(
                method=res.method,
                latency_ms=lat.mean_ms,
                speedup=speedup,
                size_reduction_pct=100.0 * (1.0 - lat.weight_bytes / base_lat.weight_bytes),
                accuracy_drop_pct=100.0 * (base.holdout_accuracy - res.holdout_accuracy),
                sparsity_pct=100.0 * res.theta,
                energy_ratio=speedup,
                p50_ms=lat.p50_ms,
                p95_ms=lat.p95_ms,
                flops=lat.flops,
                weight_bytes=lat.weight_bytes,
            )
        )
        if res.method == "HQP":
            sparsity = dict(res.layer_sparsity)
    return RunReport(model_label, rows, sparsity, dict(counters or {}), dict(config or {}),
                     list(notes))


def _aligned(header, body):
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in body)
    return lines


def render_text(report: RunReport) -> str:
    lines = [f"Model: {report.model_label}", ""]
    lines += _aligned(COLUMNS, [r.cells() for r in report.rows])
    lines += ["", "Latency spread (ms): method p50 p95 p95/p50, FLOPs, weight bytes"]
    for r in report.rows:
        ratio = r.p95_ms / r.p50_ms if r.p50_ms > 0 else float("nan")
        lines.append(
            f"  {r.method}: {r.p50_ms:.3f} {r.p95_ms:.3f} {ratio:.2f}, {r.flops}, {r.weight_bytes}"
        )
    if report.layer_sparsity:
        lines += ["", "Per-layer sparsity (HQP)"]
        body = [
            (str(l), str(p), str(n), f"{100.0 * p / n:.1f}%" if n else "-")
            for l, (p, n) in sorted(report.layer_sparsity.items())
        ]
        lines += _aligned(("layer", "pruned", "prunable", "sparsity"), body)
    if report.counters:
        lines += ["", "Cost counters"]
        lines += [f"  {k} = {v}" for k, v in report.counters.items()]
    if report.config:
        lines += ["", "Config"]
        lines += [f"  {k} = {v}" for k, v in report.config.items()]
    if report.notes:
        lines += ["", "Notes"] + [f"  {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def render_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "latency_ms", "speedup", "size_reduction_pct", "accuracy_drop_pct",
                "sparsity_pct", "energy_ratio", "p50_ms", "p95_ms", "flops", "weight_bytes"])
    for r in report.rows:
        w.writerow([r.method, repr(r.latency_ms), repr(r.speedup), repr(r.size_reduction_pct),
                    repr(r.accuracy_drop_pct), repr(r.sparsity_pct), repr(r.energy_ratio),
                    repr(r.p50_ms), repr(r.p95_ms), r.flops, r.weight_bytes])
    return buf.getvalue()


def emit_report(report: RunReport, path):
    """Write the text table to ``path`` and the CSV next to it (``.csv``).

    Returns the paths written.
    """
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    if csv_path == path:
        csv_path = path.with_name(path.name + ".table.csv")
    path.write_text(render_text(report))
    csv_path.write_text(render_csv(report))
    return path, csv_path


def read_report_csv(path):
    """Rows of a CSV written by :func:`emit_report` as :class:`MethodRow`."""
    with open(path, newline="") as f:
        rows = []
        for rec in csv.DictReader(f):
            rows.append(
                MethodRow(
                    rec["method"],
                    *(float(rec[k]) for k in ("latency_ms", "speedup", "size_reduction_pct",
                                              "accuracy_drop_pct", "sparsity_pct",
                                              "energy_ratio", "p50_ms", "p95_ms")),
                    flops=int(rec["flops"]),
                    weight_bytes=int(rec["weight_bytes"]),
                )
            )
    return rows
