"""Diagonal-Fisher filter sensitivity and the ascending saliency ranking.

The sensitivity of a filter is the calibration-set mean of the squared L2
norm of the per-sample loss gradient with respect to that filter's weights.
Filters that meet at a residual add are scored as one unit whose value is
the sum of its members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import resolve_counters
from .errors import NonFiniteGradientError, PruningError
from .graph import FilterId, ModelGraph, check_shapes, forward
from .tensor import GradTape


@dataclass(frozen=True)
class SensitivityRecord:
    unit: tuple  # FilterIds; more than one for a residual group
    s_value: float

    @property
    def key(self) -> FilterId:
        """Tie-break key: smallest member ``(layer_index, channel_index)``."""
        return min(self.unit)

    @property
    def is_group(self) -> bool:
        return len(self.unit) > 1


class RankedSaliencyList:
    """Records sorted ascending by ``s_value``, ties by :attr:`SensitivityRecord.key`."""

    tie_break = "(layer_index, channel_index) ascending"

    def __init__(self, records):
        self.records = list(records)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def units(self):
        return [r.unit for r in self.records]

    def filters(self):
        return [f for r in self.records for f in r.unit]


def prunable_units(model: ModelGraph):
    """Every prunable unit of the graph, in layer/channel order.

    Lone units are the output channels of ``conv`` and ``dense`` layers
    outside residual groups; each residual group is a single unit.
    Classifier rows are never prunable.
    """
    groups = model.residual_groups
    grouped = {f for g in groups for f in g}
    units = []
    for i, layer in enumerate(model.layers):
        if layer.kind not in ("conv", "dense"):
            continue
        for c in range(layer.out_channels):
            f = FilterId(i, c)
            if f not in grouped:
                units.append((f,))
    units.extend(groups)
    return sorted(units, key=min)


def _loss(tape, out, targets, loss, sigma):
    if loss == "cross_entropy":
        return tape.softmax_cross_entropy(out, targets, reduction="sum")
    if loss == "gaussian_nll":
        return tape.gaussian_nll(out, targets, sigma, reduction="sum")
    if loss == "sum":
        return tape.sum(out)
    raise ValueError(f"unknown loss {loss!r}")


def per_sample_filter_grad_norms(model, x, targets, loss="cross_entropy", sigma=1.0):
    """Squared per-sample gradient norms, ``{layer: array[N, Cout]}`` (float64)."""
    tape = GradTape()
    out = forward(model, x, tape=tape)
    _loss(tape, out, targets, loss, sigma)
    grads = tape.backward(per_sample=True)
    norms = {}
    for i, layer in enumerate(model.layers):
        if layer.kind not in ("conv", "dense"):
            continue
        g = grads.get((i, "weight"))
        if g is None:
            norms[i] = np.zeros((len(x), layer.out_channels))
            continue
        g = g.reshape(g.shape[0], g.shape[1], -1).astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(i)
        norms[i] = np.einsum("nck,nck->nc", g, g)
    return norms


def filter_sensitivity(model: ModelGraph, calib, loss="cross_entropy", sigma=1.0,
                       batch_size=50, counters=None):
    """Per-filter sensitivity ``{layer: array[Cout]}`` for conv/dense layers.

    ``calib`` is a :class:`~hqp.data.Dataset` (``x`` inputs, ``y`` targets).
    Gradients follow unit-batch semantics: batch norm runs on stored
    statistics and the loss is summed, so each sample's gradient is exactly
    the gradient of its own loss.  Counts ``len(calib)`` gradient passes.
    """
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    check_shapes(model)
    chunks = {}
    for s in range(0, len(calib), batch_size):
        xb, yb = calib.x[s : s + batch_size], calib.y[s : s + batch_size]
        for i, v in per_sample_filter_grad_norms(model, xb, yb, loss, sigma).items():
            chunks.setdefault(i, []).append(v)
    resolve_counters(counters).grad_passes += len(calib)
    n = len(calib)
    # sorted reduction: the result does not depend on sample order
    return {
        i: np.sort(np.concatenate(v, axis=0), axis=0).sum(axis=0) / n for i, v in chunks.items()
    }


def compute_sensitivity(model: ModelGraph, calib, loss="cross_entropy", sigma=1.0,
                        batch_size=50, counters=None):
    """Sensitivity record for every prunable unit of ``model``.

    A residual group scores the sum of its members.  See
    :func:`filter_sensitivity` for the estimator.
    """
    per_filter = filter_sensitivity(model, calib, loss, sigma, batch_size, counters)
    return [
        SensitivityRecord(u, float(sum(per_filter[f.layer_index][f.channel_index] for f in u)))
        for u in prunable_units(model)
    ]


def rank_filters(records) -> RankedSaliencyList:
    """Stable ascending sort by sensitivity; ties by ``(layer, channel)``."""
    seen = set()
    for r in records:
        for f in r.unit:
            if f in seen:
                raise PruningError(f"duplicate filter {tuple(f)} in sensitivity records")
            seen.add(f)
    return RankedSaliencyList(sorted(records, key=lambda r: (r.s_value, r.key)))


def dump_sensitivity(ranked, path):
    """Write ``layer_index channel_index s_value`` lines in ranked order.

    A residual group is written once, under its key filter.
    """
    with open(path, "w") as f:
        for r in ranked:
            k = r.key
            f.write(f"{k.layer_index} {k.channel_index} {r.s_value!r}\n")


def load_sensitivity(path, model: ModelGraph) -> RankedSaliencyList:
    """Read a dump written by :func:`dump_sensitivity` back against ``model``."""
    by_key = {min(u): u for u in prunable_units(model)}
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                li, ci, s = line.split()
                key = FilterId(int(li), int(ci))
                records.append(SensitivityRecord(by_key[key], float(s)))
            except (ValueError, KeyError):
                raise PruningError(f"{path}:{lineno}: bad sensitivity record {line.strip()!r}")
    return rank_filters(records)
