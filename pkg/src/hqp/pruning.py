"""Structural filter removal and the accuracy-bounded pruning loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costs import resolve_counters
from .errors import PruningError, ResidualGroupError
from .graph import WEIGHTED, FilterId, ModelGraph, check_shapes, predict
from .sensitivity import (
    RankedSaliencyList,
    SensitivityRecord,
    filter_sensitivity,
    prunable_units,
    rank_filters,
)


@dataclass
class PruneConfig:
    """Step size, tolerance and exclusions for :func:`conditional_prune`.

    ``exclude`` lists layer indices whose lone filters are never pruned;
    ``None`` means the first conv layer and the classifier.  A residual
    group is excluded only when all of its member layers are.
    """

    delta_fraction: float = 0.01
    delta_max: float = 0.015
    exclude: tuple | None = None
    refresh_sensitivity: bool = False

    def __post_init__(self):
        if not 0 < self.delta_fraction <= 1:
            raise ValueError(f"delta_fraction must be in (0, 1], got {self.delta_fraction}")
        if self.delta_max < 0:
            raise ValueError(f"delta_max must be >= 0, got {self.delta_max}")

    def excluded_layers(self, model: ModelGraph):
        if self.exclude is not None:
            return frozenset(self.exclude)
        convs = model.conv_layers()
        heads = [i for i, layer in enumerate(model.layers) if layer.kind == "classifier"]
        return frozenset(convs[:1] + heads)


@dataclass
class StepRecord:
    step: int
    theta: float
    accuracy: float
    accepted: bool
    victims: tuple = ()


@dataclass
class PruneState:
    model: ModelGraph
    theta: float
    accuracy: float
    baseline_accuracy: float
    victims: list = field(default_factory=list)
    history: list = field(default_factory=list)
    prunable_filters: int = 0
    step_size: int = 0
    terminated_by: str = "exhausted"
    layer_prunable: dict = field(default_factory=dict)
    outcome: object = None  # set by the full pipeline

    @property
    def steps(self) -> int:
        return len(self.history)

    def layer_sparsity(self):
        """``{layer: (pruned, prunable)}`` over the loop's prunable pool."""
        pruned = {}
        for f in self.victims:
            pruned[f.layer_index] = pruned.get(f.layer_index, 0) + 1
        return {l: (pruned.get(l, 0), n) for l, n in sorted(self.layer_prunable.items())}

    def history_lines(self):
        return [
            f"{r.step} {r.theta:.6f} {r.accuracy:.6f} {int(r.accepted)}" for r in self.history
        ]


def _unit_excluded(unit, excluded):
    return all(f.layer_index in excluded for f in unit)


def remove_filters(model: ModelGraph, victims, exclude=()) -> ModelGraph:
    """Return a smaller dense graph with ``victims`` deleted.

    Each victim's output channel disappears from its conv/dense kernel, bias
    and batch-norm statistics, and the matching input slice disappears from
    every consumer.  Residual groups must be removed all-or-none.
    """
    if model.quantized:
        raise PruningError("cannot prune a quantized graph")
    victims = set(FilterId(*v) for v in victims)
    exclude = set(exclude)
    n_layers = len(model.layers)
    for f in victims:
        if not 0 <= f.layer_index < n_layers:
            raise PruningError(f"filter {tuple(f)}: layer out of range")
        layer = model.layers[f.layer_index]
        if layer.kind not in ("conv", "dense"):
            raise PruningError(f"filter {tuple(f)}: layer kind {layer.kind!r} is not prunable")
        if not 0 <= f.channel_index < layer.out_channels:
            raise PruningError(f"filter {tuple(f)}: channel out of range")
    grouped = set()
    for g in model.residual_groups:
        hit = victims.intersection(g)
        if hit and len(hit) != len(g):
            raise ResidualGroupError(
                f"residual group violation: group {[tuple(f) for f in g]} only partially selected"
            )
        grouped.update(g)
        if hit and _unit_excluded(g, exclude):
            raise PruningError(f"residual group at channel {g[0].channel_index} is excluded")
    for f in victims - grouped:
        if f.layer_index in exclude:
            raise PruningError(f"filter {tuple(f)} belongs to excluded layer")

    masks = {}
    for f in victims:
        if f.layer_index not in masks:
            masks[f.layer_index] = np.ones(model.layers[f.layer_index].out_channels, bool)
        masks[f.layer_index][f.channel_index] = False
    for li, m in masks.items():
        if not m.any():
            raise PruningError(f"pruning would remove every channel of layer {li}")

    out = model.copy()
    cur = None
    stack = []
    for i, layer in enumerate(out.layers):
        p = layer.params
        if layer.kind in WEIGHTED:
            if cur is not None:
                p["weight"] = np.ascontiguousarray(p["weight"][:, cur])
            keep = masks.get(i)
            if keep is not None:
                p["weight"] = np.ascontiguousarray(p["weight"][keep])
                if "bias" in p:
                    p["bias"] = np.ascontiguousarray(p["bias"][keep])
            cur = keep
        elif layer.kind == "batchnorm":
            if cur is not None:
                layer.params = {k: np.ascontiguousarray(v[cur]) for k, v in p.items()}
        elif layer.kind == "residual_begin":
            stack.append(cur)
        elif layer.kind == "residual_end":
            skip = stack.pop()
            if (skip is None) != (cur is None) or (
                skip is not None and not np.array_equal(skip, cur)
            ):
                raise ResidualGroupError(f"residual group violation at layer {i}")
    check_shapes(out)
    return out


def validate_accuracy(model: ModelGraph, dataset, counters=None, field="inference_passes"):
    """Top-1 accuracy; charges ``len(dataset)`` passes to ``counters.<field>``."""
    if len(dataset) == 0:
        raise ValueError("validation set is empty")
    if model.quantized:
        from .quantization import int8_predict

        pred = int8_predict(model, dataset.x)
    else:
        pred = predict(model, dataset.x)
    c = resolve_counters(counters)
    setattr(c, field, getattr(c, field) + len(dataset))
    return float(np.mean(pred == dataset.y))


def _check_ranking(model, ranked):
    expected = {u for u in prunable_units(model)}
    got = [tuple(r.unit) for r in ranked]
    if len(set(got)) != len(got) or set(got) != expected:
        raise PruningError("ranked list is inconsistent with the model's prunable units")


def prune_pool(model: ModelGraph, ranked, cfg: PruneConfig):
    """Ordered units the loop may consume, and ``{layer: prunable count}``.

    Excluded units are dropped.  For every layer whose channels are all
    candidates, the highest-ranked unit touching it is held back so that no
    layer can be emptied.
    """
    excluded = cfg.excluded_layers(model)
    units = [tuple(r.unit) for r in ranked]
    pool = [u for u in units if not _unit_excluded(u, excluded)]
    candidates = {}
    for u in pool:
        for f in u:
            candidates[f.layer_index] = candidates.get(f.layer_index, 0) + 1
    needs_keeper = {
        l for l, n in candidates.items() if n == model.layers[l].out_channels
    }
    keepers = set()
    for u in reversed(pool):
        layers = {f.layer_index for f in u}
        if layers & needs_keeper:
            keepers.add(u)
            needs_keeper -= layers
    pool = [u for u in pool if u not in keepers]
    layer_prunable = {}
    for u in pool:
        for f in u:
            layer_prunable[f.layer_index] = layer_prunable.get(f.layer_index, 0) + 1
    return pool, layer_prunable


def step_size(total_filters, delta_fraction):
    return max(1, math.ceil(delta_fraction * total_filters))


def _rerank(model, accepted_model, victims, pool_rest, calib, counters):
    """Re-score the remaining pool on the pruned model (original ids kept)."""
    kept = surviving_channels(model, victims)
    s_now = filter_sensitivity(accepted_model, calib, counters=counters)
    scored = []
    for u in pool_rest:
        s = 0.0
        for f in u:
            s += float(s_now[f.layer_index][kept[f.layer_index].index(f.channel_index)])
        scored.append(SensitivityRecord(u, s))
    return [r.unit for r in rank_filters(scored)]


def conditional_prune(
    model: ModelGraph,
    a_baseline: float,
    ranked: RankedSaliencyList,
    cfg: PruneConfig,
    val,
    counters=None,
    calib=None,
) -> PruneState:
    """Remove the next ``delta`` filters of the ranking while the accuracy
    drop on ``val`` stays within ``cfg.delta_max``; stop at the first
    violating step.

    Every candidate is built from the original graph with the cumulative
    victim set.  Residual groups are taken whole, so a step can overshoot
    ``delta`` by up to one group.
    """
    if len(val) == 0:
        raise ValueError("validation set is empty")
    _check_ranking(model, ranked)
    if cfg.refresh_sensitivity and calib is None:
        raise ValueError("refresh_sensitivity needs the calibration set")
    counters = resolve_counters(counters)
    pool, layer_prunable = prune_pool(model, ranked, cfg)
    total = sum(len(u) for u in pool)
    delta = step_size(total, cfg.delta_fraction)
    state = PruneState(
        model=model,
        theta=0.0,
        accuracy=a_baseline,
        baseline_accuracy=a_baseline,
        prunable_filters=total,
        step_size=delta,
        layer_prunable=layer_prunable,
    )
    accepted = []
    cursor = 0
    step = 0
    while cursor < len(pool):
        batch = []
        n = 0
        while cursor < len(pool) and n < delta:
            batch.append(pool[cursor])
            n += len(pool[cursor])
            cursor += 1
        victims = accepted + [f for u in batch for f in u]
        candidate = remove_filters(model, victims)
        before = counters.inference_passes
        acc = validate_accuracy(candidate, val, counters)
        counters.loop_inference_passes += counters.inference_passes - before
        counters.prune_steps += 1
        step += 1
        theta = len(victims) / total
        ok = a_baseline - acc <= cfg.delta_max
        state.history.append(StepRecord(step, theta, acc, ok, tuple(f for u in batch for f in u)))
        if not ok:
            state.terminated_by = "rejection"
            break
        accepted = victims
        state.model, state.accuracy, state.theta = candidate, acc, theta
        state.victims = list(accepted)
        if cfg.refresh_sensitivity and cursor < len(pool):
            pool[cursor:] = _rerank(model, candidate, accepted, pool[cursor:], calib, counters)
    return state


def magnitude_ranking(model: ModelGraph) -> RankedSaliencyList:
    """Rank units by the L1 norm of their weights (summed over a group)."""
    recs = []
    for u in prunable_units(model):
        s = 0.0
        for f in u:
            s += float(np.abs(model.layers[f.layer_index].params["weight"][f.channel_index]).sum())
        recs.append(SensitivityRecord(u, s))
    return rank_filters(recs)


def fixed_ratio_prune(model: ModelGraph, ranked, theta: float, cfg: PruneConfig | None = None):
    """Remove the lowest-ranked units until a fraction ``theta`` of the pool is gone.

    No accuracy constraint.  Returns ``(pruned_model, victims, achieved_theta)``.
    """
    cfg = cfg or PruneConfig()
    pool, _ = prune_pool(model, ranked, cfg)
    total = sum(len(u) for u in pool)
    target = math.ceil(theta * total - 1e-9)
    victims = []
    for u in pool:
        if len(victims) >= target:
            break
        victims.extend(u)
    return remove_filters(model, victims), victims, (len(victims) / total if total else 0.0)


def surviving_channels(model: ModelGraph, victims):
    """``{layer: [original channel indices kept]}`` for weighted layers."""
    out = {}
    for i in model.weighted_layers():
        gone = {f.channel_index for f in victims if f.layer_index == i}
        out[i] = [c for c in range(model.layers[i].out_channels) if c not in gone]
    return out
