"""End-to-end orchestration: sensitivity, bounded pruning, PTQ and baselines."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .costs import CostCounters
from .data import load_dataset
from .errors import ConfigError
from .graph import ModelGraph, build_mini_convnet, build_mini_resnet, count_flops, forward
from .pruning import (
    PruneConfig,
    PruneState,
    conditional_prune,
    fixed_ratio_prune,
    magnitude_ranking,
    prune_pool,
    validate_accuracy,
)
from .quantization import int8_forward, quantize_model
from .report import build_report
from .sensitivity import compute_sensitivity, rank_filters
from .serialize import serialized_weight_bytes


@dataclass
class MethodResult:
    """One compressed variant of the input model, evaluated on the holdout split."""

    method: str
    model: ModelGraph
    holdout_accuracy: float
    theta: float = 0.0
    layer_sparsity: dict = field(default_factory=dict)


@dataclass
class HQPOutcome:
    """Accuracies around the quantization step of an HQP run.

    ``val_*`` numbers are on the constraint split, ``holdout_*`` on the
    reporting split.  ``post_quant_breach`` is raised when the quantized
    model alone exceeds ``delta_max`` on the constraint split; the pipeline
    reports it and does not act on it.
    """

    val_baseline: float
    val_pruned: float
    val_quantized: float
    holdout_pruned: float
    holdout_quantized: float
    delta_max: float

    @property
    def pre_quant_drop(self) -> float:
        return self.val_baseline - self.val_pruned

    @property
    def post_quant_drop(self) -> float:
        return self.val_baseline - self.val_quantized

    @property
    def post_quant_breach(self) -> bool:
        return self.post_quant_drop > self.delta_max


def run_hqp(model: ModelGraph, bundle, cfg: PruneConfig | None = None, counters=None,
            bits=8, ranked=None):
    """Sensitivity, then conditional pruning, then quantization.

    The pruning bound is checked against the model's accuracy on
    ``bundle.val``; that reference evaluation is charged to
    ``counters.eval_passes`` so the loop and calibration counts stay exact.
    A precomputed ``ranked`` list skips the sensitivity stage.  Returns
    ``(qmodel, state, counters)``; ``state.outcome`` holds an
    :class:`HQPOutcome`.
    """
    cfg = cfg or PruneConfig()
    counters = counters if counters is not None else CostCounters()
    if ranked is None:
        ranked = rank_filters(compute_sensitivity(model, bundle.calib, counters=counters))
    a_val = validate_accuracy(model, bundle.val, counters, field="eval_passes")
    state = conditional_prune(model, a_val, ranked, cfg, bundle.val, counters, bundle.calib)
    qmodel = quantize_model(state.model, bundle.calib, bits=bits, counters=counters)
    state.outcome = HQPOutcome(
        val_baseline=a_val,
        val_pruned=state.accuracy,
        val_quantized=validate_accuracy(qmodel, bundle.val, counters, field="eval_passes"),
        holdout_pruned=validate_accuracy(state.model, bundle.holdout, counters, "eval_passes"),
        holdout_quantized=validate_accuracy(qmodel, bundle.holdout, counters, "eval_passes"),
        delta_max=cfg.delta_max,
    )
    return qmodel, state, counters


def hqp_result(qmodel, state: PruneState) -> MethodResult:
    return MethodResult("HQP", qmodel, state.outcome.holdout_quantized, state.theta,
                        state.layer_sparsity())


def run_baseline_variants(model: ModelGraph, bundle, cfg: PruneConfig | None = None,
                          theta=0.5, bits=8, counters=None):
    """FP32, Q8-only and P-only (magnitude-L1 at fixed ``theta``) variants.

    None of them is bound by ``delta_max``; ``cfg`` only supplies the layer
    exclusions used by the P-only baseline.
    """
    cfg = cfg or PruneConfig()
    counters = counters if counters is not None else CostCounters()
    hold = bundle.holdout

    def acc(m):
        return validate_accuracy(m, hold, counters, field="eval_passes")

    q8 = quantize_model(model, bundle.calib, bits=bits, counters=counters)
    ranking = magnitude_ranking(model)
    pruned, victims, achieved = fixed_ratio_prune(model, ranking, theta, cfg)
    state = PruneState(pruned, achieved, float("nan"), float("nan"), victims=victims,
                       layer_prunable=prune_pool(model, ranking, cfg)[1])
    return [
        MethodResult("FP32", model, acc(model)),
        MethodResult("Q8", q8, acc(q8)),
        MethodResult(f"P{round(theta * 100)}", pruned, acc(pruned), achieved,
                     state.layer_sparsity()),
    ]


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    flops: int
    weight_bytes: int
    reps: int

    @property
    def p95_over_p50(self) -> float:
        return self.p95_ms / self.p50_ms if self.p50_ms > 0 else float("nan")


def benchmark_latency(model: ModelGraph, input_shape=None, warmup=5, reps=50, seed=0):
    """Wall-clock single-sample inference latency of a float or quantized graph."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    shape = tuple(input_shape or model.input_shape)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1,) + shape).astype(np.float32)
    run = int8_forward if model.quantized else forward
    for _ in range(warmup):
        run(model, x)
    times = np.empty(reps)
    for r in range(reps):
        t0 = time.perf_counter()
        run(model, x)
        times[r] = time.perf_counter() - t0
    ms = times * 1e3
    return LatencyStats(
        mean_ms=float(ms.mean()),
        p50_ms=float(np.percentile(ms, 50)),
        p95_ms=float(np.percentile(ms, 95)),
        flops=count_flops(model, shape),
        weight_bytes=serialized_weight_bytes(model),
        reps=reps,
    )


def bundle_from_config(cfg):
    """Dataset splits described by a :class:`~hqp.config.RunConfig`."""
    kw = {}
    if cfg.source == "synthetic":
        kw = {"noise": cfg.noise, "jitter": cfg.jitter}
    return load_dataset(cfg.source, cfg.sizes(), cfg.seed, cfg.num_classes,
                        (1, cfg.image_size, cfg.image_size), cfg.idx_images or None,
                        cfg.idx_labels or None, **kw)


def model_from_config(cfg, input_shape=None) -> ModelGraph:
    """Untrained architecture described by a :class:`~hqp.config.RunConfig`."""
    shape = tuple(input_shape or (1, cfg.image_size, cfg.image_size))
    if cfg.arch == "resnet":
        return build_mini_resnet(cfg.blocks, cfg.width, cfg.num_classes, shape, cfg.seed)
    if cfg.arch == "convnet":
        return build_mini_convnet(cfg.width_multiplier, cfg.num_classes, shape, cfg.seed)
    raise ConfigError(f"unknown arch {cfg.arch!r} (expected 'resnet' or 'convnet')")


def compression_report(model: ModelGraph, bundle, cfg, counters=None, ranked=None):
    """Run HQP and the three reference variants, benchmark them all and
    return ``(report, qmodel, state)``."""
    counters = counters if counters is not None else CostCounters()
    prune_cfg = cfg.prune_config()
    qmodel, state, counters = run_hqp(model, bundle, prune_cfg, counters, cfg.bits, ranked)
    hqp_counts = counters.as_dict()
    results = run_baseline_variants(model, bundle, prune_cfg, cfg.p_only_theta, cfg.bits)
    results.append(hqp_result(qmodel, state))
    lat = {r.method: benchmark_latency(r.model, warmup=cfg.warmup, reps=cfg.reps, seed=cfg.seed)
           for r in results}
    out = state.outcome
    notes = [
        f"HQP pruning-stage drop on val: {100 * out.pre_quant_drop:.2f} points "
        f"(bound {100 * cfg.delta_max:.2f})",
        f"HQP post-quantization drop on val: {100 * out.post_quant_drop:.2f} points",
        f"HQP steps: {state.steps}, step size {state.step_size}, "
        f"terminated by {state.terminated_by}",
    ]
    if out.post_quant_breach:
        notes.append("WARNING: quantization alone pushes the val drop past delta_max")
    report = build_report(model.name, results, lat, hqp_counts, cfg.as_dict(), notes)
    return report, qmodel, state
