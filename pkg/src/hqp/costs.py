"""Pass counters and the analytic HQP-vs-QAT cost comparison."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class CostCounters:
    """Sample-level pass counts.

    ``inference_passes`` counts everything the cost model charges as
    ``C_inf`` (pruning-loop validation and quantization calibration);
    ``loop_inference_passes`` is the pruning-loop share of it.
    ``eval_passes`` tracks baseline/holdout evaluations outside the model.
    """

    grad_passes: int = 0
    inference_passes: int = 0
    loop_inference_passes: int = 0
    prune_steps: int = 0
    eval_passes: int = 0

    def reset(self):
        self.grad_passes = self.inference_passes = self.loop_inference_passes = 0
        self.prune_steps = self.eval_passes = 0

    def as_dict(self):
        return asdict(self)


COUNTERS = CostCounters()


def resolve_counters(counters):
    return COUNTERS if counters is None else counters


def hqp_cost(n_calib, t_prune, n_val, c_grad, c_inf):
    """``N_calib * C_grad + T_prune * N_val * C_inf``."""
    return n_calib * c_grad + t_prune * n_val * c_inf


def qat_cost(n_epochs, n_train, c_grad):
    """``N_epochs * N_train * C_grad``."""
    return n_epochs * n_train * c_grad


def compare_cost_models(counters, n_epochs, n_train, c_grad=None, c_inf=None, model=None):
    """Return ``(C_QAT / C_HQP, C_HQP, C_QAT)`` from recorded counters.

    Unit costs default to values timed with :func:`measure_pass_costs` on
    ``model``; pass them explicitly for a purely analytic comparison.
    """
    if c_grad is None or c_inf is None:
        if model is None:
            raise ValueError("need explicit c_grad/c_inf or a model to time")
        c_grad, c_inf = measure_pass_costs(model)
    c_hqp = counters.grad_passes * c_grad + counters.loop_inference_passes * c_inf
    c_qat = qat_cost(n_epochs, n_train, c_grad)
    ratio = c_qat / c_hqp if c_hqp > 0 else float("inf")
    return ratio, c_hqp, c_qat


def measure_pass_costs(model, reps=20, seed=0):
    """Median seconds for one single-sample forward+backward and forward pass."""
    from .graph import forward
    from .tensor import GradTape

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1,) + tuple(model.input_shape)).astype(model.dtype)
    label = np.zeros(1, dtype=np.int64)
    inf_t, grad_t = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        forward(model, x)
        inf_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        tape = GradTape()
        tape.softmax_cross_entropy(forward(model, x, tape=tape), label, reduction="sum")
        tape.backward()
        grad_t.append(time.perf_counter() - t0)
    return float(np.median(grad_t)), float(np.median(inf_t))
