"""
Sensitivity ranking and accuracy-bounded pruning
================================================

Train a small residual net, score every filter by its diagonal Fisher
sensitivity, then prune in small steps for as long as the validation
accuracy stays within the allowed drop.
"""

import numpy as np

from hqp.data import load_dataset
from hqp.graph import build_mini_resnet, count_flops
from hqp.pruning import PruneConfig, conditional_prune, validate_accuracy
from hqp.sensitivity import compute_sensitivity, rank_filters
from hqp.train import train_baseline

# %%
# A reduced synthetic dataset keeps the demo under a minute.
bundle = load_dataset(seed=0, sizes={"train": 4000, "calib": 500, "val": 1000, "holdout": 1000})
model, holdout_acc = train_baseline(build_mini_resnet(2, width=16), bundle.train, epochs=4,
                                    holdout=bundle.holdout)
print(f"trained {model.name}: holdout accuracy {holdout_acc:.4f}")

# %%
# One per-sample gradient pass over the calibration split gives S for every
# unit.  Residual groups (channels tied together by a skip connection) are
# scored as one unit, the sum of their members.
ranked = rank_filters(compute_sensitivity(model, bundle.calib))
s = np.array([r.s_value for r in ranked])
print(f"{len(ranked)} units; S ranges from {s.min():.2e} to {s.max():.2e}")
for r in list(ranked)[:5]:
    print("  least sensitive:", [tuple(f) for f in r.unit], f"S={r.s_value:.2e}")

# %%
# Prune under two budgets.  Every candidate is checked against the baseline
# validation accuracy; the first step that exceeds the budget ends the loop.
# There is no fine-tuning between steps, so at this scale each removed
# filter costs close to a point and the achievable sparsity stays small.
a_val = validate_accuracy(model, bundle.val)
for delta_max in (0.015, 0.06):
    state = conditional_prune(model, a_val, ranked, PruneConfig(0.01, delta_max), bundle.val)
    print(f"\ndelta_max {delta_max:.3f}: theta {state.theta:.3f} after {state.steps} steps, "
          f"val {a_val:.4f} -> {state.accuracy:.4f}, terminated by {state.terminated_by}")
    print(f"  FLOPs {count_flops(model)} -> {count_flops(state.model)}")
    for line in state.history_lines()[-3:]:
        print("  ", line)
