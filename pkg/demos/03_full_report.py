"""
End-to-end comparison table
===========================

Run the whole pipeline on the default mini-resnet and compare it against
the FP32 model, quantization alone and 50% magnitude pruning.  Finishes
with the analytic cost of this run against quantization-aware training.
"""

from hqp.config import RunConfig
from hqp.costs import CostCounters, compare_cost_models, measure_pass_costs
from hqp.pipeline import bundle_from_config, compression_report, model_from_config
from hqp.report import render_text
from hqp.train import train_baseline

# %%
cfg = RunConfig(reps=30)
bundle = bundle_from_config(cfg)
model, acc = train_baseline(model_from_config(cfg), bundle.train, cfg.epochs, cfg.lr, cfg.seed,
                            bundle.holdout)
print(f"baseline holdout accuracy {acc:.4f}\n")

# %%
# Latencies are single-sample numpy timings on this machine.  The integer
# path is emulated, so it is not expected to beat float BLAS here; the size
# and accuracy columns are the meaningful ones.
report, qmodel, state = compression_report(model, bundle, cfg)
print(render_text(report))

# %%
# Cost of this run in gradient-pass and inference-pass units, against five
# epochs of quantization-aware training over the training split.
c_grad, c_inf = measure_pass_costs(model)
ratio, c_hqp, c_qat = compare_cost_models(CostCounters(**report.counters), 5, len(bundle.train),
                                          c_grad, c_inf)
print(f"C_grad {c_grad:.3e}s, C_inf {c_inf:.3e}s; HQP {c_hqp:.2f}s vs QAT {c_qat:.2f}s "
      f"(ratio {ratio:.1f})")
