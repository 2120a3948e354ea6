"""
Outliers, calibration and integer inference
===========================================

A single large weight stretches the min-max range and coarsens the grid for
every other value.  KL calibration clips the tail instead.  The second half
quantizes a trained network and compares integer and float predictions.
"""

import numpy as np

from hqp.data import load_dataset
from hqp.graph import build_mini_convnet, predict
from hqp.quantization import (
    calibrate_kl,
    calibrate_minmax,
    int8_predict,
    quant_error_stats,
    quantize_model,
)
from hqp.serialize import serialized_weight_bytes
from hqp.train import train_baseline

# %%
# A body of 100k uniform values with one planted outlier at 100.
r = np.random.default_rng(0)
body = r.uniform(0.0, 1.0, 100_000)
planted = np.append(body, 100.0)

for name, params in [("min-max with outlier", calibrate_minmax(planted)),
                     ("min-max, outlier removed", calibrate_minmax(body)),
                     ("KL with outlier", calibrate_kl(planted))]:
    mse, worst = quant_error_stats(body, params)
    print(f"{name:26s} scale {params.scale:.3e}  body MSE {mse:.3e}  max err {worst:.3e}")

# %%
# Post-training quantization of a trained net: weights per tensor with
# min-max, activations with KL over the calibration split.
bundle = load_dataset(seed=1, sizes={"train": 3000, "calib": 300, "val": 300, "holdout": 1000})
model, acc = train_baseline(build_mini_convnet(0.25), bundle.train, epochs=5,
                            holdout=bundle.holdout)
qmodel = quantize_model(model, bundle.calib)
pf, pq = predict(model, bundle.holdout.x), int8_predict(qmodel, bundle.holdout.x)
print(f"\nfloat accuracy {acc:.4f}, int8 accuracy {np.mean(pq == bundle.holdout.y):.4f}, "
      f"argmax agreement {np.mean(pf == pq):.4f}")
print(f"weight payload {serialized_weight_bytes(model)} -> {serialized_weight_bytes(qmodel)} bytes")
