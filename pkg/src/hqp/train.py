"""Minimal SGD trainer producing the pre-trained input model."""

from __future__ import annotations

import numpy as np

from .errors import TrainingDivergedError
from .graph import ModelGraph, forward, predict
from .tensor import GradTape


def accuracy(model: ModelGraph, data) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(model, data.x) == data.y))


def train_baseline(
    model: ModelGraph,
    train,
    epochs=5,
    lr=0.05,
    seed=0,
    holdout=None,
    batch_size=64,
    momentum=0.9,
    bn_momentum=0.9,
    on_epoch=None,
):
    """Train a copy of ``model`` with momentum SGD on softmax cross-entropy.

    Batch norm uses batch statistics while training and keeps running
    statistics for inference.  Returns ``(trained_model, baseline_accuracy)``
    where the accuracy is measured on ``holdout`` (``None`` when no holdout
    split is given).  ``on_epoch(epoch, mean_loss)`` is called after every
    epoch.
    """
    model = model.copy()
    rng = np.random.default_rng(seed)
    velocity = {}
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            xb, yb = train.x[idx], train.y[idx]
            tape = GradTape()
            logits = forward(model, xb, tape=tape, train=True, bn_momentum=bn_momentum)
            loss = tape.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            grads = tape.backward()
            for (li, name), g in grads.items():
                param = model.layers[li].params[name]
                v = velocity.get((li, name))
                v = g if v is None else momentum * v + g
                velocity[(li, name)] = v
                param -= (lr * v).astype(param.dtype)
            total += float(loss) * len(idx)
            count += len(idx)
        mean_loss = total / max(count, 1)
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    acc = accuracy(model, holdout) if holdout is not None else None
    model.baseline_accuracy = acc
    return model, acc
