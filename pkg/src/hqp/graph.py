"""Model representation, desk-scale architectures and accounting.

A :class:`ModelGraph` is an ordered list of :class:`Layer` records.  Skip
connections are expressed with a ``residual_begin`` layer (push the current
tensor) and a ``residual_end`` layer (pop it and add to the current tensor),
so the graph stays a flat list and every edit is a list rewrite.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError

KINDS = (
    "conv",
    "dense",
    "batchnorm",
    "relu",
    "pool",
    "residual_begin",
    "residual_end",
    "classifier",
)
WEIGHTED = ("conv", "dense", "classifier")
BN_EPS = 1e-5


class FilterId(NamedTuple):
    layer_index: int
    channel_index: int


@dataclass(eq=False)
class Layer:
    kind: str
    params: dict = field(default_factory=dict)
    stride: int = 1
    padding: int = 0
    # quantized graphs only: per-tensor params for "weight", and for the layer output
    weight_qparams: object = None
    act_qparams: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")

    @property
    def in_channels(self):
        if self.kind in WEIGHTED:
            return self.params["weight"].shape[1]
        if self.kind == "batchnorm":
            return self.params["gamma"].shape[0]
        return None

    @property
    def out_channels(self):
        if self.kind in WEIGHTED:
            return self.params["weight"].shape[0]
        if self.kind == "batchnorm":
            return self.params["gamma"].shape[0]
        return None

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        if (self.kind, self.stride, self.padding) != (other.kind, other.stride, other.padding):
            return False
        if self.params.keys() != other.params.keys():
            return False
        for k, v in self.params.items():
            w = other.params[k]
            if v.dtype != w.dtype or v.shape != w.shape or v.tobytes() != w.tobytes():
                return False
        return self.weight_qparams == other.weight_qparams and self.act_qparams == other.act_qparams


@dataclass(eq=False)
class ModelGraph:
    layers: list
    input_shape: tuple = (1, 16, 16)
    num_classes: int = 10
    name: str = "model"
    baseline_accuracy: float | None = None
    quantized: bool = False
    input_qparams: object = None

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        same_acc = self.baseline_accuracy == other.baseline_accuracy or (
            self.baseline_accuracy is not None
            and other.baseline_accuracy is not None
            and math.isnan(self.baseline_accuracy)
            and math.isnan(other.baseline_accuracy)
        )
        return (
            tuple(self.input_shape) == tuple(other.input_shape)
            and self.num_classes == other.num_classes
            and self.name == other.name
            and same_acc
            and self.quantized == other.quantized
            and self.input_qparams == other.input_qparams
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.kind in WEIGHTED:
                return layer.params["weight"].dtype
        return T.DEFAULT_DTYPE

    def astype(self, dtype) -> "ModelGraph":
        out = self.copy()
        for layer in out.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
        return out

    def weighted_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED]

    def conv_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    @property
    def residual_groups(self):
        """Channel groups that meet at a residual add.

        Each group is a tuple of :class:`FilterId`, one per producing layer,
        all sharing the same channel index.
        """
        return residual_groups(self.layers)


def _producer_layers(layers):
    """Yield ``(index, layer, sources)`` where ``sources`` lists the layers
    whose output channels flow into the tensor leaving ``layer``."""
    stack = []
    sources = ()
    for i, layer in enumerate(layers):
        if layer.kind in WEIGHTED:
            sources = (i,)
        elif layer.kind == "residual_begin":
            stack.append(sources)
        elif layer.kind == "residual_end":
            if not stack:
                raise GraphError(f"layer {i}: residual_end without matching residual_begin")
            sources = tuple(sorted(set(stack.pop()) | set(sources)))
        yield i, layer, sources
    if stack:
        raise GraphError("residual_begin without matching residual_end")


def residual_groups(layers):
    parent = {}

    def find(a):
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for _, layer, sources in _producer_layers(layers):
        if layer.kind == "residual_end":
            for s in sources:
                parent[find(s)] = find(sources[0])
    comps = {}
    for node in parent:
        comps.setdefault(find(node), []).append(node)
    groups = []
    for members in sorted(comps.values(), key=min):
        members = sorted(members)
        width = layers[members[0]].out_channels
        for c in range(width):
            groups.append(tuple(FilterId(m, c) for m in members))
    return groups


def input_consumers(layers):
    """Map each weighted/BN layer index to the producer layers of its input."""
    mapping = {}
    prev = ()
    for i, layer, sources in _producer_layers(layers):
        if layer.kind in WEIGHTED or layer.kind == "batchnorm":
            mapping[i] = prev
        prev = sources
    return mapping


# ---------------------------------------------------------------------------
# forward evaluation and shape checking
# ---------------------------------------------------------------------------


def check_shapes(model: ModelGraph, input_shape=None):
    """Propagate shapes symbolically; return the output shape per sample.

    Raises :class:`ShapeError` for any mismatch that forward evaluation
    would hit.
    """
    shape = tuple(input_shape or model.input_shape)
    stack = []
    for i, layer in enumerate(model.layers):
        k = layer.kind
        try:
            if k == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"conv needs a C,H,W input, got {shape}")
                w = layer.params["weight"]
                if w.ndim != 4 or w.shape[1] != shape[0]:
                    raise ShapeError(f"kernel {w.shape} does not accept {shape[0]} channels")
                b = layer.params.get("bias")
                if b is not None and b.shape != (w.shape[0],):
                    raise ShapeError(f"bias {b.shape} vs Cout={w.shape[0]}")
                hp, wp = shape[1] + 2 * layer.padding, shape[2] + 2 * layer.padding
                if w.shape[2] > hp or w.shape[3] > wp:
                    raise ShapeError(f"kernel {w.shape[2:]} exceeds padded input {hp}x{wp}")
                shape = (
                    w.shape[0],
                    T.conv_output_size(shape[1], w.shape[2], layer.stride, layer.padding),
                    T.conv_output_size(shape[2], w.shape[3], layer.stride, layer.padding),
                )
            elif k in ("dense", "classifier"):
                w = layer.params["weight"]
                if len(shape) != 1 or w.ndim != 2 or w.shape[1] != shape[0]:
                    raise ShapeError(f"weight {w.shape} does not accept input {shape}")
                b = layer.params.get("bias")
                if b is not None and b.shape != (w.shape[0],):
                    raise ShapeError(f"bias {b.shape} vs O={w.shape[0]}")
                shape = (w.shape[0],)
            elif k == "batchnorm":
                for name in ("gamma", "beta", "mean", "var"):
                    if layer.params[name].shape != (shape[0],):
                        raise ShapeError(f"{name} {layer.params[name].shape} vs C={shape[0]}")
            elif k == "pool":
                if len(shape) != 3:
                    raise ShapeError(f"pool needs a C,H,W input, got {shape}")
                shape = (shape[0],)
            elif k == "residual_begin":
                stack.append(shape)
            elif k == "residual_end":
                if not stack:
                    raise GraphError("residual_end without residual_begin")
                skip = stack.pop()
                if skip != shape:
                    raise ShapeError(f"residual operands differ: skip {skip} vs branch {shape}")
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({k}): {exc}") from None
    if stack:
        raise GraphError("unterminated residual block")
    return shape


def forward(model: ModelGraph, x, tape=None, train=False, bn_momentum=0.9):
    """Float forward pass returning logits.

    With ``tape`` the pass is recorded for :meth:`GradTape.backward`.  With
    ``train`` batch norm normalises with batch statistics and updates the
    stored running statistics in place (``running = m*running + (1-m)*batch``).
    """
    if model.quantized:
        raise GraphError("forward() on a quantized graph; use quantization.int8_forward")
    stack = []
    h = x
    for i, layer in enumerate(model.layers):
        p = layer.params
        k = layer.kind
        if k == "conv":
            if tape is None:
                h = T.conv2d_forward(h, p["weight"], p.get("bias"), layer.stride, layer.padding)
            else:
                h = tape.conv2d(h, p["weight"], p.get("bias"), layer.stride, layer.padding, key=i)
        elif k in ("dense", "classifier"):
            if tape is None:
                h = T.dense_forward(h, p["weight"], p.get("bias"))
            else:
                h = tape.dense(h, p["weight"], p.get("bias"), key=i)
        elif k == "batchnorm":
            if train:
                if tape is None:
                    h, mu, var, _ = T.batchnorm_train_forward(h, p["gamma"], p["beta"], BN_EPS)
                else:
                    h, mu, var = tape.batchnorm_train(h, p["gamma"], p["beta"], BN_EPS, key=i)
                p["mean"] *= bn_momentum
                p["mean"] += (1 - bn_momentum) * mu
                p["var"] *= bn_momentum
                p["var"] += (1 - bn_momentum) * var
            elif tape is None:
                h = T.batchnorm_forward(h, p["gamma"], p["beta"], p["mean"], p["var"], BN_EPS)
            else:
                h = tape.batchnorm(h, p["gamma"], p["beta"], p["mean"], p["var"], BN_EPS, key=i)
        elif k == "relu":
            h = T.relu(h) if tape is None else tape.relu(h)
        elif k == "pool":
            h = T.global_avg_pool(h) if tape is None else tape.global_avg_pool(h)
        elif k == "residual_begin":
            stack.append(h)
        elif k == "residual_end":
            skip = stack.pop()
            h = T.residual_add(skip, h) if tape is None else tape.residual_add(skip, h)
    return h


def predict(model: ModelGraph, x, batch_size=256):
    """Argmax class predictions for a batch of inputs."""
    out = []
    for s in range(0, len(x), batch_size):
        out.append(forward(model, x[s : s + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_layer(rng, cin, cout, k=3, stride=1, padding=1, dtype=T.DEFAULT_DTYPE):
    w = _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
    return Layer("conv", {"weight": w, "bias": np.zeros(cout, dtype)}, stride, padding)


def bn_layer(c, dtype=T.DEFAULT_DTYPE):
    return Layer(
        "batchnorm",
        {
            "gamma": np.ones(c, dtype),
            "beta": np.zeros(c, dtype),
            "mean": np.zeros(c, dtype),
            "var": np.ones(c, dtype),
        },
    )


def dense_layer(rng, fin, fout, kind="classifier", dtype=T.DEFAULT_DTYPE):
    w = _glorot(rng, (fout, fin), fin, fout, dtype)
    return Layer(kind, {"weight": w, "bias": np.zeros(fout, dtype)})


CONVNET_WIDTHS = (16, 32, 64, 64)
CONVNET_STRIDES = (1, 2, 2, 1)


def build_mini_convnet(
    width_multiplier: float = 1.0, num_classes: int = 10, input_shape=(1, 16, 16), seed: int = 0
) -> ModelGraph:
    """Four conv+BN+ReLU stages, global pooling and a dense classifier."""
    if not width_multiplier > 0:
        raise ValueError("width_multiplier must be positive")
    rng = np.random.default_rng(seed)
    widths = [max(1, math.ceil(w * width_multiplier)) for w in CONVNET_WIDTHS]
    layers = []
    cin = input_shape[0]
    for w, s in zip(widths, CONVNET_STRIDES):
        layers += [conv_layer(rng, cin, w, stride=s), bn_layer(w), Layer("relu")]
        cin = w
    layers += [Layer("pool"), dense_layer(rng, cin, num_classes)]
    return ModelGraph(layers, tuple(input_shape), num_classes, f"mini_convnet_x{width_multiplier:g}")


def build_mini_resnet(
    blocks: int = 2,
    width: int = 16,
    num_classes: int = 10,
    input_shape=(1, 16, 16),
    seed: int = 0,
    stem_stride: int = 2,
) -> ModelGraph:
    """Stem conv followed by ``blocks`` identity-skip basic blocks."""
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    rng = np.random.default_rng(seed)
    layers = [conv_layer(rng, input_shape[0], width, stride=stem_stride), bn_layer(width), Layer("relu")]
    for _ in range(blocks):
        layers += [
            Layer("residual_begin"),
            conv_layer(rng, width, width),
            bn_layer(width),
            Layer("relu"),
            conv_layer(rng, width, width),
            bn_layer(width),
            Layer("residual_end"),
            Layer("relu"),
        ]
    layers += [Layer("pool"), dense_layer(rng, width, num_classes)]
    return ModelGraph(layers, tuple(input_shape), num_classes, f"mini_resnet_b{blocks}")


# ---------------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------------


def fold_batchnorm(model: ModelGraph, require=True) -> ModelGraph:
    """Absorb every BN layer into the conv that precedes it.

    Raises :class:`GraphError` for a BN not directly after a conv, and for a
    graph without BN layers when ``require`` is set.
    """
    if model.quantized:
        raise GraphError("cannot fold a quantized graph")
    n_bn = sum(layer.kind == "batchnorm" for layer in model.layers)
    if n_bn == 0:
        if require:
            raise GraphError("no batch norm layers left to fold")
        return model.copy()
    out = []
    for i, layer in enumerate(model.layers):
        if layer.kind != "batchnorm":
            out.append(copy.deepcopy(layer))
            continue
        if not out or out[-1].kind != "conv":
            raise GraphError(f"layer {i}: batch norm does not follow a conv (orphan)")
        conv = out[-1]
        p = layer.params
        scale = p["gamma"] / np.sqrt(p["var"] + BN_EPS)
        w = conv.params["weight"]
        b = conv.params.get("bias")
        if b is None:
            b = np.zeros(w.shape[0], w.dtype)
        conv.params["weight"] = (w * scale[:, None, None, None]).astype(w.dtype)
        conv.params["bias"] = ((b - p["mean"]) * scale + p["beta"]).astype(w.dtype)
    folded = model.copy()
    folded.layers = out
    return folded


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


def count_params(model: ModelGraph) -> int:
    """Learnable parameter count (weights, biases, BN gamma/beta)."""
    total = 0
    for layer in model.layers:
        for name, v in layer.params.items():
            if name in ("mean", "var"):
                continue
            total += v.size
    return total


def count_flops(model: ModelGraph, input_shape=None) -> int:
    """Multiply-accumulate count of conv and dense layers, times two."""
    shape = tuple(input_shape or model.input_shape)
    flops = 0
    for layer in model.layers:
        if layer.kind == "conv":
            w = layer.params["weight"]
            ho = T.conv_output_size(shape[1], w.shape[2], layer.stride, layer.padding)
            wo = T.conv_output_size(shape[2], w.shape[3], layer.stride, layer.padding)
            flops += 2 * w.shape[0] * w.shape[1] * w.shape[2] * w.shape[3] * ho * wo
            shape = (w.shape[0], ho, wo)
        elif layer.kind in ("dense", "classifier"):
            w = layer.params["weight"]
            flops += 2 * w.size
            shape = (w.shape[0],)
        elif layer.kind == "pool":
            shape = (shape[0],)
    return flops


def count_filters(model: ModelGraph) -> int:
    """Number of conv output filters."""
    return sum(model.layers[i].out_channels for i in model.conv_layers())


def weight_payload_bytes(model: ModelGraph) -> int:
    """Serialized bytes of conv/dense weight tensors (biases and BN excluded)."""
    return sum(model.layers[i].params["weight"].nbytes for i in model.weighted_layers())
