"""Affine INT8 post-training quantization and integer inference.

Codes use the unsigned convention ``[0, 2**bits - 1]`` in :class:`QuantParams`;
quantized graphs store weights and activations shifted by ``2**(bits-1)`` so
that every integer operand is a signed 8-bit value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .costs import resolve_counters
from .errors import CalibrationError, QuantizationError, ShapeError
from .graph import WEIGHTED, Layer, ModelGraph, fold_batchnorm

DEGENERATE_WIDTH = 1e-8
SCALE_FLOOR = 1e-8


def round_half_away(v):
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8
    observed_min: float = 0.0
    observed_max: float = 0.0

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def offset(self) -> int:
        """Shift between unsigned codes and the signed storage convention."""
        return 1 << (self.bits - 1)

    @property
    def clip_min(self) -> float:
        return -self.zero_point * self.scale

    @property
    def clip_max(self) -> float:
        return (self.qmax - self.zero_point) * self.scale


def _f32(v) -> float:
    return float(np.float32(v))


def _f32_down(v: float) -> float:
    """Largest float32 not above ``v`` (keeps ``scale * qmax <= range``, so
    both ends of the range land on the end codes)."""
    f = np.float32(v)
    if float(f) > v:
        f = np.nextafter(f, np.float32(0))
    return float(f)


def params_from_range(lo, hi, bits=8, observed=None) -> QuantParams:
    """Params for the clip range ``[lo, hi]`` (extended to contain zero)."""
    if bits < 1 or bits > 16:
        raise ValueError(f"unsupported bit width {bits}")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo < DEGENERATE_WIDTH:
        hi = lo + DEGENERATE_WIDTH
    qmax = (1 << bits) - 1
    scale = _f32_down((hi - lo) / qmax)
    zp = int(np.clip(round_half_away(-lo / scale), 0, qmax))
    omin, omax = observed if observed is not None else (lo, hi)
    return QuantParams(scale, zp, bits, _f32(omin), _f32(omax))


def calibrate_minmax(values, bits=8) -> QuantParams:
    """Min-max calibration: ``s = (max - min) / (2**bits - 1)``."""
    v = np.asarray(values)
    if v.size == 0:
        raise CalibrationError("cannot calibrate an empty tensor")
    if not np.all(np.isfinite(v)):
        raise CalibrationError("tensor contains non-finite values")
    lo, hi = float(v.min()), float(v.max())
    return params_from_range(lo, hi, bits, observed=(lo, hi))


def quantize_tensor(values, params: QuantParams) -> np.ndarray:
    """Map reals to unsigned integer codes (int32 array)."""
    v = np.asarray(values, dtype=np.float64)
    codes = round_half_away(v / params.scale) + params.zero_point
    return np.clip(codes, 0, params.qmax).astype(np.int32)


def dequantize_tensor(codes, params: QuantParams) -> np.ndarray:
    return ((np.asarray(codes, dtype=np.float64) - params.zero_point) * params.scale).astype(
        np.float32
    )


def quant_error_stats(values, params: QuantParams):
    """``(mse, max_abs_err)`` of the quantize/dequantize round trip."""
    v = np.asarray(values, dtype=np.float64)
    err = dequantize_tensor(quantize_tensor(v, params), params).astype(np.float64) - v
    if err.size == 0:
        return 0.0, 0.0
    return float(np.mean(err**2)), float(np.max(np.abs(err)))


# ---------------------------------------------------------------------------
# KL-divergence calibration
# ---------------------------------------------------------------------------


def _smooth(dist, eps=1e-4):
    """Move ``eps`` mass onto every empty bin, taken evenly from the others.

    Returns ``None`` when the distribution cannot absorb the shift.
    """
    zero = dist == 0
    n_zero = int(zero.sum())
    n_nz = dist.size - n_zero
    if n_nz == 0:
        return None
    if n_zero == 0:
        return dist
    take = eps * n_zero / n_nz
    if take >= dist[~zero].min():
        return None
    return dist + np.where(zero, eps, -take)


def kl_divergence_curve(hist, levels, start_bins, eps=1e-4):
    """KL divergence for every candidate threshold bin ``i >= start_bins``.

    For a threshold of ``i`` bins the reference P is ``hist[:i]`` with the
    tail mass folded into its last bin.  The candidate Q merges the
    unclipped slice ``hist[:i]`` into ``levels`` buckets and spreads each
    bucket back uniformly over the bins where P is non-empty.  Both are
    normalized and smoothed with ``eps`` on empty bins before comparing.
    Returns ``(thresholds, kl)``; unusable thresholds get ``inf``.
    """
    hist = np.asarray(hist, dtype=np.float64)
    nbins = hist.size
    start = min(max(start_bins, 1), nbins)
    tail = np.concatenate([np.cumsum(hist[::-1])[::-1], [0.0]])
    ids = np.arange(start, nbins + 1)
    out = np.full(ids.size, np.inf)
    for j, i in enumerate(ids):
        sliced = hist[:i]
        p = sliced.copy()
        p[-1] += tail[i]
        nz = p > 0
        if not nz.any():
            continue
        bucket = (np.arange(i) * levels) // i
        mass = np.bincount(bucket, weights=sliced, minlength=levels)
        count = np.bincount(bucket, weights=nz, minlength=levels)
        q = np.where(nz, mass[bucket] / np.maximum(count[bucket], 1), 0.0)
        if q.sum() == 0:
            continue
        ps = _smooth(p / p.sum(), eps)
        qs = _smooth(q / q.sum(), eps)
        if ps is None or qs is None:
            continue
        out[j] = float(np.sum(ps * np.log(ps / qs)))
    return ids, out


def calibrate_kl(samples, bits=8, num_bins=2048, start_bins=128) -> QuantParams:
    """Choose a clip threshold minimising the KL divergence of the
    quantized activation histogram.

    ``samples`` is an array or an iterable of arrays (calibration batches).
    Activations with negative values get a symmetric range ``[-T, T]``;
    non-negative ones a one-sided range ``[0, T]``.
    """
    if isinstance(samples, np.ndarray):
        batches = [samples]
    else:
        batches = [np.asarray(s) for s in samples]
    batches = [b.ravel() for b in batches if b.size]
    if not batches:
        raise CalibrationError("no activation samples observed")
    data = np.concatenate(batches).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise CalibrationError("activation samples contain non-finite values")
    lo, hi = float(data.min()), float(data.max())
    signed = lo < 0
    amax = float(np.abs(data).max())
    if amax == 0.0:
        zp = 1 << (bits - 1) if signed else 0
        return QuantParams(_f32(SCALE_FLOOR), zp, bits, _f32(lo), _f32(hi))
    # exact zeros sit on the zero point and carry no rounding error; left in,
    # the spike they form (half of a ReLU output) dominates the divergence
    # and drives the threshold to the search floor
    hist, _ = np.histogram(np.abs(data[data != 0]), bins=num_bins, range=(0.0, amax))
    # the abs-histogram of a signed tensor folds both halves of the code range
    levels = 1 << (bits - 1) if signed else 1 << bits
    ids, kl = kl_divergence_curve(hist, levels, max(start_bins, levels))
    best = int(ids[np.argmin(kl)])
    threshold = best * amax / num_bins
    return params_from_range(-threshold if signed else 0.0, threshold, bits, observed=(lo, hi))


# ---------------------------------------------------------------------------
# model quantization
# ---------------------------------------------------------------------------


def layer_outputs(model: ModelGraph, x):
    """Float forward pass returning the output of every layer."""
    outs = []
    stack = []
    h = x
    for layer in model.layers:
        p = layer.params
        k = layer.kind
        if k == "conv":
            h = T.conv2d_forward(h, p["weight"], p.get("bias"), layer.stride, layer.padding)
        elif k in ("dense", "classifier"):
            h = T.dense_forward(h, p["weight"], p.get("bias"))
        elif k == "batchnorm":
            h = T.batchnorm_forward(h, p["gamma"], p["beta"], p["mean"], p["var"])
        elif k == "relu":
            h = T.relu(h)
        elif k == "pool":
            h = T.global_avg_pool(h)
        elif k == "residual_begin":
            stack.append(h)
        elif k == "residual_end":
            h = T.residual_add(stack.pop(), h)
        outs.append(h)
    return outs


def _calibrate(samples, mode, bits):
    if mode == "kl":
        return calibrate_kl(samples, bits)
    if mode == "minmax":
        return calibrate_minmax(np.concatenate([s.ravel() for s in samples]), bits)
    raise ValueError(f"unknown calibration mode {mode!r}")


def quantize_model(
    model: ModelGraph,
    calib,
    weight_mode="minmax",
    activation_mode="kl",
    bits=8,
    counters=None,
    batch_size=250,
) -> ModelGraph:
    """Fold batch norm, quantize weights per tensor and calibrate activations.

    ``calib`` is a :class:`~hqp.data.Dataset` or an input array.  Returns a
    quantized :class:`ModelGraph`.
    """
    if model.quantized:
        raise QuantizationError("model is already quantized")
    if weight_mode != "minmax":
        raise ValueError("weights are always calibrated with min-max")
    if bits != 8:
        raise QuantizationError("integer inference supports 8-bit codes only")
    inputs = getattr(calib, "x", calib)
    if len(inputs) == 0:
        raise CalibrationError("calibration set is empty")
    folded = fold_batchnorm(model, require=False)
    n_layers = len(folded.layers)

    seen = [[] for _ in range(n_layers)]
    for s in range(0, len(inputs), batch_size):
        xb = inputs[s : s + batch_size]
        for i, h in enumerate(layer_outputs(folded, xb)):
            seen[i].append(h)
    resolve_counters(counters).inference_passes += len(inputs)

    input_params = _calibrate([inputs], activation_mode, bits)
    act = [None] * n_layers
    for i, layer in enumerate(folded.layers):
        if layer.kind in ("relu", "pool", "residual_end", "conv", "dense"):
            act[i] = _calibrate(seen[i], activation_mode, bits)
    prev = input_params
    for i, layer in enumerate(folded.layers):
        if layer.kind == "residual_begin":
            act[i] = prev
        nxt = folded.layers[i + 1].kind if i + 1 < n_layers else None
        if nxt == "relu" and layer.kind in ("conv", "dense", "residual_end"):
            act[i] = act[i + 1] = _calibrate(seen[i + 1], activation_mode, bits)
        if act[i] is not None:
            prev = act[i]
    del seen

    qlayers = []
    in_params = input_params
    for i, layer in enumerate(folded.layers):
        ql = Layer(layer.kind, stride=layer.stride, padding=layer.padding, act_qparams=act[i])
        if layer.kind in WEIGHTED:
            w = layer.params["weight"]
            wq = calibrate_minmax(w, bits)
            ql.weight_qparams = wq
            ql.params["weight"] = (quantize_tensor(w, wq) - wq.offset).astype(np.int8)
            b = layer.params.get("bias")
            if b is None:
                b = np.zeros(w.shape[0])
            bias_scale = float(in_params.scale) * float(wq.scale)
            ql.params["bias"] = np.clip(
                round_half_away(b.astype(np.float64) / bias_scale), -(2**31), 2**31 - 1
            ).astype(np.int32)
        qlayers.append(ql)
        if act[i] is not None:
            in_params = act[i]
    return ModelGraph(
        qlayers,
        tuple(model.input_shape),
        model.num_classes,
        model.name,
        model.baseline_accuracy,
        quantized=True,
        input_qparams=input_params,
    )


# ---------------------------------------------------------------------------
# integer inference
# ---------------------------------------------------------------------------

_F32_EXACT_K = (1 << 24) // (128 * 128)


def int_matmul(a, b, exact_int=False):
    """Integer product of int8-valued ``a @ b`` with int32 accumulation semantics.

    BLAS in float32 is exact while ``K * 128**2 <= 2**24``; wider reductions
    fall back to float64 (exact to 2**53).  ``exact_int`` forces an int64
    reference path.
    """
    k = a.shape[-1]
    if exact_int:
        return np.matmul(a.astype(np.int64), b.astype(np.int64))
    dt = np.float32 if k <= _F32_EXACT_K else np.float64
    return np.rint(np.matmul(a.astype(dt), b.astype(dt))).astype(np.int64)


def _signed(q: QuantParams) -> int:
    return q.zero_point - q.offset


def _requantize(real_over_scale, out: QuantParams):
    codes = round_half_away(real_over_scale) + out.zero_point
    return (np.clip(codes, 0, out.qmax) - out.offset).astype(np.int8)


def quantize_input(qmodel: ModelGraph, x):
    p = qmodel.input_qparams
    return (quantize_tensor(x, p) - p.offset).astype(np.int8)


def _int_conv(q, in_p, layer, exact_int):
    w = layer.params["weight"]
    wq = layer.weight_qparams
    zx, zw = _signed(in_p), _signed(wq)
    pad = layer.padding
    if pad:
        q = np.pad(q, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=zx)
    cout, cin, kh, kw = w.shape
    if q.shape[1] != cin:
        raise ShapeError(f"int8 conv expects {cin} channels, got {q.shape[1]}")
    cols, ho, wo = T.im2col(q, kh, kw, layer.stride, 0)
    wmat = w.reshape(cout, -1)
    k = wmat.shape[1]
    acc = int_matmul(cols, wmat.T, exact_int)
    acc -= zw * cols.sum(axis=2, dtype=np.int64)[..., None]
    acc -= zx * wmat.sum(axis=1, dtype=np.int64)[None, None, :]
    acc += k * zx * zw
    acc += layer.params["bias"].astype(np.int64)
    acc = np.ascontiguousarray(acc.transpose(0, 2, 1)).reshape(q.shape[0], cout, ho, wo)
    return acc


def _int_dense(q, in_p, layer, exact_int):
    w = layer.params["weight"]
    zx, zw = _signed(in_p), _signed(layer.weight_qparams)
    acc = int_matmul(q, w.T, exact_int)
    acc -= zw * q.sum(axis=1, dtype=np.int64)[:, None]
    acc -= zx * w.sum(axis=1, dtype=np.int64)[None, :]
    acc += w.shape[1] * zx * zw
    acc += layer.params["bias"].astype(np.int64)
    return acc


def int8_forward(qmodel: ModelGraph, x, exact_int=False):
    """Integer inference; returns float logits.

    ``x`` is either float input (quantized with the model's input params) or
    int8 codes already in the signed storage convention.
    """
    if not qmodel.quantized:
        raise QuantizationError("int8_forward needs a quantized model")
    q = x if np.asarray(x).dtype == np.int8 else quantize_input(qmodel, x)
    p = qmodel.input_qparams
    stack = []
    for i, layer in enumerate(qmodel.layers):
        k = layer.kind
        out_p = layer.act_qparams
        if k != "classifier" and out_p is None and k != "residual_begin":
            raise QuantizationError(f"layer {i} ({k}) has no activation params")
        if k in ("conv", "dense", "classifier"):
            fn = _int_conv if k == "conv" else _int_dense
            acc = fn(q, p, layer, exact_int)
            s_acc = float(p.scale) * float(layer.weight_qparams.scale)
            if k == "classifier":
                return (acc * s_acc).astype(np.float32)
            q = _requantize(acc * (s_acc / out_p.scale), out_p)
            p = out_p
        elif k == "relu":
            zp = _signed(p)
            q = np.maximum(q, zp).astype(np.int8)
            if out_p != p:
                q = _requantize((q.astype(np.int64) - zp) * (p.scale / out_p.scale), out_p)
            p = out_p
        elif k == "pool":
            hw = q.shape[2] * q.shape[3]
            total = q.astype(np.int64).sum(axis=(2, 3)) - hw * _signed(p)
            q = _requantize(total * (p.scale / (hw * out_p.scale)), out_p)
            p = out_p
        elif k == "residual_begin":
            stack.append((q, p))
        elif k == "residual_end":
            qs, ps = stack.pop()
            a = round_half_away((qs.astype(np.int64) - _signed(ps)) * (ps.scale / out_p.scale))
            b = round_half_away((q.astype(np.int64) - _signed(p)) * (p.scale / out_p.scale))
            codes = np.clip(a + b + out_p.zero_point, 0, out_p.qmax)
            q = (codes - out_p.offset).astype(np.int8)
            p = out_p
        else:
            raise QuantizationError(f"layer {i}: unsupported kind {k!r} in quantized graph")
    return ((q.astype(np.float64) - _signed(p)) * p.scale).astype(np.float32)


def int8_predict(qmodel: ModelGraph, x, batch_size=250):
    out = []
    for s in range(0, len(x), batch_size):
        out.append(int8_forward(qmodel, x[s : s + batch_size]).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
