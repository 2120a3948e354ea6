"""Dense tensor operations with hand-written reverse-mode gradients.

Tensors are plain :class:`numpy.ndarray` values in ``N, C, H, W`` row-major
layout.  Every forward op has a matching ``*_backward`` function; the
:class:`GradTape` strings them together for a whole forward pass.

Compute precision follows the inputs: models are built in ``float32`` and
gradient checks run the same code on ``float64`` copies.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError

DEFAULT_DTYPE = np.float32


def as_tensor(values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Return ``values`` as a C-contiguous array of ``dtype``."""
    return np.ascontiguousarray(values, dtype=dtype)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x, w, b, stride, padding):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d [N,Cin,H,W], got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d [Cout,Cin,Kh,Kw], got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input Cin={x.shape[1]} but kernel Cin={w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match Cout={w.shape[0]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if w.shape[2] > hp or w.shape[3] > wp:
        raise ShapeError(
            f"conv2d kernel {w.shape[2]}x{w.shape[3]} exceeds padded input {hp}x{wp}"
        )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold ``x`` into patches of shape ``[N, Ho*Wo, C*kh*kw]``."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[..., i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dx)


def conv2d_forward(x, kernel, bias=None, stride=1, padding=0, *, return_cols=False):
    """2-d cross-correlation.

    ``x`` is ``[N, Cin, H, W]``, ``kernel`` is ``[Cout, Cin, Kh, Kw]``; the
    output is ``[N, Cout, H', W']`` with ``H' = (H + 2p - Kh) // stride + 1``.
    """
    _check_conv(x, kernel, bias, stride, padding)
    cout, _, kh, kw = kernel.shape
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(cout, -1).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(x.shape[0], cout, ho, wo)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, x_shape, cols, kernel, stride, padding, per_sample=False):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(dx, dkernel, dbias)``.  With ``per_sample`` the kernel and
    bias gradients keep a leading batch axis.
    """
    n = dout.shape[0]
    cout, _, kh, kw = kernel.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d = dout.reshape(n, cout, ho * wo)
    if per_sample:
        dk = np.matmul(d, cols).reshape((n,) + kernel.shape)
        db = d.sum(axis=2)
    else:
        dk = np.tensordot(d, cols, axes=([0, 2], [0, 1])).reshape(kernel.shape)
        db = d.sum(axis=(0, 2))
    dcols = np.matmul(d.transpose(0, 2, 1), kernel.reshape(cout, -1))
    dx = col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo)
    return dx, dk, db


# ---------------------------------------------------------------------------
# dense, batch norm, activations
# ---------------------------------------------------------------------------


def dense_forward(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape ``[O, F]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"dense inner dimension mismatch: input F={x.shape[1]} but weight F={weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias shape {bias.shape} does not match O={weight.shape[0]}")
    out = x @ weight.T
    if bias is not None:
        out += bias
    return out


def dense_backward(dout, x, weight, per_sample=False):
    if per_sample:
        dw = dout[:, :, None] * x[:, None, :]
        db = dout.copy()
    else:
        dw = dout.T @ x
        db = dout.sum(axis=0)
    return dout @ weight, dw, db


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _check_bn(x, *params):
    if x.ndim < 2:
        raise ShapeError(f"batchnorm input must have a channel axis, got shape {x.shape}")
    c = x.shape[1]
    for p in params:
        if p.shape != (c,):
            raise ShapeError(f"batchnorm parameter shape {p.shape} does not match C={c}")


def batchnorm_forward(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode batch norm using stored statistics."""
    _check_bn(x, gamma, beta, mean, var)
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    return x * _channel_view(scale, x.ndim) + _channel_view(shift, x.ndim)


def batchnorm_backward(dout, x, gamma, mean, var, eps=1e-5, per_sample=False):
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv, x.ndim)
    dx = dout * _channel_view(gamma * inv, x.ndim)
    axes = (0,) + tuple(range(2, x.ndim))
    if per_sample:
        inner = tuple(range(2, x.ndim))
        dgamma = (dout * xhat).sum(axis=inner)
        dbeta = dout.sum(axis=inner)
    else:
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
    return dx, dgamma, dbeta


def batchnorm_train_forward(x, gamma, beta, eps=1e-5):
    """Training-mode batch norm; returns ``(y, batch_mean, batch_var, xhat)``."""
    _check_bn(x, gamma, beta)
    axes = (0,) + tuple(range(2, x.ndim))
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _channel_view(mu, x.ndim)) * _channel_view(inv, x.ndim)
    y = xhat * _channel_view(gamma, x.ndim) + _channel_view(beta, x.ndim)
    return y, mu, var, xhat


def batchnorm_train_backward(dout, xhat, gamma, var, eps=1e-5):
    axes = (0,) + tuple(range(2, xhat.ndim))
    m = xhat.size // xhat.shape[1]
    inv = 1.0 / np.sqrt(var + eps)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * _channel_view(gamma, xhat.ndim)
    dx = _channel_view(inv / m, xhat.ndim) * (
        m * dxhat
        - _channel_view(dxhat.sum(axis=axes), xhat.ndim)
        - xhat * _channel_view((dxhat * xhat).sum(axis=axes), xhat.ndim)
    )
    return dx, dgamma, dbeta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def residual_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"residual_add operands differ in shape: {a.shape} vs {b.shape}")
    return a + b


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dout, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], x_shape).copy()


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient of the
    reduced loss.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    logp = log_softmax(logits)
    n = logits.shape[0]
    per = -logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    if reduction == "mean":
        return per.mean(), grad / n
    if reduction == "sum":
        return per.sum(), grad
    raise ValueError(f"unknown reduction {reduction!r}")


def gaussian_nll(pred, target, sigma, reduction="mean"):
    """Negative log-likelihood of ``target`` under ``N(pred, sigma**2)``."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    resid = pred - target
    per = resid**2 / (2 * sigma**2) + math.log(sigma) + 0.5 * math.log(2 * math.pi)
    grad = resid / sigma**2
    if reduction == "mean":
        return per.sum() / pred.shape[0], grad / pred.shape[0]
    if reduction == "sum":
        return per.sum(), grad
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class GradTape:
    """Records one forward pass and replays it backwards.

    Each op method computes its forward result immediately and appends a
    backward closure.  Parameters are identified by ``(key, name)`` pairs,
    e.g. ``(3, "weight")``.  A tape is single-use.

    >>> tape = GradTape()
    >>> w = np.array([[2.0]]); x = tape.watch(np.array([[3.0]]))
    >>> loss = tape.sum(tape.dense(x, w, None, key=0))
    >>> tape.backward()[(0, "weight")]
    array([[3.]])
    """

    def __init__(self):
        self._records = []
        self._watched = {}
        self._last = None
        self._separable = True
        self._consumed = False
        self.input_grads = {}

    def _record(self, out, inputs, fn):
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        self._records.append((out, inputs, fn))
        self._last = out
        return out

    def watch(self, x):
        """Mark ``x`` as an input whose gradient should be kept."""
        x = np.asarray(x)
        self._watched[id(x)] = x
        return x

    def conv2d(self, x, w, b, stride=1, padding=0, *, key):
        out, cols = conv2d_forward(x, w, b, stride, padding, return_cols=True)
        shape = x.shape

        def fn(dout, per_sample):
            dx, dw, db = conv2d_backward(dout, shape, cols, w, stride, padding, per_sample)
            grads = {(key, "weight"): dw}
            if b is not None:
                grads[(key, "bias")] = db
            return [dx], grads

        return self._record(out, [x], fn)

    def dense(self, x, w, b, *, key):
        out = dense_forward(x, w, b)

        def fn(dout, per_sample):
            dx, dw, db = dense_backward(dout, x, w, per_sample)
            grads = {(key, "weight"): dw}
            if b is not None:
                grads[(key, "bias")] = db
            return [dx], grads

        return self._record(out, [x], fn)

    def batchnorm(self, x, gamma, beta, mean, var, eps=1e-5, *, key):
        out = batchnorm_forward(x, gamma, beta, mean, var, eps)

        def fn(dout, per_sample):
            dx, dg, db = batchnorm_backward(dout, x, gamma, mean, var, eps, per_sample)
            return [dx], {(key, "gamma"): dg, (key, "beta"): db}

        return self._record(out, [x], fn)

    def batchnorm_train(self, x, gamma, beta, eps=1e-5, *, key):
        """Batch-statistics batch norm; returns ``(y, batch_mean, batch_var)``."""
        y, mu, var, xhat = batchnorm_train_forward(x, gamma, beta, eps)
        self._separable = False

        def fn(dout, per_sample):
            dx, dg, db = batchnorm_train_backward(dout, xhat, gamma, var, eps)
            return [dx], {(key, "gamma"): dg, (key, "beta"): db}

        return self._record(y, [x], fn), mu, var

    def relu(self, x):
        out = relu(x)
        return self._record(out, [x], lambda dout, ps: ([relu_backward(dout, x)], {}))

    def residual_add(self, a, b):
        out = residual_add(a, b)
        return self._record(out, [a, b], lambda dout, ps: ([dout, dout], {}))

    def global_avg_pool(self, x):
        out = global_avg_pool(x)
        shape = x.shape
        return self._record(
            out, [x], lambda dout, ps: ([global_avg_pool_backward(dout, shape)], {})
        )

    def scale(self, x, factor):
        """Elementwise multiply by a constant (no gradient to ``factor``)."""
        out = x * factor
        return self._record(out, [x], lambda dout, ps: ([dout * factor], {}))

    def sum(self, x):
        out = np.asarray(x.sum())
        return self._record(
            out, [x], lambda dout, ps: ([np.broadcast_to(dout, x.shape).astype(x.dtype)], {})
        )

    def softmax_cross_entropy(self, logits, labels, reduction="mean"):
        loss, grad = softmax_cross_entropy(logits, labels, reduction)
        if reduction != "sum":
            self._separable = False
        return self._record(np.asarray(loss), [logits], lambda dout, ps: ([grad * dout], {}))

    def gaussian_nll(self, pred, target, sigma, reduction="mean"):
        loss, grad = gaussian_nll(pred, target, sigma, reduction)
        if reduction != "sum":
            self._separable = False
        return self._record(np.asarray(loss), [pred], lambda dout, ps: ([grad * dout], {}))

    def backward(self, grad=None, per_sample=False):
        """Propagate from the last recorded output.

        ``grad`` defaults to ``1`` and is then only valid for a scalar output.
        Returns a dict of parameter gradients keyed by ``(key, name)``; with
        ``per_sample`` each gradient carries a leading sample axis, which
        requires a sample-separable graph (inference-mode batch norm and a
        ``"sum"``-reduced loss).
        """
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        if self._last is None:
            raise TapeError("backward() called before any forward op was recorded")
        if per_sample and not self._separable:
            raise TapeError(
                "per-sample gradients need inference-mode batch norm and a sum-reduced loss"
            )
        self._consumed = True
        out = self._last
        if grad is None:
            if out.size != 1:
                raise TapeError(f"backward() on non-scalar output of shape {out.shape} needs grad")
            grad = np.ones_like(out)
        grads = {id(out): np.asarray(grad, dtype=out.dtype)}
        params = {}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads, p_grads = fn(g, per_sample)
            for x, gx in zip(inputs, in_grads):
                k = id(x)
                grads[k] = grads[k] + gx if k in grads else gx
            for k, gp in p_grads.items():
                params[k] = params[k] + gp if k in params else gp
        self.input_grads = {k: grads[k] for k in self._watched if k in grads}
        self._records.clear()
        return params

    def input_grad(self, x):
        """Gradient for a watched input after :meth:`backward`."""
        g = self.input_grads.get(id(x))
        return np.zeros_like(x) if g is None else g
