"""Binary model file format (little-endian).

::

    "HQPM"  u16 version=1  u16 flags (bit 0: quantized)  u32 layer_count
    per layer:
        u8 kind  u32 stride  u32 padding  u32 tensor_count
        per tensor:
            u32 name_len  name(utf-8)  u8 dtype (0=f32, 1=i8, 2=i32)
            u32 ndim  u32 dims[ndim]  payload
            [i8 only] QuantParams record
        u8 has_act_params  [QuantParams record]
    trailer:
        u32 name_len  name  u32 num_classes  u32 ndim  u32 input_dims[ndim]
        f64 baseline_accuracy (NaN when unknown)
        u8 has_input_params  [QuantParams record]

A QuantParams record is ``f32 scale, i32 zero_point, u8 bits, f32 min, f32 max``.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import BadMagicError, ModelFormatError, TruncatedFileError, VersionMismatchError
from .graph import KINDS, Layer, ModelGraph
from .quantization import QuantParams

MAGIC = b"HQPM"
VERSION = 1
FLAG_QUANTIZED = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int32): 2}
_QP = struct.Struct("<fiBff")


def _pack_qp(q: QuantParams) -> bytes:
    return _QP.pack(q.scale, q.zero_point, q.bits, q.observed_min, q.observed_max)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def model_to_bytes(model: ModelGraph) -> bytes:
    out = [MAGIC, struct.pack("<HHI", VERSION, FLAG_QUANTIZED if model.quantized else 0,
                              len(model.layers))]
    for layer in model.layers:
        out.append(struct.pack("<BIII", KINDS.index(layer.kind), layer.stride, layer.padding,
                               len(layer.params)))
        for name, arr in layer.params.items():
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise ModelFormatError(f"cannot serialize dtype {arr.dtype} ({name})")
            out.append(_pack_str(name))
            out.append(struct.pack(f"<BI{arr.ndim}I", code, arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
            if code == 1:
                if layer.weight_qparams is None:
                    raise ModelFormatError(f"int8 tensor {name!r} has no QuantParams")
                out.append(_pack_qp(layer.weight_qparams))
        if layer.act_qparams is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01" + _pack_qp(layer.act_qparams))
    out.append(_pack_str(model.name))
    shape = tuple(model.input_shape)
    out.append(struct.pack(f"<II{len(shape)}I", model.num_classes, len(shape), *shape))
    acc = math.nan if model.baseline_accuracy is None else model.baseline_accuracy
    out.append(struct.pack("<d", acc))
    if model.input_qparams is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01" + _pack_qp(model.input_qparams))
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"truncated model file: need {n} bytes at offset {self.pos}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def qparams(self):
        scale, zp, bits, lo, hi = self.unpack(_QP.format)
        return QuantParams(scale, zp, bits, lo, hi)


def model_from_bytes(raw: bytes) -> ModelGraph:
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    r = _Reader(raw)
    r.take(4)
    version, flags, n_layers = r.unpack("<HHI")
    if version != VERSION:
        raise VersionMismatchError(f"model file version {version}, this reader supports {VERSION}")
    layers = []
    for _ in range(n_layers):
        kind, stride, padding, n_tensors = r.unpack("<BIII")
        if kind >= len(KINDS):
            raise ModelFormatError(f"unknown layer kind code {kind}")
        layer = Layer(KINDS[kind], stride=stride, padding=padding)
        for _ in range(n_tensors):
            name = r.string()
            code, ndim = r.unpack("<BI")
            if code not in _DTYPES:
                raise ModelFormatError(f"unknown dtype code {code}")
            dims = r.unpack(f"<{ndim}I")
            dt = _DTYPES[code]
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
            layer.params[name] = arr.astype(dt.newbyteorder("="), copy=True)
            if code == 1:
                layer.weight_qparams = r.qparams()
        (has_act,) = r.unpack("<B")
        if has_act:
            layer.act_qparams = r.qparams()
        layers.append(layer)
    name = r.string()
    num_classes, ndim = r.unpack("<II")
    shape = r.unpack(f"<{ndim}I")
    (acc,) = r.unpack("<d")
    (has_in,) = r.unpack("<B")
    input_qparams = r.qparams() if has_in else None
    if r.pos != len(raw):
        raise ModelFormatError(f"{len(raw) - r.pos} trailing bytes after model")
    return ModelGraph(
        layers,
        tuple(shape),
        num_classes,
        name,
        None if math.isnan(acc) else acc,
        quantized=bool(flags & FLAG_QUANTIZED),
        input_qparams=input_qparams,
    )


def save_model(model: ModelGraph, path):
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> ModelGraph:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def serialized_weight_bytes(model: ModelGraph) -> int:
    """Payload bytes of conv/dense weight tensors as written to disk."""
    total = 0
    for layer in model.layers:
        if layer.kind in ("conv", "dense", "classifier"):
            w = layer.params["weight"]
            total += w.size * _DTYPES[_DTYPE_CODES[w.dtype]].itemsize
    return total
