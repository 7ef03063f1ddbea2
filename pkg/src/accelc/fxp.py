"""Q8.8 fixed-point arithmetic and the golden layer executor.

Everything downstream (planner, machine) is validated bit-exactly against
this module, so the arithmetic rules here are the system-wide contract:

- values are int16 raw with 8 fractional bits (value = raw / 256)
- quantization rounds half away from zero and saturates
- accumulation is exact (Q16.16 and wider, no intermediate rounding)
- writeback converts to Q8.8 by arithmetic shift right 8 (floor), saturates,
  then optionally applies ReLU
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

Q88_MIN = -32768
Q88_MAX = 32767
ACC_LIMIT = 1 << 31  # |acc| at or past this is flagged as overflow


def q88_quantize(x):
    """Round half away from zero to the nearest Q8.8, saturating."""
    arr = np.asarray(x, dtype=np.float64)
    scaled = arr * 256.0
    rounded = np.where(scaled >= 0, np.floor(scaled + 0.5), -np.floor(-scaled + 0.5))
    out = np.clip(rounded, Q88_MIN, Q88_MAX).astype(np.int16)
    if arr.ndim == 0:
        return int(out)
    return out


def q88_to_float(raw):
    return np.asarray(raw, dtype=np.float64) / 256.0 if np.ndim(raw) else raw / 256.0


def mac_reduce(m, w) -> int:
    """Exact sum of products of two raw Q8.8 sequences (Q16.16 result)."""
    ma = np.asarray(m, dtype=np.int64)
    wa = np.asarray(w, dtype=np.int64)
    if ma.shape != wa.shape:
        raise ValueError(f"length mismatch {ma.shape} vs {wa.shape}")
    return int(np.dot(ma, wa))


def writeback(acc: int, relu: bool = False) -> int:
    """Q16.16 accumulator to stored Q8.8: floor shift, saturate, ReLU."""
    v = int(acc) >> 8
    v = Q88_MAX if v > Q88_MAX else (Q88_MIN if v < Q88_MIN else v)
    return max(0, v) if relu else v


def writeback_array(acc, relu: bool = False):
    v = np.right_shift(np.asarray(acc, dtype=np.int64), 8)
    v = np.clip(v, Q88_MIN, Q88_MAX)
    if relu:
        v = np.maximum(v, 0)
    return v.astype(np.int16)


@dataclass
class Tensor:
    """A (channels, height, width) volume stored channel-major.

    Channel-major means all channels of one pixel are contiguous; the backing
    array is therefore kept (h, w, c) so its C-order ravel is the memory
    image.
    """

    hwc: np.ndarray  # int16, shape (h, w, c)

    @classmethod
    def from_chw(cls, arr) -> "Tensor":
        a = np.asarray(arr, dtype=np.int16)
        if a.ndim != 3:
            raise ValueError(f"expected 3 dims, got {a.shape}")
        return cls(np.ascontiguousarray(a.transpose(1, 2, 0)))

    @classmethod
    def frombytes(cls, data: bytes, dims) -> "Tensor":
        c, h, w = dims
        a = np.frombuffer(data, dtype="<i2", count=c * h * w).reshape(h, w, c)
        return cls(a.copy())

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.hwc.transpose(2, 0, 1))

    @property
    def dims(self):
        h, w, c = self.hwc.shape
        return (c, h, w)

    def ravel(self) -> np.ndarray:
        return self.hwc.reshape(-1)

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.hwc, dtype="<i2").tobytes()

    def dump(self, path):
        path = str(path)
        with open(path, "wb") as f:
            f.write(self.tobytes())
        c, h, w = self.dims
        with open(path + ".dims", "w") as f:
            f.write(f"{c} {h} {w}\n")

    @classmethod
    def load(cls, path) -> "Tensor":
        path = str(path)
        with open(path + ".dims") as f:
            c, h, w = (int(t) for t in f.read().split())
        with open(path, "rb") as f:
            return cls.frombytes(f.read(), (c, h, w))


def _conv_acc(x_chw, w_ocij, bias_o, sy, sx, pad):
    """Exact int64 accumulators for a zero-padded convolution."""
    c, ih, iw = x_chw.shape
    o, wc, kh, kw = w_ocij.shape
    if wc != c:
        raise ValueError(f"weight channels {wc} != input channels {c}")
    oh = (ih + 2 * pad - kh) // sy + 1
    ow = (iw + 2 * pad - kw) // sx + 1
    xp = np.zeros((c, ih + 2 * pad, iw + 2 * pad), dtype=np.int64)
    xp[:, pad:pad + ih, pad:pad + iw] = x_chw
    acc = np.zeros((o, oh, ow), dtype=np.int64)
    acc += (bias_o.astype(np.int64) << 8)[:, None, None]
    w64 = w_ocij.astype(np.int64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + (oh - 1) * sy + 1:sy, j:j + (ow - 1) * sx + 1:sx]
            acc += np.einsum("oc,cyx->oyx", w64[:, :, i, j], patch)
    return acc


def _depthwise_acc(x_chw, scalar_w, sy, sx, pad, kh, kw):
    c, ih, iw = x_chw.shape
    oh = (ih + 2 * pad - kh) // sy + 1
    ow = (iw + 2 * pad - kw) // sx + 1
    xp = np.zeros((c, ih + 2 * pad, iw + 2 * pad), dtype=np.int64)
    xp[:, pad:pad + ih, pad:pad + iw] = x_chw
    acc = np.zeros((c, oh, ow), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            acc += xp[:, i:i + (oh - 1) * sy + 1:sy, j:j + (ow - 1) * sx + 1:sx]
    return acc * int(scalar_w)


def _maxpool(x_chw, kh, kw, sy, sx, pad):
    c, ih, iw = x_chw.shape
    oh = (ih + 2 * pad - kh) // sy + 1
    ow = (iw + 2 * pad - kw) // sx + 1
    xp = np.full((c, ih + 2 * pad, iw + 2 * pad), Q88_MIN, dtype=np.int16)
    xp[:, pad:pad + ih, pad:pad + iw] = x_chw
    out = np.full((c, oh, ow), Q88_MIN, dtype=np.int16)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + (oh - 1) * sy + 1:sy, j:j + (ow - 1) * sx + 1:sx]
            np.maximum(out, patch, out=out)
    return out


def ref_layer(layer, input: Tensor, weights: dict, bypass: Tensor = None) -> Tensor:
    """Execute one layer exactly as the hardware defines it.

    `weights` maps archive refs to raw int16 arrays: (out_ch, in_ch, kh, kw)
    for Conv, (out_ch, in_features) for FullyConnected, (out_ch,) biases.
    """
    x = input.chw()
    kind = layer.kind
    if kind in ("Conv", "FullyConnected"):
        w = np.asarray(weights[layer.weights_ref], dtype=np.int16)
        b = np.asarray(weights[layer.bias_ref], dtype=np.int16)
        if kind == "FullyConnected":
            feats = input.ravel()
            if feats.size != layer.in_ch:
                raise ValueError(
                    f"layer {layer.id}: {feats.size} features != in_ch {layer.in_ch}")
            x = feats.reshape(layer.in_ch, 1, 1)
            w = w.reshape(layer.out_ch, layer.in_ch, 1, 1)
            acc = _conv_acc(x, w, b, 1, 1, 0)
        else:
            w = w.reshape(layer.out_ch, layer.in_ch, layer.kh, layer.kw)
            acc = _conv_acc(x, w, b, layer.sy, layer.sx, layer.pad)
        if bypass is not None:
            acc += bypass.chw().astype(np.int64) << 8
        elif layer.bypass_source is not None:
            raise ValueError(f"layer {layer.id}: bypass tensor required")
        return Tensor.from_chw(writeback_array(acc, layer.relu))
    if kind == "AvgPool":
        q = q88_quantize(1.0 / (layer.kh * layer.kw))
        acc = _depthwise_acc(x, q, layer.sy, layer.sx, layer.pad, layer.kh, layer.kw)
        return Tensor.from_chw(writeback_array(acc, layer.relu))
    if kind == "MaxPool":
        out = _maxpool(x, layer.kh, layer.kw, layer.sy, layer.sx, layer.pad)
        if layer.relu:
            out = np.maximum(out, 0)
        return Tensor.from_chw(out)
    raise ValueError(f"layer {layer.id}: cannot execute kind {kind}")


def run_reference(graph, input: Tensor, weights: dict) -> dict:
    """Run the whole model, returning {layer_id: output Tensor}."""
    outputs = {}
    for layer in graph.layers:
        prod = graph.producer_of(layer)
        x = input if prod is None else outputs[prod.id]
        byp = None
        if layer.bypass_source is not None:
            byp = outputs[layer.bypass_source]
        outputs[layer.id] = ref_layer(layer, x, weights, bypass=byp)
    return outputs


def load_weight_archive(graph) -> dict:
    """Load raw little-endian tensors for every ref the model names.

    Float archives are quantized on load; q88 archives are taken verbatim.
    """
    path = graph.weight_archive_path
    tensors = {}
    for layer in graph.layers:
        for ref, shape in _ref_shapes(layer):
            if ref is None or ref in tensors:
                continue
            fname = os.path.join(path, ref)
            if graph.weights_dtype == "q88":
                raw = np.fromfile(fname, dtype="<i2")
            else:
                raw = q88_quantize(np.fromfile(fname, dtype="<f4"))
            n = int(np.prod(shape))
            if raw.size != n:
                raise ValueError(f"{ref}: expected {n} elements, file has {raw.size}")
            tensors[ref] = raw.reshape(shape).astype(np.int16)
    return tensors


def _ref_shapes(layer):
    if layer.kind == "Conv":
        return [(layer.weights_ref, (layer.out_ch, layer.in_ch, layer.kh, layer.kw)),
                (layer.bias_ref, (layer.out_ch,))]
    if layer.kind == "FullyConnected":
        return [(layer.weights_ref, (layer.out_ch, layer.in_ch)),
                (layer.bias_ref, (layer.out_ch,))]
    return []
