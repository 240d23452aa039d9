"""Per-channel 8-bit quantization and an integer inference path.

Codes are unsigned bytes with an asymmetric affine map per channel,
``x ~ (q - zero_point) * scale``. The real range of each channel is widened
to contain zero so that zero padding and ReLU outputs stay exact. Rounding
is half away from zero.

The integer path quantizes weights per output channel and activations per
channel (calibrated on a float run of the same input), accumulates every
linear op in 64-bit integers per input channel and requantizes after each
op. Recurrent states of RNNPool cells live on a fixed grid over [-1, 1].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, QuantizationError, ShapeError
from .executor import _ACT, _Kernel, _prepare, _window, _pad_axis
from .graph import Graph, NetworkSpec
from .pool import gather_patches
from .tensor import TensorMap

_MAGIC = b"RPQ1"
_STATE_LO, _STATE_HI = -1.0, 1.0


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray         # uint8 codes, original shape
    scale: np.ndarray        # float32, one per channel
    zero_point: np.ndarray   # float32, one per channel
    shape: tuple
    axis: int

    @property
    def channels(self) -> int:
        return self.shape[self.axis]

    def _bcast(self, v):
        shape = [1] * len(self.shape)
        shape[self.axis] = -1
        return np.asarray(v, dtype=np.float64).reshape(shape)

    def centered(self) -> np.ndarray:
        """Integer codes minus zero points; exact in int64 for non-degenerate channels."""
        return self.data.astype(np.int64) - self._bcast(self.zero_point).astype(np.int64)


def _channel_params(lo_raw, hi_raw, exact_constant=True):
    """Scale and zero point for one channel with raw range [lo_raw, hi_raw]."""
    if hi_raw == lo_raw and (exact_constant or lo_raw == 0):
        return np.float32(1.0), np.float32(-lo_raw)
    lo, hi = min(lo_raw, 0.0), max(hi_raw, 0.0)
    span = float(hi) - float(lo)
    # spans far below float32 range would round the scale to 0
    scale = max(np.float32(span / 255.0), np.finfo(np.float32).smallest_subnormal)
    while span / float(scale) > 255.0:
        scale = np.nextafter(scale, np.float32(np.inf))
    zp = float(np.clip(round_half_away(-lo / float(scale)), 0, 255))
    return scale, np.float32(zp)


def quantize_with(x, scale, zero_point, axis=-1) -> QuantTensor:
    """Quantize with given per-channel parameters."""
    arr = np.asarray(x, dtype=np.float64)
    axis = axis % arr.ndim
    shape = [1] * arr.ndim
    shape[axis] = -1
    s = np.asarray(scale, dtype=np.float64).reshape(shape)
    z = np.asarray(zero_point, dtype=np.float64).reshape(shape)
    const = (np.asarray(scale) == 1) & (np.asarray(zero_point) != round_half_away(zero_point))
    codes = np.clip(round_half_away(arr / s + z), 0, 255)
    if const.any():
        codes = np.where(const.reshape(shape), 0, codes)
    return QuantTensor(codes.astype(np.uint8), np.asarray(scale, np.float32),
                       np.asarray(zero_point, np.float32), arr.shape, axis)


def quantize_per_channel(t, axis: int = -1, exact_constant: bool = True) -> QuantTensor:
    """Asymmetric uint8 quantization with one (scale, zero point) per channel.

    A constant channel gets scale 1, all-zero codes and a zero point equal to
    minus its value, so it dequantizes exactly. With exact_constant=False it
    is treated like any other range instead, keeping every zero point an
    integer as the integer kernels require.
    """
    arr = t.data if isinstance(t, TensorMap) else np.asarray(t)
    if not np.isfinite(arr).all():
        raise NumericError("cannot quantize non-finite values")
    if arr.ndim == 0:
        raise ShapeError("need at least one axis")
    axis = axis % arr.ndim
    moved = np.moveaxis(arr, axis, 0).reshape(arr.shape[axis], -1)
    params = [_channel_params(float(row.min()), float(row.max()), exact_constant) if row.size else
              (np.float32(1.0), np.float32(0.0)) for row in moved]
    scale = np.array([p[0] for p in params], dtype=np.float32)
    zp = np.array([p[1] for p in params], dtype=np.float32)
    return quantize_with(arr, scale, zp, axis)


def dequantize(q: QuantTensor, dtype=np.float64) -> np.ndarray:
    out = (q.data.astype(np.float64) - q._bcast(q.zero_point)) * q._bcast(q.scale)
    return out.astype(dtype)


# --------------------------------------------------------------------------------------
# file format

def quant_to_bytes(q: QuantTensor) -> bytes:
    """Header (ndim, shape, axis as uint32), float32 scales and zero points, uint8 codes."""
    head = struct.pack(f"<I{len(q.shape)}II", len(q.shape), *q.shape, q.axis)
    return (head + q.scale.astype("<f4").tobytes() + q.zero_point.astype("<f4").tobytes()
            + np.ascontiguousarray(q.data).tobytes())


def quant_from_bytes(buf: bytes, offset: int = 0) -> tuple[QuantTensor, int]:
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    (axis,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    c = shape[axis] if ndim else 1
    scale = np.frombuffer(buf, "<f4", c, offset).astype(np.float32)
    offset += 4 * c
    zp = np.frombuffer(buf, "<f4", c, offset).astype(np.float32)
    offset += 4 * c
    n = int(np.prod(shape))
    if offset + n > len(buf):
        raise ValueError(f"truncated payload at byte {offset}")
    data = np.frombuffer(buf, np.uint8, n, offset).reshape(shape).copy()
    return QuantTensor(data, scale, zp, tuple(shape), axis), offset + n


def save_quantized(path, tensors: dict[str, QuantTensor]) -> None:
    """Named tensors: count, then per tensor a length-prefixed UTF-8 name and its record."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(tensors)))
        for name, q in tensors.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw + quant_to_bytes(q))


def load_quantized(path) -> dict[str, QuantTensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError("not a quantized weight file")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, offset)
        name = buf[offset + 4:offset + 4 + n].decode()
        q, offset = quant_from_bytes(buf, offset + 4 + n)
        out[name] = q
    return out


def quantize_weights(g: Graph, weights: dict) -> dict[str, QuantTensor]:
    """Quantize every weight array per output channel; biases stay in float."""
    out = {}
    for pid, entry in weights.items():
        name = g.prims[pid].name
        if "rnnpool" in entry:
            params = entry["rnnpool"]
            for tag, cell in (("rnn1", params.rnn1), ("rnn2", params.rnn2)):
                out[f"{name}/{tag}/W"] = quantize_per_channel(cell.W, axis=0)
                out[f"{name}/{tag}/U"] = quantize_per_channel(cell.U, axis=0)
        else:
            out[f"{name}/w"] = quantize_per_channel(entry["w"], axis=-1)
    return out


# --------------------------------------------------------------------------------------
# integer inference

def _state_params(h):
    scale, zp = _channel_params(_STATE_LO, _STATE_HI)
    return np.full(h, scale, np.float32), np.full(h, zp, np.float32)


def _qlinear(xc, x_scale, wq: QuantTensor):
    """sum_c x_scale[c] * sum_p (qx - zx)[n, p, c] * (qw - zw)[p, c, o], times w_scale[o].

    `xc` holds centered activation codes (N, P, C); `wq` codes have shape (P, C, O).
    """
    wc = wq.centered().reshape(xc.shape[1], xc.shape[2], -1)
    acc = np.einsum("npc,pco->nco", xc, wc)           # exact integer accumulation
    real = np.einsum("nco,c->no", acc.astype(np.float64), x_scale.astype(np.float64))
    return real * wq.scale.astype(np.float64)


def _check_cell(cell, name):
    if cell.gate_nonlin != "quantSigmoid" or cell.update_nonlin != "quantTanh":
        raise QuantizationError(f"{name}: integer path needs quantSigmoid/quantTanh cells")


class _QCell:
    def __init__(self, cell, in_scale):
        self.cell = cell
        self.W = quantize_per_channel(cell.W.T, axis=1, exact_constant=False)     # (d, h): per hidden unit
        self.U = quantize_per_channel(cell.U.T, axis=1, exact_constant=False)
        self.in_scale = np.asarray(in_scale, np.float32)
        self.h_scale, self.h_zp = _state_params(cell.hidden_dim)

    def run(self, xs_c):
        """xs_c: centered input codes (T, B, d); returns centered state codes (B, h)."""
        T, B, _ = xs_c.shape
        cell = self.cell
        h_c = np.zeros((B, cell.hidden_dim), dtype=np.int64)
        for t in range(T):
            pre = (_qlinear(xs_c[t][:, None, :], self.in_scale, self.W)
                   + _qlinear(h_c[:, None, :], self.h_scale, self.U))
            a_z = pre + cell.b_z
            a_h = pre + cell.b_h
            z = np.clip((a_z + 1.0) / 2.0, 0.0, 1.0)
            h_tilde = np.clip(a_h, -1.0, 1.0)
            h_prev = h_c * self.h_scale.astype(np.float64)
            h = z * h_prev + (cell.zeta * (1.0 - z) + cell.nu) * h_tilde
            q = quantize_with(h, self.h_scale, self.h_zp, axis=1)
            h_c = q.centered()
        return h_c


def _rnnpool_q(p, params, xq: QuantTensor, shape_in):
    """Integer RNNPool over a whole map; returns centered output codes on the state grid."""
    _check_cell(params.rnn1, p.name)
    _check_cell(params.rnn2, p.name)
    r, c, s = p.k[0], p.k[1], p.stride
    xc = xq.centered()
    win = gather_patches(xc, r, c, s)
    gh, gw = win.shape[:2]
    n = gh * gw
    patches = win.reshape(n, r, c, -1)
    k = patches.shape[3]
    q1 = _QCell(params.rnn1, xq.scale)
    rows = q1.run(patches.transpose(2, 0, 1, 3).reshape(c, n * r, k)).reshape(n, r, -1)
    cols = q1.run(patches.transpose(1, 0, 2, 3).reshape(r, n * c, k)).reshape(n, c, -1)
    q2 = _QCell(params.rnn2, q1.h_scale)
    seqs = [rows.transpose(1, 0, 2), cols.transpose(1, 0, 2)]
    outs = []
    for seq in seqs:
        outs.append(q2.run(seq))
        outs.append(q2.run(seq[::-1]))
    out = np.concatenate(outs, axis=1).reshape(gh, gw, -1)
    scale = np.tile(q2.h_scale, 4)
    zp = np.tile(q2.h_zp, 4)
    return out, scale, zp


def _float_maps(g: Graph, arr, weights):
    kern = _Kernel(g, weights)
    kern.dtype = arr.dtype
    maps = {0: arr}

    def get(pid, a, b):
        parts = [maps[q][a:b + 1] for q in g.leaves(pid)]
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)

    for p in g.prims[1:]:
        if not p.virtual:
            maps[p.id] = kern.lines(p.id, get, 0, p.shape[0] - 1, 0)
    return maps, get


@dataclass
class DivergenceReport:
    per_layer: dict           # prim name -> max |quant - float| / max |float|

    @property
    def worst(self) -> float:
        return max(self.per_layer.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"per_layer": self.per_layer, "worst": self.worst}


def run_quantized(net: NetworkSpec | Graph, x, weights: dict | None = None, seed=0):
    """Integer inference; returns (float output, DivergenceReport vs the float path).

    Activation parameters are calibrated per channel on the float run of
    this input. The final op is not requantized: its real-valued
    accumulator is returned.
    """
    g, arr, weights = _prepare(net, x, weights, seed)
    ref, _ = _float_maps(g, arr.astype(np.float64), weights)
    qmaps = {0: quantize_per_channel(arr, axis=2, exact_constant=False)}
    report = {}
    final = None

    def qget(pid):
        leaves = g.leaves(pid)
        if len(leaves) == 1:
            return qmaps[leaves[0]]
        qs = [qmaps[q] for q in leaves]
        return QuantTensor(np.concatenate([q.data for q in qs], axis=2),
                           np.concatenate([q.scale for q in qs]),
                           np.concatenate([q.zero_point for q in qs]),
                           g.prims[pid].shape, 2)

    for p in g.prims[1:]:
        if p.virtual:
            continue
        if p.op == "rnnpool":
            codes, scale, zp = _rnnpool_q(p, weights[p.id]["rnnpool"], qget(p.inputs[0]),
                                          g.prims[p.inputs[0]].shape)
            real = codes * scale.astype(np.float64)
        else:
            real = _real_op(g, p, weights, qget)
        if p.id == g.output:
            final = real
        elif p.op == "rnnpool":
            qmaps[p.id] = QuantTensor((codes + zp.astype(np.int64)).astype(np.uint8), scale, zp,
                                      real.shape, 2)
        else:
            qmaps[p.id] = quantize_per_channel(real, axis=2, exact_constant=False)
        denom = float(np.abs(ref[p.id]).max())
        diff = float(np.abs(real - ref[p.id]).max())
        report[p.name] = diff / denom if denom else diff
    if final is None:
        final = dequantize(qget(g.output))
    out = final.astype(arr.dtype)
    return (TensorMap(out) if isinstance(x, TensorMap) else out), DivergenceReport(report)


def _real_op(g, p, weights, qget):
    """Real-valued output of one op computed from integer codes."""
    xq = qget(p.inputs[0])
    shape_in = g.prims[p.inputs[0]].shape
    if p.op == "conv":
        xc = _pad_axis(_pad_axis(xq.centered(), 0, p.pad, p.pad), 1, p.pad, p.pad)
        win = _window(xc, p)                                  # (Ho, Wo, C, kh, kw)
        ho, wo, cin = win.shape[:3]
        cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, p.k[0] * p.k[1], cin)
        wq = quantize_per_channel(weights[p.id]["w"], axis=-1, exact_constant=False)
        y = _qlinear(cols, xq.scale, wq).reshape(ho, wo, -1) + weights[p.id]["b"]
        return _ACT[p.act](y)
    if p.op == "dwconv":
        xc = _pad_axis(_pad_axis(xq.centered(), 0, p.pad, p.pad), 1, p.pad, p.pad)
        wq = quantize_per_channel(weights[p.id]["w"], axis=-1, exact_constant=False)
        win = _window(xc, p)                                  # (Ho, Wo, C, kh, kw)
        wc = wq.centered().transpose(2, 0, 1)                 # (C, kh, kw)
        acc = np.einsum("hwcij,cij->hwc", win, wc)
        y = acc * (xq.scale.astype(np.float64) * wq.scale) + weights[p.id]["b"]
        return _ACT[p.act](y)
    if p.op == "maxpool":
        codes = xq.data.astype(np.int64)
        padded = _pad_axis(_pad_axis(codes, 0, p.pad, p.pad, -1), 1, p.pad, p.pad, -1)
        best = _window(padded, p).max(axis=(3, 4))
        return (best - xq.zero_point.astype(np.float64)) * xq.scale
    if p.op == "avgpool":
        xc = _pad_axis(_pad_axis(xq.centered(), 0, p.pad, p.pad), 1, p.pad, p.pad)
        acc = _window(xc, p).sum(axis=(3, 4))
        return acc * xq.scale.astype(np.float64) / (p.k[0] * p.k[1])
    if p.op == "add":
        a = dequantize(qget(p.inputs[0]))
        b = dequantize(qget(p.inputs[1]))
        return _ACT[p.act](a + b)
    if p.op == "fc":
        h, w, cin = shape_in
        xc = xq.centered().reshape(1, h * w, cin)
        wt = weights[p.id]["w"].reshape(h * w, cin, -1)
        wq = quantize_per_channel(wt, axis=-1, exact_constant=False)
        y = _qlinear(xc, xq.scale, wq).reshape(1, 1, -1) + weights[p.id]["b"]
        return _ACT[p.act](y)
    raise QuantizationError(f"{p.name}: op {p.op!r} has no integer implementation")
