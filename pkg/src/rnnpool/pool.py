"""The RNNPool operator and the strided RNNPool layer.

One operator call summarizes an r x c x k patch into a 4*h2 vector: RNN1
sweeps every row and every column of the patch, then RNN2 runs forward
and backward over the row summaries and over the column summaries.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fastgrnn as fg
from .errors import ShapeError
from .tensor import TensorMap

# nonzero fractions for (W1, U1, W2, U2)
SPARSITY_PRESETS = {
    "face-m4-sparsity": (0.5, 0.3, 0.3, 0.3),
}

_CHUNK = 2048  # patches per batched call; fixed so results never depend on worker count


@dataclass
class RnnPoolParams:
    rnn1: fg.FastGrnnCell
    rnn2: fg.FastGrnnCell
    patch_rows: int
    patch_cols: int

    def __post_init__(self):
        if self.patch_rows < 1 or self.patch_cols < 1:
            raise ShapeError("patch dimensions must be >= 1")
        if self.rnn2.input_dim != self.rnn1.hidden_dim:
            raise ShapeError(
                f"RNN2 input dim {self.rnn2.input_dim} != RNN1 hidden dim {self.rnn1.hidden_dim}")

    @property
    def in_channels(self) -> int:
        return self.rnn1.input_dim

    @property
    def h1(self) -> int:
        return self.rnn1.hidden_dim

    @property
    def h2(self) -> int:
        return self.rnn2.hidden_dim

    @property
    def out_dim(self) -> int:
        return 4 * self.rnn2.hidden_dim

    @property
    def dtype(self):
        return self.rnn1.dtype

    @classmethod
    def random(cls, in_channels, h1, h2, rows, cols=None, rng=None, dtype=np.float32,
               update_nonlin="tanh", gate_nonlin="sigmoid", scale=1.0) -> "RnnPoolParams":
        rng = np.random.default_rng(rng)
        kw = dict(update_nonlin=update_nonlin, gate_nonlin=gate_nonlin)
        c1 = fg.FastGrnnCell.random(in_channels, h1, rng, dtype=dtype, scale=scale, **kw)
        c2 = fg.FastGrnnCell.random(h1, h2, rng, dtype=dtype, scale=scale, **kw)
        return cls(c1, c2, rows, rows if cols is None else cols)

    def astype(self, dtype) -> "RnnPoolParams":
        return RnnPoolParams(self.rnn1.astype(dtype), self.rnn2.astype(dtype),
                             self.patch_rows, self.patch_cols)


@dataclass
class RnnPoolGrads:
    rnn1: dict
    rnn2: dict

    def flat(self) -> dict[str, np.ndarray]:
        out = {f"{k}1": v for k, v in self.rnn1.items()}
        out.update({f"{k}2": v for k, v in self.rnn2.items()})
        return out


@dataclass
class RnnPoolLayerCfg:
    params: RnnPoolParams
    stride: int
    pad_policy: str = "zero"

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def out_grid_dims(h: int, w: int, r: int, c: int, s: int) -> tuple[int, int]:
    """Grid of patch anchors at multiples of s; the map is zero-padded on the right and bottom."""
    if s < 1:
        raise ValueError("stride must be >= 1")
    return math.ceil(h / s), math.ceil(w / s)


def with_sparsity_preset(params: RnnPoolParams, name: str, rng=None) -> RnnPoolParams:
    try:
        w1, u1, w2, u2 = SPARSITY_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown sparsity preset {name!r}") from None
    rng = np.random.default_rng(rng)
    return RnnPoolParams(fg.with_sparsity(params.rnn1, w1, u1, rng),
                         fg.with_sparsity(params.rnn2, w2, u2, rng),
                         params.patch_rows, params.patch_cols)


def _run_many(cell, seqs, cache):
    """Run `cell` over several (T_i, B_i, d) stacks, merging stacks of equal length."""
    results = [None] * len(seqs)
    caches = []
    by_len = {}
    for i, xs in enumerate(seqs):
        by_len.setdefault(xs.shape[0], []).append(i)
    for idx in by_len.values():
        merged = np.concatenate([seqs[i] for i in idx], axis=1)
        hs, c = fg.run_with_cache(cell, merged)
        start = 0
        for i in idx:
            b = seqs[i].shape[1]
            results[i] = hs[-1, start:start + b]
            start += b
        if cache:
            caches.append((idx, [seqs[i].shape[1] for i in idx], c))
    return results, caches


def _backward_many(cell, caches, dlast, n_seqs):
    """Inverse of _run_many; dlast[i] is the gradient w.r.t. the final state of stack i."""
    dxs = [None] * n_seqs
    total = {k: 0.0 for k in ("W", "U", "b_z", "b_h")}
    for idx, sizes, c in caches:
        d = np.concatenate([dlast[i] for i in idx], axis=0)
        dx, grads, _ = fg.backward_with_cache(cell, c, d)
        start = 0
        for i, b in zip(idx, sizes):
            dxs[i] = dx[:, start:start + b]
            start += b
        for k in total:
            total[k] = total[k] + grads[k]
    return dxs, total


def _forward_batch(params: RnnPoolParams, patches: np.ndarray, cache=False):
    n, r, c, k = patches.shape
    rows = patches.transpose(2, 0, 1, 3).reshape(c, n * r, k)   # c steps along each row
    cols = patches.transpose(1, 0, 2, 3).reshape(r, n * c, k)   # r steps down each column
    (p_r, p_c), c1 = _run_many(params.rnn1, [rows, cols], cache)
    p_r = p_r.reshape(n, r, -1).transpose(1, 0, 2)
    p_c = p_c.reshape(n, c, -1).transpose(1, 0, 2)
    seqs2 = [p_r, p_r[::-1], p_c, p_c[::-1]]
    q, c2 = _run_many(params.rnn2, seqs2, cache)
    out = np.concatenate(q, axis=1)
    if not cache:
        return out, None
    return out, (c1, c2, patches.shape)


def rnnpool_forward_batch(params: RnnPoolParams, patches) -> np.ndarray:
    """Apply the operator to patches of shape (N, r, c, k); returns (N, 4*h2)."""
    patches = np.asarray(patches)
    expect = (params.patch_rows, params.patch_cols, params.in_channels)
    if patches.ndim != 4 or patches.shape[1:] != expect:
        raise ShapeError(f"patches must have shape (N, {expect[0]}, {expect[1]}, {expect[2]}), "
                         f"got {patches.shape}")
    return _forward_batch(params, patches)[0]


def rnnpool_forward(params: RnnPoolParams, patch) -> np.ndarray:
    """Summarize one r x c x k patch into a vector of length 4*h2.

    The output is ordered as [rows forward, rows backward, cols forward, cols backward].
    """
    arr = patch.data if isinstance(patch, TensorMap) else np.asarray(patch)
    return rnnpool_forward_batch(params, arr[None])[0]


def rnnpool_forward_cached(params: RnnPoolParams, patches):
    patches = np.asarray(patches)
    return _forward_batch(params, patches, cache=True)


def rnnpool_backward_batch(params: RnnPoolParams, cache, upstream):
    """Reverse-mode pass for a batch; returns (RnnPoolGrads, d_patches)."""
    c1, c2, shape = cache
    n, r, c, k = shape
    h2 = params.h2
    upstream = np.asarray(upstream)
    if upstream.shape != (n, 4 * h2):
        raise ShapeError(f"upstream must have shape {(n, 4 * h2)}, got {upstream.shape}")
    parts = [upstream[:, i * h2:(i + 1) * h2] for i in range(4)]
    dseq, g2 = _backward_many(params.rnn2, c2, parts, 4)
    dp_r = dseq[0] + dseq[1][::-1]
    dp_c = dseq[2] + dseq[3][::-1]
    d_rows = dp_r.transpose(1, 0, 2).reshape(n * r, -1)
    d_cols = dp_c.transpose(1, 0, 2).reshape(n * c, -1)
    (dx_rows, dx_cols), g1 = _backward_many(params.rnn1, c1, [d_rows, d_cols], 2)
    dpatch = dx_rows.reshape(c, n, r, k).transpose(1, 2, 0, 3)
    dpatch = dpatch + dx_cols.reshape(r, n, c, k).transpose(1, 0, 2, 3)
    return RnnPoolGrads(g1, g2), dpatch


def rnnpool_backward(params: RnnPoolParams, patch, upstream):
    """Gradients of <upstream, rnnpool_forward(params, patch)> w.r.t. all weights and the patch."""
    arr = patch.data if isinstance(patch, TensorMap) else np.asarray(patch)
    expect = (params.patch_rows, params.patch_cols, params.in_channels)
    if arr.shape != expect:
        raise ShapeError(f"patch shape {arr.shape} != {expect}")
    _, cache = rnnpool_forward_cached(params, arr[None])
    grads, dpatch = rnnpool_backward_batch(params, cache, np.asarray(upstream)[None])
    return grads, dpatch[0]


def gather_patches(arr: np.ndarray, r: int, c: int, s: int) -> np.ndarray:
    """All patches anchored at multiples of s, shape (H', W', r, c, k), zero-padded right/bottom."""
    h, w, k = arr.shape
    gh, gw = out_grid_dims(h, w, r, c, s)
    ph = max((gh - 1) * s + r, h)
    pw = max((gw - 1) * s + c, w)
    padded = np.zeros((ph, pw, k), dtype=arr.dtype)
    padded[:h, :w] = arr
    win = sliding_window_view(padded, (r, c), axis=(0, 1))[::s, ::s][:gh, :gw]
    # sliding_window_view puts the window axes last: (gh, gw, k, r, c)
    return win.transpose(0, 1, 3, 4, 2)


def rnnpool_layer_forward(cfg: RnnPoolLayerCfg, tmap, workers: int | None = None):
    """Slide the shared operator over the map with stride cfg.stride.

    Patches are evaluated in fixed-size chunks, so the result is bitwise the
    same for any number of worker threads.
    """
    arr = tmap.data if isinstance(tmap, TensorMap) else np.asarray(tmap)
    p = cfg.params
    if arr.ndim != 3 or arr.shape[2] != p.in_channels:
        raise ShapeError(f"map with shape {arr.shape} does not have {p.in_channels} channels")
    if cfg.pad_policy == "reject":
        h, w, _ = arr.shape
        if (h - p.patch_rows) % cfg.stride or (w - p.patch_cols) % cfg.stride:
            raise IndexError("patch grid does not tile the map without padding")
    win = gather_patches(arr, p.patch_rows, p.patch_cols, cfg.stride)
    gh, gw = win.shape[:2]
    flat = win.reshape(gh * gw, p.patch_rows, p.patch_cols, p.in_channels)
    chunks = [slice(i, min(i + _CHUNK, len(flat))) for i in range(0, len(flat), _CHUNK)]

    def work(sl):
        return rnnpool_forward_batch(p, np.ascontiguousarray(flat[sl]))

    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(work, chunks))
    else:
        outs = [work(sl) for sl in chunks]
    out = np.concatenate(outs, axis=0).reshape(gh, gw, p.out_dim)
    return TensorMap(out) if isinstance(tmap, TensorMap) else out


def rnnpool_cost(params: RnnPoolParams, h: int, w: int, s: int) -> tuple[int, int]:
    """(MAdds, parameter count) for one layer over an h x w input."""
    r, c = params.patch_rows, params.patch_cols
    per_patch = 2 * r * c * fg.step_madds(params.rnn1) + 2 * (r + c) * fg.step_madds(params.rnn2)
    gh, gw = out_grid_dims(h, w, r, c, s)
    return per_patch * gh * gw, fg.param_count(params.rnn1) + fg.param_count(params.rnn2)


def rnnpool_cost_dims(k: int, h1: int, h2: int, r: int, c: int, h: int, w: int, s: int):
    """rnnpool_cost from dimensions alone, without materializing weights."""
    step1 = h1 * k + h1 * h1 + 4 * h1
    step2 = h2 * h1 + h2 * h2 + 4 * h2
    gh, gw = out_grid_dims(h, w, r, c, s)
    params = (h1 * k + h1 * h1 + 2 * h1) + (h2 * h1 + h2 * h2 + 2 * h2)
    return (2 * r * c * step1 + 2 * (r + c) * step2) * gh * gw, params


_PHEADER = struct.Struct("<II")


def params_to_bytes(params: RnnPoolParams) -> bytes:
    return (_PHEADER.pack(params.patch_rows, params.patch_cols)
            + fg.cell_to_bytes(params.rnn1) + fg.cell_to_bytes(params.rnn2))


def params_from_bytes(buf: bytes, offset: int = 0, **kwargs):
    r, c = _PHEADER.unpack_from(buf, offset)
    c1, offset = fg.cell_from_bytes(buf, offset + _PHEADER.size, **kwargs)
    c2, offset = fg.cell_from_bytes(buf, offset, **kwargs)
    return RnnPoolParams(c1, c2, r, c), offset
