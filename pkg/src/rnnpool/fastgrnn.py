"""FastGRNN cell: single step, sequence runs with BPTT, masks and cost accounting.

The cell shares one input matrix W and one recurrent matrix U between the
gate and the candidate state:

    pre = W x + U h
    z   = gate(pre + b_z)
    h~  = update(pre + b_h)
    h'  = z * h + (zeta * (1 - z) + nu) * h~
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError


def quant_tanh(x):
    """Piecewise-linear tanh surrogate, clamp(x, -1, 1)."""
    return np.clip(x, -1.0, 1.0)


def quant_sigmoid(x):
    """Piecewise-linear sigmoid surrogate, clamp((x + 1) / 2, 0, 1)."""
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def _sigmoid(x):
    # tanh form never overflows and avoids masked indexing
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# name -> (function, derivative expressed through the pre-activation a and output y)
_UPDATE = {
    "tanh": (np.tanh, lambda a, y: 1.0 - y * y),
    "quantTanh": (quant_tanh, lambda a, y: ((a > -1.0) & (a < 1.0)).astype(a.dtype)),
}
_GATE = {
    "sigmoid": (_sigmoid, lambda a, y: y * (1.0 - y)),
    "quantSigmoid": (quant_sigmoid, lambda a, y: 0.5 * ((a > -1.0) & (a < 1.0)).astype(a.dtype)),
}


@dataclass
class FastGrnnCell:
    """Parameters of one FastGRNN cell.

    W has shape (hidden, input) and U has shape (hidden, hidden). Entries of
    W and U under a zero mask are forced to exactly 0 at construction.
    """

    W: np.ndarray
    U: np.ndarray
    b_z: np.ndarray
    b_h: np.ndarray
    zeta: float = 1.0
    nu: float = 0.0
    update_nonlin: str = "tanh"
    gate_nonlin: str = "sigmoid"
    w_mask: np.ndarray | None = field(default=None, repr=False)
    u_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.result_type(self.W, np.float32))
        dt = self.W.dtype
        self.U = np.array(self.U, dtype=dt)
        self.b_z = np.array(self.b_z, dtype=dt).reshape(-1)
        self.b_h = np.array(self.b_h, dtype=dt).reshape(-1)
        if self.W.ndim != 2 or self.U.ndim != 2:
            raise ShapeError("W and U must be matrices")
        h, d = self.W.shape
        if d < 1 or h < 1:
            raise ShapeError(f"input and hidden dimensions must be >= 1, got d={d}, h={h}")
        if self.U.shape != (h, h):
            raise ShapeError(f"U must be {h}x{h}, got {self.U.shape}")
        if self.b_z.shape != (h,) or self.b_h.shape != (h,):
            raise ShapeError("bias vectors must have the hidden dimension")
        if self.update_nonlin not in _UPDATE:
            raise ValueError(f"unknown update nonlinearity {self.update_nonlin!r}")
        if self.gate_nonlin not in _GATE:
            raise ValueError(f"unknown gate nonlinearity {self.gate_nonlin!r}")
        for name, mat in (("w_mask", self.W), ("u_mask", self.U)):
            mask = getattr(self, name)
            if mask is None:
                continue
            mask = np.asarray(mask).astype(bool)
            if mask.shape != mat.shape:
                raise ShapeError(f"{name} shape {mask.shape} != {mat.shape}")
            setattr(self, name, mask)
            mat[~mask] = 0.0

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0]

    @property
    def dtype(self):
        return self.W.dtype

    @classmethod
    def random(cls, input_dim: int, hidden_dim: int, rng=None, dtype=np.float32,
               scale: float = 1.0, **kwargs) -> "FastGrnnCell":
        """Gaussian init with 1/sqrt(fan-in) scaling and zero biases."""
        rng = np.random.default_rng(rng)
        if input_dim < 1 or hidden_dim < 1:
            raise ShapeError("input and hidden dimensions must be >= 1")
        W = rng.standard_normal((hidden_dim, input_dim)) * scale / np.sqrt(input_dim)
        U = rng.standard_normal((hidden_dim, hidden_dim)) * scale / np.sqrt(hidden_dim)
        z = np.zeros(hidden_dim)
        return cls(W.astype(dtype), U.astype(dtype), z.astype(dtype), z.astype(dtype), **kwargs)

    def astype(self, dtype) -> "FastGrnnCell":
        return replace(self, W=self.W.astype(dtype), U=self.U.astype(dtype),
                       b_z=self.b_z.astype(dtype), b_h=self.b_h.astype(dtype))

    def copy(self) -> "FastGrnnCell":
        return self.astype(self.dtype)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b_z": self.b_z, "b_h": self.b_h}


def param_count(cell: FastGrnnCell) -> int:
    h, d = cell.W.shape
    return h * d + h * h + 2 * h


def step_madds(cell: FastGrnnCell) -> int:
    h, d = cell.W.shape
    return h * d + h * h + 4 * h


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _gates(cell, pre):
    gate_fn = _GATE[cell.gate_nonlin][0]
    upd_fn = _UPDATE[cell.update_nonlin][0]
    a_z = pre + cell.b_z
    a_h = pre + cell.b_h
    return a_z, a_h, gate_fn(a_z), upd_fn(a_h)


def step(cell: FastGrnnCell, x, h_prev):
    """One recurrence step. Leading axes of x and h_prev are batch axes."""
    x = np.asarray(x)
    h_prev = np.asarray(h_prev)
    if x.shape[-1] != cell.input_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, cell expects {cell.input_dim}")
    if h_prev.shape[-1] != cell.hidden_dim:
        raise ShapeError(f"state has dimension {h_prev.shape[-1]}, cell expects {cell.hidden_dim}")
    _check_finite(x, "input")
    _check_finite(h_prev, "state")
    pre = x @ cell.W.T + h_prev @ cell.U.T
    _, _, z, h_tilde = _gates(cell, pre)
    return z * h_prev + (cell.zeta * (1.0 - z) + cell.nu) * h_tilde


def run(cell: FastGrnnCell, sequence, h0=None):
    """Fold `step` over the first axis of `sequence` and return the last state."""
    seq = np.asarray(sequence)
    if seq.ndim < 2 or seq.shape[0] == 0:
        raise ValueError("sequence must be non-empty with shape (T, ..., input_dim)")
    if h0 is None:
        h = np.zeros(seq.shape[1:-1] + (cell.hidden_dim,), dtype=np.result_type(seq, cell.dtype))
    else:
        h = np.asarray(h0)
    for x in seq:
        h = step(cell, x, h)
    return h


@dataclass
class SequenceCache:
    xs: np.ndarray
    hs: np.ndarray      # hs[0] is h0, hs[t + 1] the state after step t
    a_z: np.ndarray
    a_h: np.ndarray
    z: np.ndarray
    h_tilde: np.ndarray


def run_with_cache(cell: FastGrnnCell, xs, h0=None):
    """Run over xs of shape (T, B, d); return all states (T+1, B, h) and a cache for BPTT."""
    xs = np.asarray(xs)
    if xs.ndim != 3 or xs.shape[0] == 0:
        raise ValueError("xs must have shape (T, B, input_dim) with T >= 1")
    if xs.shape[-1] != cell.input_dim:
        raise ShapeError(f"input has dimension {xs.shape[-1]}, cell expects {cell.input_dim}")
    _check_finite(xs, "input")
    T, B, _ = xs.shape
    h = cell.hidden_dim
    dt = np.result_type(xs, cell.dtype)
    hs = np.empty((T + 1, B, h), dtype=dt)
    hs[0] = 0.0 if h0 is None else h0
    a_z = np.empty((T, B, h), dtype=dt)
    a_h = np.empty_like(a_z)
    z = np.empty_like(a_z)
    ht = np.empty_like(a_z)
    # input projections for all steps in one product
    wx = (xs.reshape(T * B, -1) @ cell.W.T).reshape(T, B, h)
    for t in range(T):
        pre = wx[t] + hs[t] @ cell.U.T
        a_z[t], a_h[t], z[t], ht[t] = _gates(cell, pre)
        hs[t + 1] = z[t] * hs[t] + (cell.zeta * (1.0 - z[t]) + cell.nu) * ht[t]
    return hs, SequenceCache(xs, hs, a_z, a_h, z, ht)


def backward_with_cache(cell: FastGrnnCell, cache: SequenceCache, dh_last, dhs=None):
    """Backpropagate through a cached run.

    Args:
        dh_last: gradient w.r.t. the final state, shape (B, h).
        dhs: optional extra gradients w.r.t. every state hs[1:], shape (T, B, h).

    Returns:
        (dxs, grads, dh0) where grads maps W, U, b_z, b_h to arrays.
    """
    gate_d = _GATE[cell.gate_nonlin][1]
    upd_d = _UPDATE[cell.update_nonlin][1]
    xs, hs = cache.xs, cache.hs
    T = xs.shape[0]
    dpres = np.empty(cache.a_z.shape, dtype=hs.dtype)
    dhz = np.empty_like(dpres)
    dhh = np.empty_like(dpres)
    dh = np.array(dh_last, dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[t]
        z, ht = cache.z[t], cache.h_tilde[t]
        d_ht = dh * (cell.zeta * (1.0 - z) + cell.nu)
        d_z = dh * (hs[t] - cell.zeta * ht)
        da_z = d_z * gate_d(cache.a_z[t], z)
        da_h = d_ht * upd_d(cache.a_h[t], ht)
        dpre = da_z + da_h
        dpres[t], dhz[t], dhh[t] = dpre, da_z, da_h
        dh = dh * z + dpre @ cell.U
    B = xs.shape[1]
    flat_pre = dpres.reshape(T * B, -1)
    grads = {
        "W": flat_pre.T @ xs.reshape(T * B, -1),
        "U": flat_pre.T @ hs[:-1].reshape(T * B, -1),
        "b_z": dhz.sum(axis=(0, 1)),
        "b_h": dhh.sum(axis=(0, 1)),
    }
    if cell.w_mask is not None:
        grads["W"] = grads["W"] * cell.w_mask
    if cell.u_mask is not None:
        grads["U"] = grads["U"] * cell.u_mask
    dxs = (flat_pre @ cell.W).reshape(xs.shape)
    return dxs, grads, dh


def random_mask(shape, density: float, rng=None) -> np.ndarray:
    """Binary mask with exactly round(density * size) ones at random positions."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    size = int(np.prod(shape))
    keep = int(round(density * size))
    flat = np.zeros(size, dtype=bool)
    flat[rng.choice(size, size=keep, replace=False)] = True
    return flat.reshape(shape)


def with_sparsity(cell: FastGrnnCell, w_density: float, u_density: float, rng=None) -> FastGrnnCell:
    rng = np.random.default_rng(rng)
    return replace(cell, W=cell.W.copy(), U=cell.U.copy(),
                   w_mask=random_mask(cell.W.shape, w_density, rng),
                   u_mask=random_mask(cell.U.shape, u_density, rng))


def nonzero_fraction(mat) -> float:
    mat = np.asarray(mat)
    return float(np.count_nonzero(mat)) / mat.size


_HEADER = struct.Struct("<II")


def cell_to_bytes(cell: FastGrnnCell) -> bytes:
    """Header (d, h) as uint32 followed by float32 W, U, b_z, b_h, little-endian."""
    parts = [_HEADER.pack(cell.input_dim, cell.hidden_dim)]
    for arr in (cell.W, cell.U, cell.b_z, cell.b_h):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def cell_from_bytes(buf: bytes, offset: int = 0, **kwargs) -> tuple[FastGrnnCell, int]:
    """Inverse of cell_to_bytes; returns the cell and the offset just past it."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError(f"truncated cell header at byte {offset}")
    d, h = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    sizes = [h * d, h * h, h, h]
    need = 4 * sum(sizes)
    if len(buf) - offset < need:
        raise ValueError(f"truncated cell payload at byte {offset}: need {need} bytes")
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float32))
        offset += 4 * n
    W = arrays[0].reshape(h, d)
    U = arrays[1].reshape(h, h)
    return FastGrnnCell(W, U, arrays[2], arrays[3], **kwargs), offset
