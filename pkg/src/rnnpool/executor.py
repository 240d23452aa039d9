"""Reference and streaming executors with live activation accounting.

Both executors evaluate every map one line (row, or column for wide
outputs) at a time through the same kernel, so they agree bitwise when they
walk the same axis. Zero padding is synthesized on the fly and never stored.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import memplan
from .dag import _release_sets
from .errors import PlanningError, ShapeError
from .graph import Graph, NetworkSpec, init_weights, lower
from .pool import gather_patches, out_grid_dims, rnnpool_forward_batch
from .tensor import TensorMap


@dataclass
class ArenaStats:
    """Running byte count of live activations with an event log."""
    current_bytes: int = 0
    peak_bytes: int = 0
    events: list = field(default_factory=list)   # (step, layer, delta, current, peak)
    step: int = 0

    def alloc(self, layer: str, nbytes: int) -> None:
        if nbytes:
            self._record(layer, int(nbytes))

    def free(self, layer: str, nbytes: int) -> None:
        if nbytes:
            self._record(layer, -int(nbytes))

    def _record(self, layer, delta):
        self.current_bytes += delta
        if self.current_bytes < 0:
            raise PlanningError(f"arena underflow at {layer}")
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.events.append((self.step, layer, delta, self.current_bytes, self.peak_bytes))

    def tick(self) -> None:
        self.step += 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "layer", "delta_bytes", "current", "peak"])
            w.writerows(self.events)


_ACT = {
    "none": lambda x: x,
    "relu": lambda x: np.maximum(x, 0),
    "relu6": lambda x: np.clip(x, 0, 6),
}


def _pad_axis(slab, axis, before, after, value=0.0):
    if not before and not after:
        return slab
    widths = [(0, 0)] * slab.ndim
    widths[axis] = (before, after)
    return np.pad(slab, widths, constant_values=value)


def _window(x, p):
    """(Ho, Wo, C, kh, kw) view of valid windows with stride p.stride."""
    kh, kw = p.k
    return sliding_window_view(x, (kh, kw), axis=(0, 1))[::p.stride, ::p.stride]


class _Kernel:
    """Computes lines of a prim from lines of its inputs."""

    def __init__(self, g: Graph, weights: dict, per_patch: bool = False):
        self.g = g
        self.w = weights
        self.per_patch = per_patch

    def slab(self, get, pid, a, b, axis, fill=0.0):
        """Lines a..b of map `pid` along `axis`, padded with `fill` outside the map."""
        n = self.g.prims[pid].shape[axis]
        lo, hi = max(a, 0), min(b, n - 1)
        if lo > hi:
            shape = list(self.g.prims[pid].shape)
            shape[axis] = b - a + 1
            return np.full(shape, fill, dtype=self.dtype)
        x = get(pid, lo, hi)
        return _pad_axis(x, axis, lo - a, b - hi, fill)

    def lines(self, pid, get, lo, hi, axis):
        """Lines lo..hi of prim `pid`; `get(pid, a, b)` returns in-range input lines."""
        p = self.g.prims[pid]
        other = 1 - axis
        if p.op in ("conv", "dwconv", "maxpool", "avgpool"):
            x = p.inputs[0]
            fill = -np.inf if p.op == "maxpool" else 0.0
            k = p.k[axis]
            a = lo * p.stride - p.pad
            s = self.slab(get, x, a, hi * p.stride - p.pad + k - 1, axis, fill)
            s = _pad_axis(s, other, p.pad, p.pad, fill)
            n_other = p.shape[other]
            if p.op == "conv":
                win = _window(s, p)
                ho, wo = win.shape[:2]
                cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, -1)
                wt = self.w[pid]["w"]
                y = (cols @ wt.reshape(-1, wt.shape[-1])).reshape(ho, wo, -1) + self.w[pid]["b"]
            elif p.op == "dwconv":
                wt = self.w[pid]["w"]
                kh, kw = p.k
                ho = (s.shape[0] - kh) // p.stride + 1
                wo = (s.shape[1] - kw) // p.stride + 1
                y = np.zeros((ho, wo, s.shape[2]), dtype=s.dtype)
                for dy in range(kh):
                    for dx in range(kw):
                        y += s[dy:dy + p.stride * (ho - 1) + 1:p.stride,
                               dx:dx + p.stride * (wo - 1) + 1:p.stride] * wt[dy, dx]
                y = y + self.w[pid]["b"]
            elif p.op == "maxpool":
                y = _window(s, p).max(axis=(3, 4))
            else:
                y = _window(s, p).mean(axis=(3, 4))
            y = _ACT[p.act](y)
            sl = [slice(None)] * 3
            sl[other] = slice(0, n_other)
            return np.ascontiguousarray(y[tuple(sl)])
        if p.op == "rnnpool":
            return self._rnnpool(p, get, lo, hi, axis)
        if p.op == "add":
            a, b = (get(x, lo, hi) for x in p.inputs)
            return _ACT[p.act](a + b)
        if p.op == "fc":
            x = p.inputs[0]
            full = get(x, 0, self.g.prims[x].shape[axis] - 1)
            y = full.reshape(-1) @ self.w[pid]["w"] + self.w[pid]["b"]
            return _ACT[p.act](y).reshape(1, 1, -1)
        raise PlanningError(f"cannot execute op {p.op!r}")

    def _rnnpool(self, p, get, lo, hi, axis):
        params = self.w[p.id]["rnnpool"]
        x = p.inputs[0]
        xh, xw, _ = self.g.prims[x].shape
        r, c, s = p.k[0], p.k[1], p.stride
        gh, gw = out_grid_dims(xh, xw, r, c, s)
        other = 1 - axis
        k_axis, k_other = p.k[axis], p.k[other]
        g_other = (gh, gw)[other]
        slab = self.slab(get, x, lo * s, hi * s + k_axis - 1, axis)
        need_other = (g_other - 1) * s + k_other
        slab = _pad_axis(slab, other, 0, max(need_other - slab.shape[other], 0))
        win = gather_patches(slab, r, c, s)
        sl = [slice(None)] * 2
        sl[axis] = slice(0, hi - lo + 1)
        sl[other] = slice(0, g_other)
        win = win[tuple(sl)]
        n0, n1 = win.shape[:2]
        flat = win.reshape(n0 * n1, r, c, -1)
        if self.per_patch:
            out = np.stack([rnnpool_forward_batch(params, np.ascontiguousarray(q[None]))[0]
                            for q in flat])
        else:
            out = rnnpool_forward_batch(params, np.ascontiguousarray(flat))
        return out.reshape(n0, n1, -1)


def _prepare(net, x, weights, seed):
    g = net if isinstance(net, Graph) else lower(net)
    arr = x.data if isinstance(x, TensorMap) else np.asarray(x)
    if arr.shape != tuple(g.net.input_shape):
        raise ShapeError(f"input shape {arr.shape} does not match {tuple(g.net.input_shape)}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if weights is None:
        weights = init_weights(g, rng=seed, dtype=arr.dtype)
    return g, arr, weights


def _wrap(x, arr):
    return TensorMap(arr) if isinstance(x, TensorMap) else arr


def run_naive(net: NetworkSpec | Graph, x, weights: dict | None = None, seed=0):
    """Layer-by-layer reference execution.

    Every prim map is fully materialized, in topological order. The arena is
    charged per top-level layer with the layer-by-layer accounting rules, so
    the measured peak reproduces memplan.layerbylayer_peak.
    """
    g, arr, weights = _prepare(net, x, weights, seed)
    kern = _Kernel(g, weights)
    kern.dtype = arr.dtype
    maps = {g.prims[0].id: arr}
    size = arr.dtype.itemsize

    def get(pid, a, b):
        leaves = g.leaves(pid)
        parts = [maps[q][a:b + 1] for q in leaves]
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)

    remaining = {}
    for p in g.prims:
        if not p.virtual:
            for d in p.inputs:
                for leaf in g.leaves(d):
                    remaining[leaf] = remaining.get(leaf, 0) + 1
    keep = set(g.leaves(g.output))

    foot = memplan.unit_footprints(g, arr.dtype)
    stem = memplan.streamed_stem(g.net)
    stats = ArenaStats()
    elems = lambda pid: int(np.prod(g.prims[pid].shape))   # noqa: E731
    charged = 0 if stem >= 0 else elems(g.boundaries[0]) * size
    stats.alloc("input", charged)
    for u in range(len(g.net.layers)):
        name = g.net.layer_name(u)
        for p in g.unit_prims(u):
            if p.virtual:
                continue
            maps[p.id] = np.concatenate([kern.lines(p.id, get, i, i, 0)
                                         for i in range(p.shape[0])], axis=0)
            for d in p.inputs:
                for leaf in g.leaves(d):
                    remaining[leaf] -= 1
                    if remaining[leaf] <= 0 and leaf not in keep:
                        maps.pop(leaf, None)
        out_bytes = elems(g.boundaries[u + 1]) * size
        materialized = u >= stem and not _is_unmaterialized(g.net.layers[u])
        stats.alloc(name, max(foot[u][1] - charged, 0))
        stats.free(name, stats.current_bytes)
        if materialized or u == len(g.net.layers) - 1:
            stats.alloc(name, out_bytes)
            charged = out_bytes
        else:
            charged = 0
        stats.tick()
    if not g.net.layers:
        stats.free("input", charged)
        stats.alloc("input", elems(g.boundaries[0]) * size)
    out = get(g.output, 0, g.prims[g.output].shape[0] - 1)
    return _wrap(x, out), stats


def _is_unmaterialized(layer) -> bool:
    return memplan._is_1x1(layer)


def run_streaming(net: NetworkSpec | Graph, x, schedule=None, weights: dict | None = None,
                  seed=0, eviction: str = "strict"):
    """Execute a row-first schedule, holding only the lines the schedule keeps live.

    `schedule` is a memplan.RowwiseBound for the whole network (built on
    demand). RNNPool lines are evaluated one patch at a time; a padded patch
    copy and the recurrent state buffers are charged as transient scratch,
    exactly as the schedule's DAG predicts.
    """
    g, arr, weights = _prepare(net, x, weights, seed)
    size = arr.dtype.itemsize
    L = len(g.net.layers)
    if L == 0:
        stats = ArenaStats()
        stats.alloc("input", arr.nbytes)
        return _wrap(x, arr.copy()), stats
    if schedule is None:
        schedule = memplan.rowwise_schedule_bound(g, (0, L), include_io=True,
                                                  eviction=eviction)
    if schedule.granularity != "row":
        raise PlanningError("the streaming executor runs row-granular schedules")
    if tuple(schedule.segment) != (0, L):
        raise PlanningError(f"schedule covers boundaries {schedule.segment}, need (0, {L})")
    dag, index, axis = schedule.dag, schedule.index, schedule.axis
    expected = sum(g.prims[p].shape[axis] for p in range(len(g.prims))
                   if not g.prims[p].virtual)
    if len(dag) != expected:
        raise PlanningError("schedule does not match this network")
    where = {nid: key for key, nid in index.items()}

    kern = _Kernel(g, weights, per_patch=True)
    kern.dtype = arr.dtype
    store = {}
    for i in range(g.prims[0].shape[axis]):
        store[(0, i)] = np.take(arr, [i], axis=axis)

    def get(pid, a, b):
        parts = []
        for leaf in g.leaves(pid):
            lines = [store[(leaf, i)] for i in range(a, b + 1)]
            parts.append(np.concatenate(lines, axis=axis))
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=2)

    release = _release_sets(dag, eviction)
    pos = {nid: t for t, nid in enumerate(schedule.order)}
    frees = {}
    for node in dag.nodes:
        if node.kind == "output":
            continue
        if release[node.id]:
            last = max(pos[c] for c in release[node.id])
        else:
            last = pos.get(node.id, 0)
        frees.setdefault(last, []).append(node.id)

    stats = ArenaStats()
    for node in dag.nodes:
        if node.kind == "input":
            stats.alloc(node.label, node.size * size)
    for t, nid in enumerate(schedule.order):
        node = dag.nodes[nid]
        pid, i, _ = where[nid]
        p = g.prims[pid]
        stats.alloc(node.label, node.size * size)
        scratch = memplan.rnnpool_scratch(g, p, i, axis) * size if p.op == "rnnpool" else 0
        stats.alloc(node.label + ":scratch", scratch)
        store[(pid, i)] = kern.lines(pid, get, i, i, axis)
        stats.free(node.label + ":scratch", scratch)
        for f in frees.get(t, ()):
            fp, fi, _ = where[f]
            store.pop((fp, fi), None)
            stats.free(dag.nodes[f].label, dag.nodes[f].size * size)
        stats.tick()
    out = get(g.output, 0, g.prims[g.output].shape[axis] - 1)
    return _wrap(x, out), stats
