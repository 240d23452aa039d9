"""Peak activation-memory analysis.

Four conventions are supported:

* ``lower``: a receptive-field lower bound on the intermediate live set of
  any no-recompute schedule of a segment.
* ``rowwise``: the exact peak of a constructive row-first schedule, together
  with its closed-form estimate.
* ``layerbylayer``: the prior per-layer convention, where every layer's full
  output map is materialized except outputs of 1x1 convolutions, with special
  rules for inverted-residual, residual, dense and inception blocks.
* recompute MAdds: the cost of meeting a RAM budget by rebuilding an early
  activation voxel by voxel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dag import Dag, simulate
from .errors import AnalysisError, PlanningError
from .graph import (AvgPool, Conv2d, DenseBlock, DepthwiseConv, FullyConnected, Graph,
                    InceptionBlock, MaxPool, MBConv, NetworkSpec, Pointwise, ResidualBlock,
                    RnnPoolLayer, TransitionBlock, count_madds, lower, prim_madds)
from .tensor import DTYPE_SIZES, dtype_name

_SPATIAL = ("conv", "dwconv", "maxpool", "avgpool", "rnnpool")


@dataclass
class MemoryReport:
    convention: str
    peak_bytes: int
    dtype: str
    contributions: list = field(default_factory=list)   # (name, bytes)
    schedule: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def peak_mib(self) -> float:
        return self.peak_bytes / (1 << 20)

    def to_dict(self) -> dict:
        return {"convention": self.convention, "peak_bytes": self.peak_bytes,
                "peak_mib": self.peak_mib, "dtype": self.dtype,
                "contributions": [{"name": n, "bytes": b} for n, b in self.contributions],
                "schedule": self.schedule, **self.extra}


def _graph(net_or_graph) -> Graph:
    return net_or_graph if isinstance(net_or_graph, Graph) else lower(net_or_graph)


def _elem_bytes(dtype) -> int:
    return DTYPE_SIZES[dtype_name(dtype)]


# --------------------------------------------------------------------------------------
# segments and receptive fields

@dataclass
class Segment:
    graph: Graph
    start: int
    stop: int
    input_id: int
    output_id: int
    nodes: list            # prim ids in topological order, input side first
    input_leaves: set
    output_leaves: set

    @property
    def intermediates(self) -> list[int]:
        g = self.graph
        return [i for i in self.nodes if not g.prims[i].virtual
                and i not in self.input_leaves and i not in self.output_leaves]


def resolve_segment(g: Graph, segment=None) -> Segment:
    """Segment given as (first boundary, last boundary), by index or layer name."""
    net = g.net
    if segment is None:
        segment = (0, len(net.layers))
    a, b = (net.boundary(x) if isinstance(x, str) else int(x) for x in segment)
    if not 0 <= a < b <= len(net.layers):
        raise AnalysisError(f"invalid segment ({a}, {b}) for {len(net.layers)} layers")
    in_id, out_id = g.boundaries[a], g.boundaries[b]
    in_leaves = set(g.leaves(in_id))
    members = [p.id for p in g.prims if a <= p.unit < b]
    allowed = set(members) | in_leaves | {in_id}
    for pid in members:
        for d in g.prims[pid].inputs:
            if d not in allowed:
                raise AnalysisError(
                    f"segment has more than one input map: {g.prims[pid].name} reads "
                    f"{g.prims[d].name} from before the segment")
    nodes = sorted(in_leaves | {in_id}) + [m for m in members if m not in in_leaves]
    out_leaves = set(g.leaves(out_id))
    if out_leaves & in_leaves:
        raise AnalysisError("segment output shares storage with its input")
    return Segment(g, a, b, in_id, out_id, nodes, in_leaves, out_leaves)


@dataclass
class ReceptiveInfo:
    prim: int
    name: str
    channels: int
    field: int          # rows of this map that one output element depends on
    stride: int         # stride of the op producing this map
    cum_stride: int     # product of strides from this map to the segment output

    @property
    def half_width(self) -> float:
        return (self.field - 1) / 2

    @property
    def overlap(self) -> int:
        return max(self.field - self.cum_stride, 0)


def _fields(seg: Segment, axis: int):
    g = seg.graph
    inside = set(seg.nodes)
    consumers = {i: [] for i in seg.nodes}
    for i in seg.nodes:
        for d in g.prims[i].inputs:
            if d in inside:
                consumers[d].append(i)
    fld = {seg.output_id: 1}
    cum = {seg.output_id: 1}
    for v in reversed(seg.nodes):
        if v == seg.output_id:
            continue
        best_f, best_s = 0, 1
        for c in consumers[v]:
            if c not in fld:
                continue
            pc = g.prims[c]
            if pc.op in _SPATIAL:
                f = (fld[c] - 1) * pc.stride + pc.k[axis]
                s = cum[c] * pc.stride
            elif pc.op == "fc":
                f = s = g.prims[v].shape[axis]
            else:
                f, s = fld[c], cum[c]
            best_f, best_s = max(best_f, f), max(best_s, s)
        if best_f:
            fld[v], cum[v] = best_f, best_s
    return fld, cum


def _axis(seg: Segment) -> int:
    """0 for a row-first schedule (retain rows), 1 for column-first; picks the shorter line."""
    h, w, _ = seg.graph.prims[seg.output_id].shape
    return 0 if w <= h else 1


def receptive_fields(net_or_graph, segment=None) -> list[ReceptiveInfo]:
    """Receptive field of the segment output on every map of the segment, input included."""
    g = _graph(net_or_graph)
    seg = resolve_segment(g, segment)
    axis = _axis(seg)
    fld, cum = _fields(seg, axis)
    out = []
    for i in seg.nodes:
        p = g.prims[i]
        if p.virtual or i not in fld or i in seg.output_leaves:
            continue
        out.append(ReceptiveInfo(i, p.name, p.shape[2], fld[i], p.stride, cum[i]))
    return out


def lower_bound_no_recompute(net_or_graph, segment=None, dtype="float32") -> int:
    """Bytes of intermediate activations every no-recompute schedule must hold at once."""
    g = _graph(net_or_graph)
    seg = resolve_segment(g, segment)
    axis = _axis(seg)
    fld, cum = _fields(seg, axis)
    m, n, _ = g.prims[seg.output_id].shape
    total = 0
    for i in seg.intermediates:
        if i not in fld:
            continue
        c = g.prims[i].shape[2]
        overlap = max(fld[i] - cum[i], 0)
        line = max(min(cum[i] * m - 1, cum[i] * n - 1), 0)
        total += c * overlap * line
    return total * _elem_bytes(dtype)


# --------------------------------------------------------------------------------------
# row-first schedules

@dataclass
class RowwiseBound:
    bytes: int                 # exact peak of `order` on `dag`
    closed_form_bytes: int     # receptive-field estimate of the same schedule
    dag: Dag
    order: list
    eviction: str
    granularity: str
    include_io: bool
    terms: list                # (name, channels, retained lines, line length)
    io_bytes: int = 0
    index: dict = field(default_factory=dict)   # (prim, line, pixel) -> dag node
    axis: int = 0
    segment: tuple = ()

    def describe(self) -> str:
        return (f"{self.granularity}-first order over {len(self.order)} steps, "
                f"{self.eviction} eviction")


def _ranges(p, x_shape, lo, hi, axis):
    """Index range of input map `x` (along `axis`) needed for output lines lo..hi of prim p."""
    n = x_shape[axis]
    if p.op in ("conv", "dwconv", "maxpool", "avgpool"):
        a = lo * p.stride - p.pad
        b = hi * p.stride - p.pad + p.k[axis] - 1
    elif p.op == "rnnpool":
        a = lo * p.stride
        b = hi * p.stride + p.k[axis] - 1
    elif p.op == "fc":
        a, b = 0, n - 1
    else:
        a, b = lo, hi
    return max(a, 0), min(b, n - 1)


def rnnpool_scratch(g: Graph, p, line: int, axis: int = 0) -> int:
    """Working elements of an RNNPool op evaluated one patch at a time for one output line.

    Covers the RNN1 summaries along rows and columns, one RNN2 state, and a
    zero-padded patch copy when some patch of the line leaves the map.
    """
    h1, h2 = p.attrs["h1"], p.attrs["h2"]
    r, c = p.k
    xh, xw, k = g.prims[p.inputs[0]].shape
    n_axis, n_other = (xh, xw)[axis], (xh, xw)[1 - axis]
    g_other = p.shape[1 - axis]
    clipped = (line * p.stride + p.k[axis] > n_axis
               or (g_other - 1) * p.stride + p.k[1 - axis] > n_other)
    return (r + c) * h1 + h2 + (r * c * k if clipped else 0)


def build_dag(g: Graph, seg: Segment, granularity: str = "row", axis: int = 0):
    """One node per line (row or column) or per pixel of every stored map in the segment.

    RNNPool nodes carry their per-patch working storage as transient scratch.
    """
    if granularity not in ("row", "pixel"):
        raise ValueError("granularity must be 'row' or 'pixel'")
    dag = Dag()
    index = {}
    prims = g.prims
    other = 1 - axis

    def kind(pid):
        if pid in seg.input_leaves:
            return "input"
        return "output" if pid in seg.output_leaves else "intermediate"

    def leaves(pid):
        return g.leaves(pid)

    for pid in seg.nodes:
        p = prims[pid]
        if p.virtual:
            continue
        lines = p.shape[axis]
        cols = p.shape[other] if granularity == "pixel" else 1
        per = p.shape[2] * (1 if granularity == "pixel" else p.shape[other])
        for i in range(lines):
            for j in range(cols):
                deps = []
                if kind(pid) != "input":
                    for x in p.inputs:
                        xs = prims[x].shape
                        a, b = _ranges(p, xs, i, i, axis)
                        if granularity == "pixel":
                            ca, cb = _ranges(p, xs, j, j, other)
                        else:
                            ca = cb = 0
                        for leaf in leaves(x):
                            for ii in range(a, b + 1):
                                for jj in range(ca, cb + 1):
                                    deps.append(index[(leaf, ii, jj)])
                label = f"{p.name}[{i}]" if granularity == "row" else f"{p.name}[{i},{j}]"
                scratch = rnnpool_scratch(g, p, i, axis) if p.op == "rnnpool" else 0
                index[(pid, i, j)] = dag.add(per, sorted(set(deps)), kind(pid), label, scratch)
    return dag, index


def rowfirst_order(g: Graph, seg: Segment, dag: Dag, index: dict, granularity="row", axis=0):
    """Produce output lines in order, computing each dependency just in time."""
    done = set()
    order = []

    def visit(nid):
        node = dag.nodes[nid]
        if nid in done or node.kind == "input":
            return
        stack = [(nid, iter(node.deps))]
        while stack:
            cur, it = stack[-1]
            for d in it:
                if d not in done and dag.nodes[d].kind != "input":
                    stack.append((d, iter(dag.nodes[d].deps)))
                    break
            else:
                stack.pop()
                if cur not in done:
                    done.add(cur)
                    order.append(cur)

    outs = sorted(seg.output_leaves)
    h = g.prims[outs[0]].shape[axis]
    w = g.prims[outs[0]].shape[1 - axis] if granularity == "pixel" else 1
    for i in range(h):
        for j in range(w):
            for o in outs:
                visit(index[(o, i, j)])
    for nid in dag.computed:      # maps that do not reach the output
        visit(nid)
    return order


def rowwise_closed_form(g: Graph, seg: Segment, include_io: bool, include_padding: bool):
    axis = _axis(seg)
    fld, cum = _fields(seg, axis)
    other = 1 - axis
    terms = []
    total = 0
    for i in seg.intermediates:
        if i not in fld:
            continue
        p = g.prims[i]
        overlap = max(fld[i] - cum[i], 0)
        line = p.shape[other]
        if include_padding:
            line += 2 * ((fld[i] - 1) // 2)
        terms.append((p.name, p.shape[2], overlap, line))
        total += p.shape[2] * overlap * line
    io = 0
    if include_io:
        ip = g.prims[seg.input_id]
        op = g.prims[seg.output_id]
        k0 = max(fld.get(seg.input_id, 1) - cum.get(seg.input_id, 1), 0)
        in_elems = int(np.prod(ip.shape))
        out_elems = int(np.prod(op.shape))
        io = max(in_elems + k0 * op.shape[other] * op.shape[2],
                 out_elems + k0 * ip.shape[other] * ip.shape[2])
    return total + io, terms, io


def rowwise_schedule_bound(net_or_graph, segment=None, include_io: bool = False,
                           include_padding: bool = False, dtype="float32",
                           eviction: str = "strict", granularity: str = "row") -> RowwiseBound:
    """Build the row-first schedule of a segment and measure its exact peak.

    `bytes` is the simulated peak of the returned order (inputs and outputs
    counted only with include_io), including the transient working storage
    of RNNPool ops. `closed_form_bytes` is the receptive-field
    estimate: retained overlap lines per map plus, with include_io, the larger
    of (input + k'0 output lines) and (output + k'0 input lines).
    """
    g = _graph(net_or_graph)
    seg = resolve_segment(g, segment)
    axis = _axis(seg)
    dag, index = build_dag(g, seg, granularity, axis)
    order = rowfirst_order(g, seg, dag, index, granularity, axis)
    sim = simulate(dag, order, eviction, "all" if include_io else "intermediate")
    size = _elem_bytes(dtype)
    closed, terms, io = rowwise_closed_form(g, seg, include_io, include_padding)
    return RowwiseBound(sim.peak * size, closed * size, dag, order, eviction, granularity,
                        include_io, terms, io * size, index, axis, (seg.start, seg.stop))


# --------------------------------------------------------------------------------------
# closed forms for single blocks

def block_memory(block, in_shape, out_shape, dtype="float32") -> int:
    """Row-wise no-recompute footprint of a block, inputs and outputs included."""
    h_in, w_in, c_in = in_shape
    h_out, w_out, c_out = out_shape
    if w_in > h_in:
        h_in, w_in, h_out, w_out = w_in, h_in, w_out, h_out
    if isinstance(block, MBConv):
        s = block.stride
        elems = (max(h_in * w_in * c_in + (3 - s) * w_out * c_out,
                     h_out * w_out * c_out + (3 - s) * w_in * c_in)
                 + (3 - s) * block.t * c_in * w_in)
    elif isinstance(block, ResidualBlock):
        s = block.stride
        elems = (max(h_in * w_in * c_in + (5 - s) * w_in * c_out // s,
                     h_in * w_in * c_out // (s * s) + (5 - s) * w_in * c_in)
                 + 2 * w_in * c_out // s)
    elif isinstance(block, InceptionBlock):
        elems = (max(h_in * w_in * c_in + 4 * w_out * c_out,
                     h_out * w_out * c_out + 4 * w_in * c_in)
                 + (2 * block.c2_reduce + 4 * block.c3_reduce) * w_in)
    elif isinstance(block, DenseBlock):
        elems = h_out * w_out * c_out
    else:
        raise AnalysisError(f"no block formula for {type(block).__name__}")
    return int(elems) * _elem_bytes(dtype)


# --------------------------------------------------------------------------------------
# layer-by-layer convention

_PLAIN = (Conv2d, DepthwiseConv, Pointwise, MaxPool, AvgPool)


def _is_1x1(layer) -> bool:
    return isinstance(layer, Pointwise) or (isinstance(layer, Conv2d) and layer.kh == layer.kw == 1)


def streamed_stem(net: NetworkSpec) -> int:
    """Number of leading plain layers fused into the first RNNPool layer.

    An RNNPool layer reads its input one patch at a time, so a chain of plain
    layers in front of it (and the image itself) can be evaluated patch by
    patch without materializing any full map. Returns -1 when the network
    does not start that way.
    """
    for i, layer in enumerate(net.layers):
        if isinstance(layer, RnnPoolLayer):
            return i
        if not isinstance(layer, _PLAIN):
            return -1
    return -1


def unit_footprints(g: Graph, dtype="float32", start: int = 0, stop: int | None = None,
                    fuse_stem: bool = True) -> list[tuple[str, int]]:
    """Per-layer peak bytes under the layer-by-layer convention."""
    net = g.net
    stop = len(net.layers) if stop is None else stop
    size = _elem_bytes(dtype)
    stem = streamed_stem(net) if (fuse_stem and start == 0) else -1
    elems = lambda pid: int(np.prod(g.prims[pid].shape))   # noqa: E731
    in_mat = stem < 0
    out = []
    for u in range(start, stop):
        layer = net.layers[u]
        name = net.layer_name(u)
        x_in = elems(g.boundaries[u]) if in_mat else 0
        y = elems(g.boundaries[u + 1])
        out_mat = True
        if u < stem:
            foot, out_mat = 0, False
        elif isinstance(layer, _PLAIN) or isinstance(layer, FullyConnected):
            out_mat = not _is_1x1(layer)
            foot = max(x_in, y if out_mat else 0)
        elif isinstance(layer, MBConv):
            foot = x_in + y
        elif isinstance(layer, (ResidualBlock, TransitionBlock)):
            foot = max(x_in, y)
        elif isinstance(layer, DenseBlock):
            foot = y
        elif isinstance(layer, InceptionBlock):
            paths = sorted(elems(p) for p in g.prims[g.boundaries[u + 1]].inputs)
            foot = max(x_in + sum(paths[:3]), sum(paths))
        elif isinstance(layer, RnnPoolLayer):
            foot = x_in + y
        else:
            raise AnalysisError(f"no layer-by-layer rule for {type(layer).__name__}")
        out.append((name, foot * size))
        in_mat = out_mat
    return out


def layerbylayer_peak(net_or_graph, dtype="float32") -> MemoryReport:
    g = _graph(net_or_graph)
    contrib = unit_footprints(g, dtype)
    peak = max((b for _, b in contrib), default=0)
    if not contrib:
        peak = int(np.prod(g.net.input_shape)) * _elem_bytes(dtype)
    stem = streamed_stem(g.net)
    note = "layer by layer" + (f"; first {stem} layers fused into the RNNPool patch loop"
                               if stem > 0 else "")
    return MemoryReport("layerbylayer", int(peak), dtype_name(dtype), contrib, note)


def analyze(net_or_graph, convention="layerbylayer", dtype="float32", segment=None,
            **kwargs) -> MemoryReport:
    """Dispatch to one of the conventions and wrap the result in a MemoryReport."""
    g = _graph(net_or_graph)
    if convention == "layerbylayer":
        return layerbylayer_peak(g, dtype)
    if segment is None:
        from .presets import BOTTLENECK_SEGMENTS
        segment = BOTTLENECK_SEGMENTS.get(g.net.name)
    if segment is None:
        segment = (0, _spatial_prefix(g.net))
    seg = resolve_segment(g, segment)
    name_a = "input" if seg.start == 0 else g.net.layer_name(seg.start - 1)
    name_b = g.net.layer_name(seg.stop - 1)
    extra = {"segment": [name_a, name_b]}
    if convention == "lower":
        b = lower_bound_no_recompute(g, segment, dtype)
        return MemoryReport("lower-bound", b, dtype_name(dtype), [], "any no-recompute order",
                            extra)
    if convention == "rowwise":
        kwargs.setdefault("include_io", True)
        rb = rowwise_schedule_bound(g, segment, dtype=dtype, **kwargs)
        contrib = [(t[0], t[1] * t[2] * t[3] * _elem_bytes(dtype)) for t in rb.terms]
        extra.update(closed_form_bytes=rb.closed_form_bytes,
                     closed_form_mib=rb.closed_form_bytes / (1 << 20), io_bytes=rb.io_bytes)
        conv = "rowwise-with-io" if rb.include_io else "rowwise-schedule"
        return MemoryReport(conv, rb.bytes, dtype_name(dtype), contrib, rb.describe(), extra)
    raise ValueError(f"unknown convention {convention!r}")


def _spatial_prefix(net: NetworkSpec) -> int:
    n = 0
    for layer in net.layers:
        if isinstance(layer, (FullyConnected, RnnPoolLayer)):
            break
        if isinstance(layer, AvgPool) and n == len(net.layers) - 2:
            break
        n += 1
    return max(n, 1)


# --------------------------------------------------------------------------------------
# recompute scheme

def _cone(g: Graph, target: int, members: set, axis: int, i: int) -> dict[int, tuple]:
    """Line range of every member prim needed to rebuild line i of `target`."""
    need = {target: (i, i)}
    for pid in sorted(members, reverse=True):
        if pid not in need:
            continue
        lo, hi = need[pid]
        p = g.prims[pid]
        for x in p.inputs:
            if x not in members:
                continue
            a, b = _ranges(p, g.prims[x].shape, lo, hi, axis)
            if x in need:
                a, b = min(a, need[x][0]), max(b, need[x][1])
            need[x] = (a, b)
    return need


def _line_coverage(g: Graph, target: int, members: set, axis: int) -> dict[int, int]:
    """For each prim in `members`, the total number of its lines computed when every
    line of `target` is rebuilt independently from its own receptive field."""
    totals = {m: 0 for m in members}
    for i in range(g.prims[target].shape[axis]):
        for pid, (lo, hi) in _cone(g, target, members, axis, i).items():
            if pid in totals and not g.prims[pid].virtual:
                totals[pid] += hi - lo + 1
    return totals


def _cone_peak(g: Graph, bnd: int, size: int) -> int:
    """Bytes to rebuild the widest voxel at boundary `bnd`, charging each earlier
    layer the cone regions of its input and output maps (the network input is
    streamed and not charged)."""
    members = {p.id for p in g.prims if p.unit < bnd}
    target = g.boundaries[bnd]
    ext = []
    for axis in (0, 1):
        widest = {}
        for i in range(g.prims[target].shape[axis]):
            for pid, (lo, hi) in _cone(g, target, members, axis, i).items():
                widest[pid] = max(widest.get(pid, 0), hi - lo + 1)
        ext.append(widest)

    def region(pid):
        total = 0
        for leaf in g.leaves(pid):
            p = g.prims[leaf]
            total += ext[0].get(leaf, 0) * ext[1].get(leaf, 0) * p.shape[2] * size
        return total

    regions = [0] + [region(g.boundaries[u]) for u in range(1, bnd + 1)]
    return max(regions[u] + regions[u + 1] for u in range(bnd))


def _rebuild_cost(g: Graph, base, chosen: int) -> float:
    """Suffix MAdds plus every prefix op charged once per rebuilt voxel it feeds."""
    target = g.boundaries[chosen]
    prefix = {p.id for p in g.prims if 0 <= p.unit < chosen}
    rows = _line_coverage(g, target, prefix, 0)
    cols = _line_coverage(g, target, prefix, 1)
    total = sum(base.per_layer[chosen:])
    for pid in prefix:
        p = g.prims[pid]
        work = prim_madds(g, p)
        if work:
            total += work / (p.shape[0] * p.shape[1]) * rows[pid] * cols[pid]
    return total


def recompute_madds(net: NetworkSpec, ram_budget_bytes, dtype="float32") -> int:
    """MAdds needed to run `net` within a RAM budget by recomputation.

    Any layer boundary whose map, every later layer footprint, and the
    receptive-field cone of one of its voxels fit the budget can become the
    rebuilt activation: every voxel of that map is
    computed from scratch out of its receptive field on the network input and
    the remaining layers run normally. The cheapest such boundary is used, so
    the result never decreases as the budget shrinks.
    """
    g = lower(net)
    base = count_madds(net, g)
    contrib = unit_footprints(g, dtype)
    if not contrib or max(b for _, b in contrib) <= ram_budget_bytes:
        return base.total
    size = _elem_bytes(dtype)
    feasible = []
    for bnd in range(1, len(net.layers) + 1):
        act = int(np.prod(g.prims[g.boundaries[bnd]].shape)) * size
        suffix = unit_footprints(g, dtype, start=bnd, fuse_stem=False)
        if act <= ram_budget_bytes and all(b <= ram_budget_bytes for _, b in suffix):
            if _cone_peak(g, bnd, size) <= ram_budget_bytes:
                feasible.append(bnd)
    if not feasible:
        raise PlanningError(f"no suffix of {net.name} fits in {ram_budget_bytes} bytes")
    dense = {g.prims[p].unit for p in range(len(g.prims)) if g.prims[p].op == "fc"}
    feasible = [b for b in feasible if not any(u < b for u in dense)]
    if not feasible:
        raise PlanningError("cannot rebuild an activation that follows a dense layer")
    return int(round(min(_rebuild_cost(g, base, b) for b in feasible)))
