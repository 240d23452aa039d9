"""Layer vocabulary, network specs, lowering to primitive ops, and cost counting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import ClassVar

import numpy as np

from .errors import SpecError
from .pool import RnnPoolParams, out_grid_dims, rnnpool_cost_dims

Shape = tuple  # (H, W, C)

ACTIVATIONS = ("relu", "relu6", "none")


@dataclass(frozen=True)
class Conv2d:
    op: ClassVar[str] = "conv2d"
    kh: int
    kw: int
    c_out: int
    stride: int = 1
    pad: int = 0
    act: str = "relu"
    name: str = ""


@dataclass(frozen=True)
class DepthwiseConv:
    op: ClassVar[str] = "depthwise"
    k: int
    stride: int = 1
    pad: int = 0
    act: str = "relu"
    name: str = ""


@dataclass(frozen=True)
class Pointwise:
    op: ClassVar[str] = "pointwise"
    c_out: int
    act: str = "relu"
    name: str = ""


@dataclass(frozen=True)
class MaxPool:
    op: ClassVar[str] = "maxpool"
    k: int
    stride: int
    pad: int = 0
    name: str = ""


@dataclass(frozen=True)
class AvgPool:
    op: ClassVar[str] = "avgpool"
    k: int
    stride: int
    pad: int = 0
    name: str = ""


@dataclass(frozen=True)
class MBConv:
    """Inverted residual: 1x1 expand to t*c_in, 3x3 depthwise, linear 1x1 project."""
    op: ClassVar[str] = "mbconv"
    t: int
    c_out: int
    stride: int = 1
    name: str = ""


@dataclass(frozen=True)
class ResidualBlock:
    op: ClassVar[str] = "residual"
    c_out: int
    stride: int = 1
    name: str = ""


@dataclass(frozen=True)
class DenseBlock:
    op: ClassVar[str] = "dense"
    num_layers: int
    growth: int = 32
    bottleneck: int = 128
    name: str = ""


@dataclass(frozen=True)
class TransitionBlock:
    """1x1 conv (to c_out, default half the input channels) then 2x2 average pool."""
    op: ClassVar[str] = "transition"
    c_out: int | None = None
    name: str = ""


@dataclass(frozen=True)
class InceptionBlock:
    """Four paths: 1x1; 1x1 -> 3x3; 1x1 -> 5x5; 3x3 max pool -> 1x1."""
    op: ClassVar[str] = "inception"
    c1: int
    c2_reduce: int
    c2: int
    c3_reduce: int
    c3: int
    c4: int
    name: str = ""

    @property
    def path_channels(self) -> tuple[int, int, int, int]:
        return (self.c1, self.c2, self.c3, self.c4)


@dataclass(frozen=True)
class RnnPoolLayer:
    op: ClassVar[str] = "rnnpool"
    r: int
    c: int
    h1: int
    h2: int
    stride: int
    name: str = ""


@dataclass(frozen=True)
class FullyConnected:
    op: ClassVar[str] = "fc"
    c_out: int
    act: str = "none"
    name: str = ""


LAYER_TYPES = {cls.op: cls for cls in (
    Conv2d, DepthwiseConv, Pointwise, MaxPool, AvgPool, MBConv, ResidualBlock,
    DenseBlock, TransitionBlock, InceptionBlock, RnnPoolLayer, FullyConnected)}

BLOCK_TYPES = (MBConv, ResidualBlock, DenseBlock, TransitionBlock, InceptionBlock)


def layer_to_dict(layer) -> dict:
    d = {"op": layer.op}
    d.update({k: v for k, v in asdict(layer).items() if not (k == "name" and v == "")})
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    try:
        cls = LAYER_TYPES[d.pop("op")]
    except KeyError as exc:
        raise SpecError(f"unknown layer op {exc}") from None
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise SpecError(f"{cls.op}: unexpected fields {sorted(extra)}")
    return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: Shape
    layers: tuple = ()
    classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be three positive ints, got {self.input_shape}")

    def layer_name(self, i: int) -> str:
        return self.layers[i].name or f"L{i}"

    def boundary(self, name: str) -> int:
        """Index of the map produced by the named layer (0 is the network input)."""
        if name == "input":
            return 0
        for i in range(len(self.layers)):
            if self.layer_name(i) == name:
                return i + 1
        raise KeyError(f"no layer named {name!r} in {self.name}")

    def to_dict(self) -> dict:
        d = {"name": self.name, "input_shape": list(self.input_shape),
             "layers": [layer_to_dict(l) for l in self.layers]}
        if self.classes is not None:
            d["classes"] = self.classes
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d.get("name", "model"), tuple(d["input_shape"]),
                   tuple(layer_from_dict(l) for l in d.get("layers", [])), d.get("classes"))


def validate_spec(net: NetworkSpec) -> None:
    """Check strides and field ranges; raise SpecError naming the offending layer index."""
    for i, layer in enumerate(net.layers):
        where = f"layer {i} ({layer.op})"
        for f in fields(layer):
            v = getattr(layer, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and f.name != "pad" and v < 1:
                raise SpecError(f"{where}: {f.name} must be >= 1, got {v}")
        if getattr(layer, "pad", 0) < 0:
            raise SpecError(f"{where}: pad must be >= 0")
        if isinstance(layer, RnnPoolLayer):
            whole = layer.stride == layer.r == layer.c
            if layer.stride not in (2, 4, 8) and not whole:
                raise SpecError(f"{where}: stride must be 2, 4 or 8 (or equal a square patch), "
                                f"got {layer.stride}")
        elif hasattr(layer, "stride") and layer.stride not in (1, 2):
            raise SpecError(f"{where}: stride must be 1 or 2, got {layer.stride}")
        if hasattr(layer, "act") and layer.act not in ACTIVATIONS:
            raise SpecError(f"{where}: unknown activation {layer.act!r}")


# --------------------------------------------------------------------------------------
# lowering to primitive ops

@dataclass
class Prim:
    """One primitive op producing one activation map."""
    id: int
    op: str                   # input, conv, dwconv, maxpool, avgpool, add, concat, rnnpool, fc
    inputs: tuple
    shape: Shape
    unit: int                 # index of the top-level layer that owns it, -1 for the input
    name: str = ""
    k: tuple = (1, 1)
    stride: int = 1
    pad: int = 0
    act: str = "none"
    attrs: dict = field(default_factory=dict)

    @property
    def virtual(self) -> bool:
        """Concatenations are views over their inputs and own no storage."""
        return self.op == "concat"

    @property
    def elements(self) -> int:
        return 0 if self.virtual else int(np.prod(self.shape))

    @property
    def is_pointwise(self) -> bool:
        return self.op == "conv" and self.k == (1, 1) and self.stride == 1


@dataclass
class Graph:
    net: NetworkSpec
    prims: list
    boundaries: list          # prim id of the map after each top-level layer, [0] = input

    @property
    def output(self) -> int:
        return self.boundaries[-1]

    def consumers(self) -> dict[int, list[int]]:
        out = {p.id: [] for p in self.prims}
        for p in self.prims:
            for i in p.inputs:
                out[i].append(p.id)
        return out

    def unit_prims(self, unit: int) -> list:
        return [p for p in self.prims if p.unit == unit]

    def leaves(self, pid: int) -> list[int]:
        """Storage-owning prims behind `pid` (expands concatenations)."""
        p = self.prims[pid]
        if not p.virtual:
            return [pid]
        out = []
        for i in p.inputs:
            out.extend(self.leaves(i))
        return out


def _spatial(h, w, k, s, p):
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class _Builder:
    def __init__(self, net):
        self.net = net
        self.prims = []
        self.unit = -1
        self.prefix = ""

    def add(self, op, inputs, shape, name, **kw):
        if min(shape) < 1:
            raise SpecError(f"layer {self.unit} ({name}): non-positive output shape {shape}")
        p = Prim(len(self.prims), op, tuple(inputs), tuple(int(v) for v in shape), self.unit,
                 f"{self.prefix}{name}", **kw)
        self.prims.append(p)
        return p.id

    def shape(self, pid):
        return self.prims[pid].shape

    def conv(self, x, kh, kw, c_out, stride=1, pad=0, act="relu", name="conv"):
        h, w, _ = self.shape(x)
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        return self.add("conv", [x], (ho, wo, c_out), name, k=(kh, kw), stride=stride,
                        pad=pad, act=act)

    def dw(self, x, k, stride=1, pad=0, act="relu", name="dw"):
        h, w, c = self.shape(x)
        ho, wo = _spatial(h, w, k, stride, pad)
        return self.add("dwconv", [x], (ho, wo, c), name, k=(k, k), stride=stride, pad=pad, act=act)

    def pool(self, x, kind, k, stride, pad=0, name=None):
        h, w, c = self.shape(x)
        ho, wo = _spatial(h, w, k, stride, pad)
        return self.add(kind, [x], (ho, wo, c), name or kind, k=(k, k), stride=stride, pad=pad)

    def concat(self, xs, name="concat"):
        if len(xs) == 1:
            return xs[0]
        shapes = [self.shape(x) for x in xs]
        if len({s[:2] for s in shapes}) != 1:
            raise SpecError(f"layer {self.unit}: concatenated maps differ in size {shapes}")
        return self.add("concat", xs, shapes[0][:2] + (sum(s[2] for s in shapes),), name)

    def addition(self, a, b, act="none", name="add"):
        if self.shape(a) != self.shape(b):
            raise SpecError(f"layer {self.unit}: residual shapes differ")
        return self.add("add", [a, b], self.shape(a), name, act=act)


def lower(net: NetworkSpec) -> Graph:
    """Expand blocks into primitive ops with inferred shapes."""
    validate_spec(net)
    b = _Builder(net)
    x = b.add("input", [], net.input_shape, "input")
    boundaries = [x]
    for i, layer in enumerate(net.layers):
        b.unit = i
        b.prefix = net.layer_name(i) + "."
        h, w, c_in = b.shape(x)
        if isinstance(layer, Conv2d):
            x = b.conv(x, layer.kh, layer.kw, layer.c_out, layer.stride, layer.pad, layer.act)
        elif isinstance(layer, DepthwiseConv):
            x = b.dw(x, layer.k, layer.stride, layer.pad, layer.act)
        elif isinstance(layer, Pointwise):
            x = b.conv(x, 1, 1, layer.c_out, 1, 0, layer.act, name="pw")
        elif isinstance(layer, MaxPool):
            x = b.pool(x, "maxpool", layer.k, layer.stride, layer.pad)
        elif isinstance(layer, AvgPool):
            x = b.pool(x, "avgpool", layer.k, layer.stride, layer.pad)
        elif isinstance(layer, MBConv):
            inp = x
            e = b.conv(x, 1, 1, layer.t * c_in, 1, 0, "relu6", name="expand")
            d = b.dw(e, 3, layer.stride, 1, "relu6")
            x = b.conv(d, 1, 1, layer.c_out, 1, 0, "none", name="project")
            if layer.stride == 1 and c_in == layer.c_out:
                x = b.addition(inp, x)
        elif isinstance(layer, ResidualBlock):
            inp = x
            y = b.conv(x, 3, 3, layer.c_out, layer.stride, 1, "relu", name="conv1")
            y = b.conv(y, 3, 3, layer.c_out, 1, 1, "none", name="conv2")
            if layer.stride != 1 or c_in != layer.c_out:
                inp = b.conv(inp, 1, 1, layer.c_out, layer.stride, 0, "none", name="shortcut")
            x = b.addition(inp, y, act="relu")
        elif isinstance(layer, DenseBlock):
            parts = [x]
            for j in range(layer.num_layers):
                cat = b.concat(parts, name=f"cat{j}")
                y = b.conv(cat, 1, 1, layer.bottleneck, 1, 0, "relu", name=f"bottleneck{j}")
                parts.append(b.conv(y, 3, 3, layer.growth, 1, 1, "relu", name=f"growth{j}"))
            x = b.concat(parts, name="out")
        elif isinstance(layer, TransitionBlock):
            c_out = layer.c_out or c_in // 2
            y = b.conv(x, 1, 1, c_out, 1, 0, "relu", name="reduce")
            x = b.pool(y, "avgpool", 2, 2)
        elif isinstance(layer, InceptionBlock):
            p1 = b.conv(x, 1, 1, layer.c1, name="p1")
            p2 = b.conv(b.conv(x, 1, 1, layer.c2_reduce, name="p2_reduce"), 3, 3, layer.c2,
                        1, 1, name="p2")
            p3 = b.conv(b.conv(x, 1, 1, layer.c3_reduce, name="p3_reduce"), 5, 5, layer.c3,
                        1, 2, name="p3")
            p4 = b.conv(b.pool(x, "maxpool", 3, 1, 1, name="p4_pool"), 1, 1, layer.c4, name="p4")
            x = b.concat([p1, p2, p3, p4], name="out")
        elif isinstance(layer, RnnPoolLayer):
            gh, gw = out_grid_dims(h, w, layer.r, layer.c, layer.stride)
            x = b.add("rnnpool", [x], (gh, gw, 4 * layer.h2), "rnnpool",
                      k=(layer.r, layer.c), stride=layer.stride,
                      attrs={"h1": layer.h1, "h2": layer.h2})
        elif isinstance(layer, FullyConnected):
            x = b.add("fc", [x], (1, 1, layer.c_out), "fc", act=layer.act)
        else:
            raise SpecError(f"layer {i}: unsupported layer type {type(layer).__name__}")
        boundaries.append(x)
    return Graph(net, b.prims, boundaries)


def infer_shapes(net: NetworkSpec) -> list[Shape]:
    """Shape of the map at every layer boundary, starting with the input."""
    g = lower(net)
    return [g.prims[pid].shape for pid in g.boundaries]


# --------------------------------------------------------------------------------------
# costs

def prim_madds(g: Graph, p: Prim) -> int:
    if p.op == "conv":
        c_in = g.prims[p.inputs[0]].shape[2]
        ho, wo, c_out = p.shape
        return ho * wo * c_out * p.k[0] * p.k[1] * c_in
    if p.op == "dwconv":
        ho, wo, c = p.shape
        return ho * wo * c * p.k[0] * p.k[1]
    if p.op == "rnnpool":
        h, w, k = g.prims[p.inputs[0]].shape
        return rnnpool_cost_dims(k, p.attrs["h1"], p.attrs["h2"], p.k[0], p.k[1], h, w,
                                 p.stride)[0]
    if p.op == "fc":
        return int(np.prod(g.prims[p.inputs[0]].shape)) * p.shape[2]
    return 0


def prim_params(g: Graph, p: Prim) -> int:
    if p.op == "conv":
        c_in = g.prims[p.inputs[0]].shape[2]
        return p.k[0] * p.k[1] * c_in * p.shape[2] + 2 * p.shape[2]
    if p.op == "dwconv":
        c = p.shape[2]
        return p.k[0] * p.k[1] * c + 2 * c
    if p.op == "rnnpool":
        k = g.prims[p.inputs[0]].shape[2]
        return rnnpool_cost_dims(k, p.attrs["h1"], p.attrs["h2"], p.k[0], p.k[1], 1, 1, 1)[1]
    if p.op == "fc":
        return int(np.prod(g.prims[p.inputs[0]].shape)) * p.shape[2] + p.shape[2]
    return 0


@dataclass
class CostReport:
    names: list
    per_layer: list
    total: int

    def to_dict(self) -> dict:
        return {"total": self.total,
                "layers": [{"name": n, "value": v} for n, v in zip(self.names, self.per_layer)]}


def _report(net, g, fn) -> CostReport:
    per = [0] * len(net.layers)
    for p in g.prims:
        if p.unit >= 0:
            per[p.unit] += fn(g, p)
    return CostReport([net.layer_name(i) for i in range(len(net.layers))], per, sum(per))


def count_madds(net: NetworkSpec, graph: Graph | None = None) -> CostReport:
    g = graph or lower(net)
    return _report(net, g, prim_madds)


def count_params(net: NetworkSpec, graph: Graph | None = None) -> CostReport:
    g = graph or lower(net)
    return _report(net, g, prim_params)


# --------------------------------------------------------------------------------------
# weights

def init_weights(g: Graph, rng=None, dtype=np.float32, zero_bias: bool = False,
                 gate_nonlin="sigmoid", update_nonlin="tanh") -> dict:
    """He-scaled random weights for every parametrized prim, keyed by prim id."""
    rng = np.random.default_rng(rng)
    weights = {}
    for p in g.prims:
        if p.op == "conv":
            c_in = g.prims[p.inputs[0]].shape[2]
            fan = p.k[0] * p.k[1] * c_in
            w = rng.standard_normal((p.k[0], p.k[1], c_in, p.shape[2])) * math.sqrt(2.0 / fan)
            bias = np.zeros(p.shape[2]) if zero_bias else 0.1 * rng.standard_normal(p.shape[2])
            weights[p.id] = {"w": w.astype(dtype), "b": bias.astype(dtype)}
        elif p.op == "dwconv":
            c = p.shape[2]
            w = rng.standard_normal((p.k[0], p.k[1], c)) * math.sqrt(2.0 / (p.k[0] * p.k[1]))
            bias = np.zeros(c) if zero_bias else 0.1 * rng.standard_normal(c)
            weights[p.id] = {"w": w.astype(dtype), "b": bias.astype(dtype)}
        elif p.op == "fc":
            c_in = int(np.prod(g.prims[p.inputs[0]].shape))
            w = rng.standard_normal((c_in, p.shape[2])) / math.sqrt(c_in)
            bias = np.zeros(p.shape[2]) if zero_bias else 0.1 * rng.standard_normal(p.shape[2])
            weights[p.id] = {"w": w.astype(dtype), "b": bias.astype(dtype)}
        elif p.op == "rnnpool":
            k = g.prims[p.inputs[0]].shape[2]
            params = RnnPoolParams.random(k, p.attrs["h1"], p.attrs["h2"], p.k[0], p.k[1],
                                          rng=rng, dtype=dtype, gate_nonlin=gate_nonlin,
                                          update_nonlin=update_nonlin)
            if not zero_bias:
                for cell in (params.rnn1, params.rnn2):
                    cell.b_z[:] = 0.1 * rng.standard_normal(cell.hidden_dim)
                    cell.b_h[:] = 0.1 * rng.standard_normal(cell.hidden_dim)
            weights[p.id] = {"rnnpool": params}
    return weights


def save_weights(path, weights: dict) -> None:
    """Store a weights dict in a numpy .npz archive."""
    flat = {}
    for pid, entry in weights.items():
        for key, val in entry.items():
            if key == "rnnpool":
                for tag, cell in (("rnn1", val.rnn1), ("rnn2", val.rnn2)):
                    for pname, arr in cell.params().items():
                        flat[f"{pid}/{tag}/{pname}"] = arr
                flat[f"{pid}/patch"] = np.array([val.patch_rows, val.patch_cols])
                flat[f"{pid}/nonlin"] = np.array([val.rnn1.gate_nonlin, val.rnn1.update_nonlin])
            else:
                flat[f"{pid}/{key}"] = val
    np.savez(path, **flat)


def load_weights(path) -> dict:
    from .fastgrnn import FastGrnnCell
    data = np.load(path)
    grouped = {}
    for key in data.files:
        pid, rest = key.split("/", 1)
        grouped.setdefault(int(pid), {})[rest] = data[key]
    weights = {}
    for pid, entry in grouped.items():
        if "patch" in entry:
            gate, upd = (str(v) for v in entry["nonlin"])
            cells = []
            for tag in ("rnn1", "rnn2"):
                cells.append(FastGrnnCell(entry[f"{tag}/W"], entry[f"{tag}/U"], entry[f"{tag}/b_z"],
                                          entry[f"{tag}/b_h"], gate_nonlin=gate, update_nonlin=upd))
            r, c = (int(v) for v in entry["patch"])
            weights[pid] = {"rnnpool": RnnPoolParams(cells[0], cells[1], r, c)}
        else:
            weights[pid] = dict(entry)
    return weights
