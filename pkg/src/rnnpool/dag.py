"""Computation DAGs, schedule simulation and exhaustive minimum-peak search.

A node is either an input (resident before execution starts), an
intermediate, or an output (kept once computed). Eviction follows one of
two no-recompute rules:

* ``direct``: a node may be freed once every direct consumer is computed.
* ``strict``: a node may be freed only once every node reachable from it
  is computed, i.e. it stays until all outputs that depend on it exist.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeCapError

KINDS = ("input", "intermediate", "output")
EVICTIONS = ("direct", "strict")
COUNTS = ("all", "intermediate")


@dataclass
class DagNode:
    id: int
    size: int
    deps: tuple = ()
    kind: str = "intermediate"
    label: str = ""
    dependents: list = field(default_factory=list)
    scratch: int = 0      # transient workspace held only while the node is computed


class Dag:
    def __init__(self):
        self.nodes: list[DagNode] = []

    def add(self, size, deps=(), kind="intermediate", label="", scratch=0) -> int:
        if kind not in KINDS:
            raise ValueError(f"unknown node kind {kind!r}")
        if kind == "input" and deps:
            raise ValueError("input nodes cannot have dependencies")
        node = DagNode(len(self.nodes), int(size), tuple(deps), kind, label, scratch=int(scratch))
        for d in node.deps:
            if not 0 <= d < node.id:
                raise ValueError(f"dependency {d} of node {node.id} must be an earlier node")
            self.nodes[d].dependents.append(node.id)
        self.nodes.append(node)
        return node.id

    def __len__(self):
        return len(self.nodes)

    @property
    def computed(self) -> list[int]:
        return [n.id for n in self.nodes if n.kind != "input"]

    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            d = {"id": n.id, "size": n.size, "deps": list(n.deps), "kind": n.kind,
                 "label": n.label}
            if n.scratch:
                d["scratch"] = n.scratch
            nodes.append(d)
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "Dag":
        dag = cls()
        nodes = d["nodes"]
        index = {}
        for pos, spec in enumerate(nodes):
            index[spec.get("id", pos)] = pos
        for spec in nodes:
            deps = [index[x] for x in spec.get("deps", [])]
            kind = spec.get("kind") or ("input" if not deps else "intermediate")
            dag.add(spec.get("size", 1), deps, kind, str(spec.get("label", "")),
                    spec.get("scratch", 0))
        return dag

    @classmethod
    def load(cls, path) -> "Dag":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _release_sets(dag: Dag, eviction: str) -> list[set]:
    """For each node, the computed nodes that must exist before it can be freed."""
    if eviction not in EVICTIONS:
        raise ValueError(f"unknown eviction rule {eviction!r}")
    if eviction == "direct":
        return [set(n.dependents) for n in dag.nodes]
    reach = [set() for _ in dag.nodes]
    for n in reversed(dag.nodes):
        for c in n.dependents:
            reach[n.id].add(c)
            reach[n.id] |= reach[c]
    return reach


def _counted(node, count):
    return count == "all" or node.kind == "intermediate"


@dataclass
class Simulation:
    peak: int
    trace: list        # live size while each scheduled node is computed
    order: list


def simulate(dag: Dag, order, eviction: str = "direct", count: str = "all") -> Simulation:
    """Replay `order` and return the peak live size.

    Inputs are live from the start; each node is allocated when computed and
    freed right after the step at which its release condition is met.
    """
    if count not in COUNTS:
        raise ValueError(f"unknown count mode {count!r}")
    order = list(order)
    pos = {}
    for t, nid in enumerate(order):
        if dag.nodes[nid].kind == "input":
            raise ValueError(f"input node {nid} cannot be scheduled")
        if nid in pos:
            raise ValueError(f"node {nid} scheduled twice")
        for d in dag.nodes[nid].deps:
            if dag.nodes[d].kind != "input" and d not in pos:
                raise ValueError(f"node {nid} scheduled before its dependency {d}")
        pos[nid] = t
    missing = [n for n in dag.computed if n not in pos]
    if missing:
        raise ValueError(f"schedule misses nodes {missing[:5]}")
    T = len(order)
    release = _release_sets(dag, eviction)
    delta = np.zeros(T + 2, dtype=np.int64)
    for n in dag.nodes:
        if not _counted(n, count) or n.size == 0:
            continue
        start = 0 if n.kind == "input" else pos[n.id]
        if n.kind == "output":
            end = T
        elif release[n.id]:
            end = max(pos[c] for c in release[n.id]) + 1
        else:
            end = start + 1
        delta[start] += n.size
        delta[end] -= n.size
    for n in dag.nodes:
        if n.scratch and n.kind != "input":
            delta[pos[n.id]] += n.scratch
            delta[pos[n.id] + 1] -= n.scratch
    live = np.cumsum(delta)[:max(T, 1)]
    trace = live.tolist()
    return Simulation(int(live.max()) if len(live) else 0, trace, order)


def enumerate_min_peak(dag: Dag, eviction: str = "direct", count: str = "all",
                       max_nodes: int = 13) -> tuple[int, list]:
    """Minimum peak live size over all topological orders, with a witness order.

    Dynamic programming over the downsets of computed nodes; the cap bounds
    the number of non-input nodes.
    """
    comp = dag.computed
    if len(comp) > max_nodes:
        raise SizeCapError(f"{len(comp)} computed nodes exceed the cap of {max_nodes}")
    bit = {nid: i for i, nid in enumerate(comp)}
    release = _release_sets(dag, eviction)
    sizes = [n.size if _counted(n, count) else 0 for n in dag.nodes]
    need = []
    for nid in comp:
        m = 0
        for d in dag.nodes[nid].deps:
            if d in bit:
                m |= 1 << bit[d]
        need.append(m)
    rel_mask = []
    for n in dag.nodes:
        m = 0
        for c in release[n.id]:
            m |= 1 << bit[c]
        rel_mask.append(m)

    def live(state):
        total = 0
        for n in dag.nodes:
            if n.kind != "input" and not state >> bit[n.id] & 1:
                continue
            if n.kind == "output" or (rel_mask[n.id] and state & rel_mask[n.id] != rel_mask[n.id]):
                total += sizes[n.id]
        return total

    full = (1 << len(comp)) - 1
    best = {0: 0}
    parent = {}
    frontier = [0]
    while frontier:
        nxt = {}
        for state in frontier:
            base = live(state)
            here = best[state]
            for i in range(len(comp)):
                if state >> i & 1 or need[i] & state != need[i]:
                    continue
                cost = max(here, base + sizes[comp[i]] + dag.nodes[comp[i]].scratch)
                s2 = state | 1 << i
                if cost < best.get(s2, float("inf")):
                    best[s2] = cost
                    parent[s2] = (state, comp[i])
                    nxt[s2] = True
        frontier = list(nxt)
    if full not in best:
        raise ValueError("graph has unreachable nodes")
    order = []
    state = full
    while state:
        state, nid = parent[state]
        order.append(nid)
    order.reverse()
    return best[full], order
