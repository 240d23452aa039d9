import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rnnpool.dag import Dag, enumerate_min_peak, simulate
from rnnpool.errors import SizeCapError


def chain(sizes):
    d = Dag()
    prev = d.add(sizes[0], kind="input")
    for s in sizes[1:-1]:
        prev = d.add(s, [prev])
    d.add(sizes[-1], [prev], kind="output")
    return d


def random_dag(rng, n):
    d = Dag()
    d.add(int(rng.integers(1, 9)), kind="input")
    for i in range(1, n):
        k = int(rng.integers(1, min(i, 3) + 1))
        deps = sorted(set(rng.choice(i, size=k, replace=False).tolist()))
        kind = "output" if i == n - 1 else "intermediate"
        d.add(int(rng.integers(1, 9)), deps, kind=kind, scratch=int(rng.integers(0, 3)))
    return d


def topo_orders(dag):
    comp = dag.computed
    for perm in itertools.permutations(comp):
        seen = set(n.id for n in dag.nodes if n.kind == "input")
        ok = True
        for nid in perm:
            if not set(dag.nodes[nid].deps) <= seen:
                ok = False
                break
            seen.add(nid)
        if ok:
            yield list(perm)


def test_chain_peak():
    d = chain([3, 5, 2, 4])
    # direct: 3+5, then 5+2, then 2+4
    assert simulate(d, [1, 2, 3], "direct").peak == 8
    # strict keeps everything until the output exists
    assert simulate(d, [1, 2, 3], "strict").peak == 14
    assert simulate(d, [1, 2, 3], "direct", count="intermediate").peak == 7


def test_simulate_rejects_bad_orders():
    d = chain([1, 1, 1])
    with pytest.raises(ValueError):
        simulate(d, [2, 1])
    with pytest.raises(ValueError):
        simulate(d, [1])
    with pytest.raises(ValueError):
        simulate(d, [0, 1, 2])
    with pytest.raises(ValueError):
        simulate(d, [1, 1, 2])
    with pytest.raises(ValueError):
        simulate(d, [1, 2], eviction="lazy")


def test_add_rejects_bad_nodes():
    d = Dag()
    with pytest.raises(ValueError):
        d.add(1, kind="weird")
    d.add(1, kind="input")
    with pytest.raises(ValueError):
        d.add(1, [0], kind="input")
    with pytest.raises(ValueError):
        d.add(1, [5])


def test_size_cap():
    d = chain([1] * 20)
    with pytest.raises(SizeCapError):
        enumerate_min_peak(d, max_nodes=13)


def test_diamond_prefers_small_branch_first():
    d = Dag()
    x = d.add(1, kind="input")
    a = d.add(10, [x])
    b = d.add(1, [x])
    a2 = d.add(1, [a])
    d.add(1, [a2, b], kind="output")
    peak, order = enumerate_min_peak(d, "direct")
    assert simulate(d, order, "direct").peak == peak
    assert peak == min(simulate(d, o, "direct").peak for o in topo_orders(d))


def test_json_roundtrip(tmp_path):
    d = random_dag(np.random.default_rng(0), 7)
    path = tmp_path / "d.json"
    path.write_text(json.dumps(d.to_dict()))
    back = Dag.load(path)
    assert [(n.size, n.deps, n.kind, n.scratch) for n in back.nodes] == \
           [(n.size, n.deps, n.kind, n.scratch) for n in d.nodes]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7), st.sampled_from(["direct", "strict"]),
       st.sampled_from(["all", "intermediate"]))
def test_enumerator_matches_brute_force(seed, n, eviction, count):
    d = random_dag(np.random.default_rng(seed), n)
    peak, order = enumerate_min_peak(d, eviction, count)
    assert simulate(d, order, eviction, count).peak == peak
    assert peak == min(simulate(d, o, eviction, count).peak for o in topo_orders(d))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_strict_never_below_direct(seed, n):
    d = random_dag(np.random.default_rng(seed), n)
    order = d.computed
    assert simulate(d, order, "strict").peak >= simulate(d, order, "direct").peak
