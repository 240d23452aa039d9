"""Acceptance checks. Each check prints one PASS/FAIL line and then asserts.

Run with pytest (lines are repeated in the terminal summary) or directly with
``python3 tests/test_acceptance.py``. Probe training budgets are moderate by
default; set RNNPOOL_ACCEPT_FULL=1 for the long runs. Set RNNPOOL_CIFAR to a
directory holding the CIFAR-10 binary batches to enable the CIFAR check.
"""
import math
import os
import time

import numpy as np
import pytest

import conftest
from conftest import _plain_layer, random_valid_nets
from rnnpool import dag as D
from rnnpool.errors import PlanningError
from rnnpool.executor import run_naive, run_streaming
from rnnpool.graph import (Conv2d, MBConv, NetworkSpec, RnnPoolLayer, count_madds, init_weights,
                           lower)
from rnnpool.memplan import (analyze, layerbylayer_peak, lower_bound_no_recompute,
                             recompute_madds, rowwise_schedule_bound)
from rnnpool.presets import BOTTLENECK_SEGMENTS, PRESET_NAMES, preset
from rnnpool.quant import dequantize, quantize_per_channel
from rnnpool.validation import gradcheck_rnnpool

MIB = 1 << 20
FULL = os.environ.get("RNNPOOL_ACCEPT_FULL") == "1"


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# -- 1: layer-by-layer peaks -------------------------------------------------------------

LAYERBYLAYER_MIB = {
    "mobilenetv2": 2.29, "resnet18": 3.06, "densenet121": 3.06, "googlenet": 1.63,
    "mobilenetv2-rnnpool": 0.24, "resnet18-rnnpool": 0.38, "densenet121-rnnpool": 0.77,
    "googlenet-rnnpool": 0.78,
}


@pytest.mark.parametrize("name", LAYERBYLAYER_MIB)
def test_c1_layerbylayer_peak(name):
    rep, dt = timed(lambda: layerbylayer_peak(preset(name)))
    mib = rep.peak_bytes / MIB
    # the reference figures are either rounded or truncated to two decimals
    shown = {round(mib, 2), math.floor(mib * 100) / 100}
    ok = LAYERBYLAYER_MIB[name] in shown and dt < 1.0
    record(1, ok, f"{name} {mib:.4f} MiB (want {LAYERBYLAYER_MIB[name]:.2f}), {dt:.2f}s")


# -- 2: optimal no-recompute peaks -------------------------------------------------------

ROWWISE_MIB = {"mobilenetv2": 0.84, "resnet18": 0.81, "densenet121": 2.38, "googlenet": 1.01,
               "googlenet-rnnpool": 0.59}


@pytest.mark.parametrize("name", ROWWISE_MIB)
def test_c2_rowwise_closed_form(name):
    rep, dt = timed(lambda: analyze(preset(name), "rowwise",
                                    segment=BOTTLENECK_SEGMENTS[name]))
    mib = rep.extra["closed_form_mib"]
    rel = abs(mib - ROWWISE_MIB[name]) / ROWWISE_MIB[name]
    record(2, rel <= 0.01 and dt < 1.0,
           f"{name} {mib:.4f} MiB (want {ROWWISE_MIB[name]:.2f}, off {rel:.2%}), {dt:.2f}s")


# -- 3: MAdds ----------------------------------------------------------------------------

MADDS = {"mobilenetv2": 300e6, "mobilenetv2-rnnpool": 226e6, "densenet121": 2.83e9,
         "densenet121-rnnpool": 1.04e9}


@pytest.mark.parametrize("name", MADDS)
def test_c3_madds(name):
    total, dt = timed(lambda: count_madds(preset(name)).total)
    rel = abs(total - MADDS[name]) / MADDS[name]
    record(3, rel <= 0.05 and dt < 1.0,
           f"{name} {total / 1e6:.1f}M (want {MADDS[name] / 1e6:.0f}M, off {rel:.1%}), {dt:.2f}s")


# -- 4: bound ordering -------------------------------------------------------------------

def _tiny_conv_net(rng):
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    layers = []
    for _ in range(rng.integers(1, 3)):
        k = int(rng.choice([1, 3]))
        pad = int(rng.choice([0, 1])) if k == 3 else 0
        layers.append(Conv2d(k, k, int(rng.integers(1, 3)), int(rng.choice([1, 2])), pad))
    return NetworkSpec("tiny", (h, w, 1), layers)


def test_c4_bound_ordering():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    n = good = 0
    while n < 60:
        net = _tiny_conv_net(rng)
        seg = (0, len(net.layers))
        try:
            rb = rowwise_schedule_bound(net, seg)
        except Exception:
            continue
        if len(rb.dag.computed) > 13:
            continue
        n += 1
        lb = lower_bound_no_recompute(net, seg) // 4
        opt, _ = D.enumerate_min_peak(rb.dag, "strict", "intermediate")
        good += lb <= opt <= rb.bytes // 4
    record(4, good == n and time.perf_counter() - t < 120,
           f"lower <= optimum <= row-wise on {good}/{n} random DAGs, "
           f"{time.perf_counter() - t:.1f}s")


def test_c4_small_instance_equality():
    net = NetworkSpec("small", (5, 5, 1), [Conv2d(3, 3, 1, 1, 1), Conv2d(3, 3, 1, 1, 1)])
    rb = rowwise_schedule_bound(net, (0, 2))
    lb = lower_bound_no_recompute(net, (0, 2)) // 4
    opt, _ = D.enumerate_min_peak(rb.dag, "strict", "intermediate")
    record(4, lb == opt, f"5x5 two-conv instance: lower bound {lb}, enumerated optimum {opt}, "
                         f"row-wise {rb.bytes // 4} elements")


# -- 5: executor equivalence -------------------------------------------------------------

def test_c5_streaming_equals_naive():
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    worst_err, over = 0.0, 0
    nets = random_valid_nets(55, 100)
    for net in nets:
        g = lower(net)
        x = rng.standard_normal(net.input_shape).astype(np.float32)
        w = init_weights(g, rng=int(rng.integers(1 << 31)))
        a, _ = run_naive(g, x, weights=w)
        rb = rowwise_schedule_bound(g, (0, len(net.layers)), include_io=True)
        b, stats = run_streaming(g, x, schedule=rb, weights=w)
        scale = max(float(np.max(np.abs(a))), 1e-30)
        worst_err = max(worst_err, float(np.max(np.abs(a - b))) / scale)
        widest = max(p.shape[1] * p.shape[2] for p in g.prims if not p.virtual) * 4
        over += stats.peak_bytes > rb.bytes + widest
    dt = time.perf_counter() - t
    record(5, worst_err <= 1e-5 and over == 0 and dt < 300,
           f"{len(nets)} nets, worst relative error {worst_err:.1e}, "
           f"{over} peaks above prediction, {dt:.1f}s")


# -- 6: measured equals predicted --------------------------------------------------------

@pytest.mark.parametrize("name", PRESET_NAMES)
def test_c6_naive_peak_matches_analyzer(name):
    net = preset(name)
    x = np.random.default_rng(6).standard_normal(net.input_shape).astype(np.float32)
    (_, stats), dt = timed(lambda: run_naive(net, x))
    want = layerbylayer_peak(net).peak_bytes
    record(6, stats.peak_bytes == want and dt < 120,
           f"{name} measured {stats.peak_bytes} B, predicted {want} B, {dt:.1f}s")


# -- 7: gradient check -------------------------------------------------------------------

def test_c7_gradcheck():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for seed in range(20):
        h1, h2 = (int(v) for v in rng.integers(2, 6, 2))
        patch, ch = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        worst = max(worst, gradcheck_rnnpool(h1, h2, patch, ch, seed=seed)["max_rel_error"])
    dt = time.perf_counter() - t
    record(7, worst < 1e-4 and dt < 60, f"20 seeds, worst relative error {worst:.1e}, {dt:.1f}s")


# -- 8: probe tasks ----------------------------------------------------------------------

# (task, size, train size, epochs, lr decay, threshold)
PROBE_ROWS = [
    ("lines-multiclass", 32, 2000, 4, 1.0, 0.99),
    ("lines-multilabel", 32, 8000, 20 if FULL else 8, 0.9, 0.99),
    ("lines-multilabel", 64, 3000, 20 if FULL else 5, 0.9, 0.99),
    ("shapes-multilabel", 64, 3000, 20 if FULL else 5, 0.85, 0.99),
]


@pytest.mark.slow
@pytest.mark.parametrize("row", PROBE_ROWS, ids=[f"{r[0]}-{r[1]}" for r in PROBE_ROWS])
def test_c8_probe(row):
    from rnnpool.probe import ProbeModel, generate, train_probe
    task, size, n_train, epochs, decay, need = row
    t = time.perf_counter()
    train = generate(task, n_train, size, seed=1)
    test = generate(task, 1000, size, seed=2)
    outputs = train.labels.shape[1] if train.multilabel else len(train.names)
    model = ProbeModel.create(size, outputs, 32, 32, seed=0)
    res = train_probe(model, train, test, lr=0.2, epochs=epochs, seed=0, lr_decay=decay)
    curve = " ".join(f"{a:.3f}" for a in res.curve)
    record(8, res.final_test_accuracy >= need,
           f"{task} {size}x{size} h1=h2=32 test accuracy {res.final_test_accuracy:.3f} "
           f"(want >= {need}), curve [{curve}], {time.perf_counter() - t:.0f}s")


# -- 9: CIFAR single-shot pooling ---------------------------------------------------------

@pytest.mark.slow
def test_c9_cifar_pooling():
    path = os.environ.get("RNNPOOL_CIFAR")
    if not path:
        pytest.skip("RNNPOOL_CIFAR not set")
    from rnnpool.probe import single_shot_pool_compare
    acc = single_shot_pool_compare(path, seed=0)
    others = max(acc["maxpool"], acc["avgpool"])
    ok = acc["rnnpool"] > acc["strided-conv"] > others and acc["rnnpool"] >= 0.60
    record(9, ok, " ".join(f"{k} {v:.3f}" for k, v in acc.items()))


# -- 10: quantization --------------------------------------------------------------------

def test_c10_round_trip():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 9, rng.integers(1, 4)))
        x = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        q = quantize_per_channel(x)
        scale = np.broadcast_to(np.asarray(q.scale, np.float64).reshape(
            (1,) * (x.ndim - 1) + (-1,)), x.shape)
        worst = max(worst, float(np.max(np.abs(dequantize(q) - x) / scale)))
    record(10, worst <= 0.5 + 1e-6, f"1000 tensors, worst error {worst:.4f} x scale")


def test_c10_int8_mbconv_memory():
    # stem conv and RNNPool bring a VGA frame down to 80x60x32, then the first MBConv
    net = NetworkSpec("face-int8", (640, 480, 3), [Conv2d(3, 3, 4, 2, 1),
                                                   RnnPoolLayer(8, 8, 8, 8, 4), MBConv(2, 16, 1)])
    b = dict(layerbylayer_peak(net, "int8").contributions)["L2"]
    record(10, b == 224 * 1024, f"int8 MBConv 80x60x32 -> 80x60x16: {b} B = {b / 1024:.1f} KiB "
                                f"(want 224 KiB)")


# -- 11: recomputation -------------------------------------------------------------------

def _plain_net(rng):
    h = int(rng.integers(12, 33))
    layers = [_plain_layer(rng) for _ in range(rng.integers(2, 6))]
    return NetworkSpec("plain", (h, h, int(rng.integers(1, 4))), layers)


def test_c11_unbounded_budget():
    bad = [n for n in PRESET_NAMES
           if recompute_madds(preset(n), float("inf")) != count_madds(preset(n)).total]
    record(11, not bad, f"infinite budget equals plain MAdds on {len(PRESET_NAMES) - len(bad)}"
                        f"/{len(PRESET_NAMES)} presets")


def test_c11_monotone_in_budget():
    broken = 0
    nets = random_valid_nets(11, 20, make=_plain_net)
    for net in nets:
        top = layerbylayer_peak(net).peak_bytes
        prev, infeasible = None, False
        for budget in np.linspace(top * 1.2, top * 0.05, 24):
            try:
                cost = recompute_madds(net, budget)
            except PlanningError:
                infeasible = True
                continue
            # feasibility must not come back once lost, and costs never drop as budget shrinks
            broken += infeasible or (prev is not None and cost < prev)
            prev = cost
    record(11, broken == 0, f"MAdds non-increasing in budget on {len(nets)} random nets, "
                            f"{broken} violations")


def test_c11_mobilenetv2_reference():
    cost = recompute_madds(preset("mobilenetv2"), 0.38 * MIB)
    rel = abs(cost - 1.00e9) / 1.00e9
    record(11, rel <= 0.20, f"mobilenetv2 at 0.38 MiB: {cost / 1e9:.3f}G (want 1.00G +-20%, "
                            f"off {rel:.1%})")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
