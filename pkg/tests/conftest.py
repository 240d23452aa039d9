import numpy as np
import pytest

from rnnpool.graph import (Conv2d, DepthwiseConv, FullyConnected, MaxPool, MBConv, NetworkSpec,
                           Pointwise, ResidualBlock, RnnPoolLayer)

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def _plain_layer(rng):
    kind = rng.choice(["conv", "dw", "pw", "mb", "res", "maxpool"])
    if kind == "conv":
        k = int(rng.choice([1, 3]))
        return Conv2d(k, k, int(rng.integers(2, 9)), int(rng.integers(1, 3)), k // 2)
    if kind == "dw":
        return DepthwiseConv(3, 1, 1)
    if kind == "pw":
        return Pointwise(int(rng.integers(2, 9)))
    if kind == "mb":
        return MBConv(int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(1, 3)))
    if kind == "res":
        return ResidualBlock(int(rng.integers(2, 9)), int(rng.integers(1, 3)))
    return MaxPool(3, 2, 1)


def random_rnnpool_net(rng) -> NetworkSpec:
    """Small random network with exactly one RNNPool layer somewhere in the middle."""
    h, w, c = int(rng.integers(12, 33)), int(rng.integers(12, 33)), int(rng.integers(1, 5))
    layers = [_plain_layer(rng) for _ in range(rng.integers(0, 3))]
    r = int(rng.choice([2, 4, 6]))
    s = int(rng.choice([2, 4])) if r > 2 else 2
    layers.append(RnnPoolLayer(r, r, int(rng.integers(2, 9)), int(rng.integers(2, 9)), s))
    layers += [_plain_layer(rng) for _ in range(rng.integers(0, 3))]
    if rng.random() < 0.5:
        layers.append(FullyConnected(int(rng.integers(2, 11))))
    return NetworkSpec("random", (h, w, c), layers)


def random_valid_nets(seed, count, make=random_rnnpool_net):
    from rnnpool.graph import lower
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        net = make(rng)
        try:
            lower(net)
        except Exception:
            continue
        out.append(net)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
