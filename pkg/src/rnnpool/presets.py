"""Built-in network configurations."""
from __future__ import annotations

from .graph import (AvgPool, Conv2d, DenseBlock, FullyConnected, InceptionBlock, MaxPool,
                    MBConv, NetworkSpec, ResidualBlock, RnnPoolLayer, TransitionBlock)

# (expansion t, channels c, repeats n, first stride s)
_MBV2_ROWS = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
              (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def make_divisible(v: float, divisor: int = 8) -> int:
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


def _mbconv_rows(rows, width=1.0, start_index=1):
    layers = []
    idx = start_index
    for t, c, n, s in rows:
        c = make_divisible(c * width)
        for i in range(n):
            layers.append(MBConv(t, c, s if i == 0 else 1, name=f"MB{idx}"))
            idx += 1
    return layers


def _mobilenetv2(classes, size, width=1.0, rnnpool=None, name="mobilenetv2"):
    stem = make_divisible(32 * width)
    last = 1280 if width >= 1.0 else make_divisible(1280 * width)
    layers = [Conv2d(3, 3, stem, 2, 1, act="relu6", name="C1")]
    if rnnpool is None:
        layers += _mbconv_rows(_MBV2_ROWS, width)
    else:
        r, h = rnnpool
        layers.append(RnnPoolLayer(r, r, h, h, 4, name="RNNPool"))
        layers += _mbconv_rows(_MBV2_ROWS[3:], width, start_index=7)
    final = size // 32
    layers += [Conv2d(1, 1, last, 1, 0, act="relu6", name="C_last"),
               AvgPool(final, 1, name="pool"), FullyConnected(classes, name="FC")]
    return NetworkSpec(name, (size, size, 3), layers, classes)


def _resnet18(classes, size, rnnpool=False):
    layers = [Conv2d(7, 7, 64, 2, 3, name="C1")]
    if rnnpool:
        layers.append(RnnPoolLayer(8, 8, 32, 32, 4, name="RNNPool"))
        stages = [(256, 2), (256, 1), (512, 2), (512, 1)]
    else:
        layers.append(MaxPool(3, 2, 1, name="P1"))
        stages = [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)]
    layers += [ResidualBlock(c, s, name=f"R{i + 1}") for i, (c, s) in enumerate(stages)]
    layers += [AvgPool(size // 32, 1, name="pool"), FullyConnected(classes, name="FC")]
    return NetworkSpec("resnet18-rnnpool" if rnnpool else "resnet18", (size, size, 3), layers,
                       classes)


def _densenet121(classes, size, rnnpool=False):
    layers = [Conv2d(7, 7, 64, 2, 3, name="C1")]
    if rnnpool:
        layers += [RnnPoolLayer(8, 8, 48, 48, 4, name="RNNPool"),
                   TransitionBlock(256, name="T2")]
    else:
        layers += [MaxPool(3, 2, 1, name="P1"), DenseBlock(6, name="D1"),
                   TransitionBlock(name="T1"), DenseBlock(12, name="D2"),
                   TransitionBlock(name="T2")]
    layers += [DenseBlock(24, name="D3"), TransitionBlock(name="T3"), DenseBlock(16, name="D4"),
               AvgPool(size // 32, 1, name="pool"), FullyConnected(classes, name="FC")]
    return NetworkSpec("densenet121-rnnpool" if rnnpool else "densenet121", (size, size, 3),
                       layers, classes)


_INCEPTION = {
    "3a": (64, 96, 128, 16, 32, 32), "3b": (128, 128, 192, 32, 96, 64),
    "4a": (192, 96, 208, 16, 48, 64), "4b": (160, 112, 224, 24, 64, 64),
    "4c": (128, 128, 256, 24, 64, 64), "4d": (112, 144, 288, 32, 64, 64),
    "4e": (256, 160, 320, 32, 128, 128), "5a": (256, 160, 320, 32, 128, 128),
    "5b": (384, 192, 384, 48, 128, 128),
}


def _inc(name):
    return InceptionBlock(*_INCEPTION[name], name=name)


def _googlenet(classes, size, rnnpool=False):
    layers = [Conv2d(7, 7, 64, 2, 3, name="C1"), MaxPool(3, 2, 1, name="P1")]
    if rnnpool:
        layers.append(RnnPoolLayer(8, 8, 32, 32, 4, name="RNNPool"))
    else:
        layers += [Conv2d(1, 1, 64, name="C2"), Conv2d(3, 3, 192, 1, 1, name="C3"),
                   MaxPool(3, 2, 1, name="P2"), _inc("3a"), _inc("3b"),
                   MaxPool(3, 2, 1, name="P3")]
    layers += [_inc(n) for n in ("4a", "4b", "4c", "4d", "4e")]
    layers += [MaxPool(3, 2, 1, name="P4"), _inc("5a"), _inc("5b"),
               AvgPool(size // 32, 1, name="pool"), FullyConnected(classes, name="FC")]
    return NetworkSpec("googlenet-rnnpool" if rnnpool else "googlenet", (size, size, 3), layers,
                       classes)


_BUILDERS = {
    "mobilenetv2": lambda k, s: _mobilenetv2(k, s),
    "mobilenetv2-rnnpool": lambda k, s: _mobilenetv2(k, s, rnnpool=(6, 16),
                                                     name="mobilenetv2-rnnpool"),
    "resnet18": lambda k, s: _resnet18(k, s),
    "resnet18-rnnpool": lambda k, s: _resnet18(k, s, rnnpool=True),
    "densenet121": lambda k, s: _densenet121(k, s),
    "densenet121-rnnpool": lambda k, s: _densenet121(k, s, rnnpool=True),
    "googlenet": lambda k, s: _googlenet(k, s),
    "googlenet-rnnpool": lambda k, s: _googlenet(k, s, rnnpool=True),
    "mobilenetv2-0.35-vww": lambda k, s: _mobilenetv2(k, s, width=0.35,
                                                      name="mobilenetv2-0.35-vww"),
    "mobilenetv2-0.35-vww-rnnpool": lambda k, s: _mobilenetv2(
        k, s, width=0.35, rnnpool=(6, 8), name="mobilenetv2-0.35-vww-rnnpool"),
}

PRESET_NAMES = tuple(_BUILDERS)

# Segment (first boundary, last boundary) whose row-wise schedule dominates the
# no-recompute memory of each network.
BOTTLENECK_SEGMENTS = {
    "mobilenetv2": ("input", "MB1"),
    "resnet18": ("input", "P1"),
    "densenet121": ("P1", "T1"),
    "googlenet": ("3a", "P3"),
    "googlenet-rnnpool": ("4d", "P4"),
}


def preset(name: str, classes: int | None = None, input_size: int = 224) -> NetworkSpec:
    """Return a built-in network. ImageNet-style presets default to 10 classes, VWW to 2."""
    try:
        build = _BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}") from None
    if classes is None:
        classes = 2 if "vww" in name else 10
    if input_size % 32:
        raise ValueError("input_size must be a multiple of 32")
    return build(classes, input_size)


def bottleneck_segment(net: NetworkSpec) -> tuple[int, int]:
    a, b = BOTTLENECK_SEGMENTS[net.name]
    return net.boundary(a), net.boundary(b)
