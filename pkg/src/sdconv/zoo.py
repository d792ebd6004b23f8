"""Declarative architecture graphs.

A graph is a tree of small frozen node records. The same tree drives cost
accounting (``analysis.count_cost``) and model construction
(``build_model``), so module names line up with graph paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sdconv import nn
from sdconv.errors import AnalysisError, ConfigError
from sdconv.sdconv import MaskMode, SDConv2d


@dataclass(frozen=True)
class Conv:
    cin: int
    cout: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False
    dynamic: bool = False


@dataclass(frozen=True)
class BN:
    channels: int


@dataclass(frozen=True)
class Act:
    six: bool = False


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int
    padding: int = 0


@dataclass(frozen=True)
class GlobalPool:
    pass


@dataclass(frozen=True)
class Dense:
    fin: int
    fout: int
    bias: bool = True


@dataclass(frozen=True)
class Seq:
    children: tuple  # ((name, node), ...)


@dataclass(frozen=True)
class Res:
    body: Seq
    shortcut: Seq | None = None
    post_relu: bool = True


@dataclass(frozen=True)
class Arch:
    """A network graph plus the settings shared by its dynamic layers."""

    name: str
    root: Seq
    in_channels: int = 3
    k: int = 4
    reduce_ratio: int = 16
    mode: MaskMode = MaskMode.DIFFERENT
    sharpness: float = 1 / 1024
    resolution: int = 224
    meta: dict = field(default_factory=dict, compare=False)


def seq(*named):
    return Seq(tuple(named))


def walk(node, prefix=""):
    """Yield (path, leaf node) pairs in execution order."""
    if isinstance(node, Seq):
        for name, child in node.children:
            yield from walk(child, f"{prefix}.{name}" if prefix else name)
    elif isinstance(node, Res):
        yield from walk(node.body, f"{prefix}.body")
        if node.shortcut is not None:
            yield from walk(node.shortcut, f"{prefix}.shortcut")
    else:
        yield prefix, node


def dynamic_convs(arch):
    return [(path, node) for path, node in walk(arch.root) if isinstance(node, Conv) and node.dynamic]


# -- ResNet -----------------------------------------------------------------

def _basic_block(cin, cout, stride, dynamic):
    body = seq(("conv1", Conv(cin, cout, 3, stride, 1, dynamic=dynamic)), ("bn1", BN(cout)), ("relu", Act()),
               ("conv2", Conv(cout, cout, 3, 1, 1, dynamic=dynamic)), ("bn2", BN(cout)))
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = seq(("conv", Conv(cin, cout, 1, stride, 0, dynamic=dynamic)), ("bn", BN(cout)))
    return Res(body, shortcut)


def _bottleneck(cin, width, stride, dynamic, expansion=4):
    cout = width * expansion
    body = seq(("conv1", Conv(cin, width, 1, dynamic=dynamic)), ("bn1", BN(width)), ("relu1", Act()),
               ("conv2", Conv(width, width, 3, stride, 1, dynamic=dynamic)), ("bn2", BN(width)),
               ("relu2", Act()),
               ("conv3", Conv(width, cout, 1, dynamic=dynamic)), ("bn3", BN(cout)))
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = seq(("conv", Conv(cin, cout, 1, stride, 0, dynamic=dynamic)), ("bn", BN(cout)))
    return Res(body, shortcut)


_RESNET_LAYOUT = {
    10: ("basic", (1, 1, 1, 1)),
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
}


def resnet(depth, dynamic=False, k=4, reduce_ratio=16, num_classes=1000, in_channels=3,
           base_width=64, mode=None, resolution=224):
    """ImageNet-style ResNet; every conv except the stem is dynamic when ``dynamic``."""
    if depth not in _RESNET_LAYOUT:
        raise ConfigError(f"unsupported ResNet depth {depth}")
    kind, blocks = _RESNET_LAYOUT[depth]
    stem = seq(("conv", Conv(in_channels, base_width, 7, 2, 3)), ("bn", BN(base_width)), ("relu", Act()),
               ("pool", MaxPool(3, 2, 1)))
    stages = []
    cin = base_width
    for i, n in enumerate(blocks):
        width = base_width * 2 ** i
        stride = 1 if i == 0 else 2
        members = []
        for b in range(n):
            if kind == "basic":
                block = _basic_block(cin, width, stride if b == 0 else 1, dynamic)
                cin = width
            else:
                block = _bottleneck(cin, width, stride if b == 0 else 1, dynamic)
                cin = width * 4
            members.append((str(b), block))
        stages.append((f"layer{i + 1}", seq(*members)))
    root = seq(("stem", stem), *stages, ("pool", GlobalPool()), ("fc", Dense(cin, num_classes)))
    mode = mode or (MaskMode.DIFFERENT if dynamic else MaskMode.STATIC)
    return Arch(f"resnet{depth}", root, in_channels, k, reduce_ratio, MaskMode(mode), resolution=resolution,
                meta={"classifier": "fc"})


def resnet10(**kw):
    return resnet(10, **kw)


def resnet18(**kw):
    return resnet(18, **kw)


def resnet50(**kw):
    return resnet(50, **kw)


# -- MobileNetV2 --------------------------------------------------------------

def _make_divisible(v, divisor=8, min_value=None):
    min_value = min_value or divisor
    new_v = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


_MBV2_SETTINGS = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                  (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def mobilenet_v2(width=1.0, dynamic=False, k=4, reduce_ratio=8, num_classes=1000, in_channels=3,
                 mode=None, resolution=224):
    """MobileNetV2. Channel counts are multiples of 8, so dynamic variants default to
    an attention reduce ratio of 8 to keep every layer's channels divisible."""
    cin = _make_divisible(32 * width)
    last = _make_divisible(1280 * max(1.0, width))
    stem = seq(("conv", Conv(in_channels, cin, 3, 2, 1)), ("bn", BN(cin)), ("relu", Act(six=True)))
    blocks = []
    idx = 0
    for t, c, n, s in _MBV2_SETTINGS:
        cout = _make_divisible(c * width)
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = cin * t
            parts = []
            if t != 1:
                parts += [("expand", Conv(cin, hidden, 1, dynamic=dynamic)), ("bn0", BN(hidden)),
                          ("relu0", Act(six=True))]
            parts += [("dw", Conv(hidden, hidden, 3, stride, 1, groups=hidden, dynamic=dynamic)),
                      ("bn1", BN(hidden)), ("relu1", Act(six=True)),
                      ("project", Conv(hidden, cout, 1, dynamic=dynamic)), ("bn2", BN(cout))]
            body = seq(*parts)
            if stride == 1 and cin == cout:
                blocks.append((str(idx), Res(body, None, post_relu=False)))
            else:
                blocks.append((str(idx), body))
            cin = cout
            idx += 1
    head = seq(("conv", Conv(cin, last, 1, dynamic=dynamic)), ("bn", BN(last)), ("relu", Act(six=True)))
    root = seq(("stem", stem), ("features", seq(*blocks)), ("head", head), ("pool", GlobalPool()),
               ("classifier", Dense(last, num_classes)))
    mode = mode or (MaskMode.DIFFERENT if dynamic else MaskMode.STATIC)
    return Arch(f"mobilenetv2_x{width}", root, in_channels, k, reduce_ratio, MaskMode(mode),
                resolution=resolution, meta={"classifier": "classifier"})


# -- desk-scale CNN -----------------------------------------------------------

def toy_cnn(in_channels=1, num_classes=10, widths=(16, 16, 32), k=4, reduce_ratio=16,
            mode=MaskMode.DIFFERENT, sharpness=1 / 1024, resolution=28):
    """Static stem followed by two dynamic conv blocks, global pooling and a classifier.

    stem: 3x3 stride 2 -> block1: 3x3 stride 1 -> block2: 3x3 stride 2.
    """
    c0, c1, c2 = widths
    root = seq(
        ("stem", seq(("conv", Conv(in_channels, c0, 3, 2, 1)), ("bn", BN(c0)), ("relu", Act()))),
        ("block1", seq(("conv", Conv(c0, c1, 3, 1, 1, bias=True, dynamic=True)), ("bn", BN(c1)),
                       ("relu", Act()))),
        ("block2", seq(("conv", Conv(c1, c2, 3, 2, 1, bias=True, dynamic=True)), ("bn", BN(c2)),
                       ("relu", Act()))),
        ("pool", GlobalPool()),
        ("fc", Dense(c2, num_classes)),
    )
    return Arch("toy", root, in_channels, k, reduce_ratio, MaskMode(mode), sharpness, resolution,
                meta={"classifier": "fc"})


ZOO = {
    "resnet10": resnet10,
    "resnet18": resnet18,
    "resnet50": resnet50,
    "mobilenetv2": lambda **kw: mobilenet_v2(1.0, **kw),
    "mobilenetv2_x1.0": lambda **kw: mobilenet_v2(1.0, **kw),
    "mobilenetv2_x0.75": lambda **kw: mobilenet_v2(0.75, **kw),
    "mobilenetv2_x0.5": lambda **kw: mobilenet_v2(0.5, **kw),
    "toy": toy_cnn,
}


def get_arch(name, **kw):
    try:
        factory = ZOO[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None
    return factory(**kw)


# -- construction -------------------------------------------------------------

class Network(nn.Module):
    """A built graph; keeps a reference to its declarative description."""

    def __init__(self, arch, body):
        self.arch = arch
        self.body = body

    def forward(self, x):
        return self.body(x)

    def sd_layers(self):
        return [(name[len("body."):], m) for name, m in self.named_modules() if isinstance(m, SDConv2d)]


class _Named(nn.Sequential):
    """Sequential whose children are attributes, so parameter names follow graph paths."""

    def __init__(self, named):
        self._order = [name for name, _ in named]
        for name, module in named:
            setattr(self, name, module)

    @property
    def layers(self):
        return [getattr(self, n) for n in self._order]

    def _children(self):
        for n in self._order:
            yield n, getattr(self, n)


def _build(node, arch, rng):
    if isinstance(node, Seq):
        return _Named([(name, _build(child, arch, rng)) for name, child in node.children])
    if isinstance(node, Res):
        shortcut = _build(node.shortcut, arch, rng) if node.shortcut is not None else None
        return nn.Residual(_build(node.body, arch, rng), shortcut, node.post_relu)
    if isinstance(node, Conv):
        if node.dynamic and arch.mode is not MaskMode.STATIC:
            return SDConv2d(node.cin, node.cout, node.kernel, node.stride, node.padding, node.groups,
                            k=arch.k, reduce_ratio=arch.reduce_ratio, sharpness=arch.sharpness,
                            mode=arch.mode, bias=node.bias, rng=rng)
        return nn.Conv2d(node.cin, node.cout, node.kernel, node.stride, node.padding, node.groups,
                         bias=node.bias, rng=rng)
    if isinstance(node, BN):
        return nn.BatchNorm2d(node.channels)
    if isinstance(node, Act):
        return nn.ReLU(node.six)
    if isinstance(node, MaxPool):
        return nn.MaxPool2d(node.kernel, node.stride, node.padding)
    if isinstance(node, GlobalPool):
        return nn.GlobalAvgPool()
    if isinstance(node, Dense):
        return nn.Linear(node.fin, node.fout, node.bias, rng=rng)
    raise AnalysisError(f"unknown layer kind {type(node).__name__}")


def build_model(arch, rng=None):
    if rng is None:
        rng = np.random.default_rng(0)
    return Network(arch, _build(arch.root, arch, rng))
