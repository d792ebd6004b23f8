"""Inference-time analysis: sparsity measurement, parameter/MAC accounting and
execution through the sparse-kernel executor.

One multiply-accumulate counts as one FLOP unit. Costed operations are
convolutions, fully connected layers, average pooling (one per input
element), and for dynamic layers the attention branch (pool, two matmuls, a
k-way softmax) plus kernel aggregation (k per kernel position). Batch norm,
activations, max pooling and residual additions are not counted.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from sdconv import tensor as T
from sdconv import zoo
from sdconv.errors import AnalysisError
from sdconv.sdconv import MaskMode, SDConv2d


# -- sparsity -------------------------------------------------------------------

@dataclass
class LayerSparsity:
    name: str
    params: int
    nonzero: int
    layer_sparsity: float
    expert_sparsity: list
    kernel_sparsity: float

    @property
    def density(self):
        return self.nonzero / self.params


@dataclass
class SparsityReport:
    layers: list

    @property
    def global_density(self):
        total = sum(l.params for l in self.layers)
        return sum(l.nonzero for l in self.layers) / total if total else 1.0

    def by_name(self):
        return {l.name: l for l in self.layers}

    def to_records(self):
        lines = [f"global_density={self.global_density:.6f}"]
        for l in self.layers:
            lines += [f"{l.name}.params={l.params}", f"{l.name}.nonzero={l.nonzero}",
                      f"{l.name}.layer_sparsity={l.layer_sparsity:.6f}",
                      f"{l.name}.kernel_sparsity={l.kernel_sparsity:.6f}"]
            lines += [f"{l.name}.expert{i}_sparsity={s:.6f}" for i, s in enumerate(l.expert_sparsity)]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["layer,params,nonzero,layer_sparsity,kernel_sparsity"]
        rows += [f"{l.name},{l.params},{l.nonzero},{l.layer_sparsity:.6f},{l.kernel_sparsity:.6f}"
                 for l in self.layers]
        return "\n".join(rows) + "\n"


def mask_sparsity(name, masks):
    """Sparsity figures for one layer's binary masks [k, ...]."""
    masks = np.asarray(masks, dtype=bool)
    k = masks.shape[0]
    per_expert = [1.0 - float(m.mean()) for m in masks]
    union = masks.reshape(k, -1).any(axis=0)
    return LayerSparsity(name, int(masks.size), int(masks.sum()), 1.0 - float(masks.mean()),
                         per_expert, 1.0 - float(union.mean()))


def sd_layers(model):
    if isinstance(model, zoo.Network):
        return model.sd_layers()
    return [(name, m) for name, m in model.named_modules() if isinstance(m, SDConv2d)]


def measure_sparsity(model):
    return SparsityReport([mask_sparsity(name, layer.hard_masks()) for name, layer in sd_layers(model)])


# -- cost -------------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    sparse_macs: int


@dataclass
class CostReport:
    model: str
    resolution: int
    layers: list = field(default_factory=list)
    classifier: str | None = None

    @property
    def params(self):
        return sum(l.params for l in self.layers)

    @property
    def macs(self):
        return sum(l.macs for l in self.layers)

    @property
    def sparse_macs(self):
        return sum(l.sparse_macs for l in self.layers)

    @property
    def classifier_params(self):
        return sum(l.params for l in self.layers if self.classifier and l.name == self.classifier)

    @property
    def feature_params(self):
        """Parameters excluding the final classifier."""
        return self.params - self.classifier_params

    def to_records(self):
        lines = [f"model={self.model}", f"resolution={self.resolution}", f"params={self.params}",
                 f"feature_params={self.feature_params}", f"macs={self.macs}",
                 f"sparse_macs={self.sparse_macs}"]
        for l in self.layers:
            lines += [f"{l.name}.kind={l.kind}", f"{l.name}.params={l.params}", f"{l.name}.macs={l.macs}",
                      f"{l.name}.sparse_macs={l.sparse_macs}"]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["layer,kind,params,macs,sparse_macs"]
        rows += [f"{l.name},{l.kind},{l.params},{l.macs},{l.sparse_macs}" for l in self.layers]
        return "\n".join(rows) + "\n"


def _conv_cost(path, node, shape, arch, layer, kernel_density):
    c, h, w = shape
    if c != node.cin:
        raise AnalysisError(f"{path}: expects {node.cin} input channels, graph provides {c}")
    ho = (h + 2 * node.padding - node.kernel) // node.stride + 1
    wo = (w + 2 * node.padding - node.kernel) // node.stride + 1
    positions = node.cout * (node.cin // node.groups) * node.kernel ** 2
    bias = node.cout if node.bias else 0
    conv_macs = positions * ho * wo
    mode = layer.mode if layer is not None else arch.mode
    if not node.dynamic or mode is MaskMode.STATIC:
        cost = LayerCost(path, "conv", positions + bias, conv_macs, conv_macs)
        return cost, (node.cout, ho, wo)

    k = arch.k if layer is None else layer.k
    params = k * (positions + bias)
    attn_macs = agg_bias = 0
    if k > 1:
        hidden = node.cin // arch.reduce_ratio if layer is None else layer.attention.hidden
        if layer is None and node.cin % arch.reduce_ratio:
            raise AnalysisError(f"{path}: {node.cin} channels not divisible by reduce ratio {arch.reduce_ratio}")
        params += node.cin * hidden + hidden + hidden * k + k
        attn_macs = node.cin * h * w + node.cin * hidden + hidden * k + k
        agg_bias = k * bias
    masked = layer is not None and layer.fixed_masks is not None
    if mode.sparse and not masked:
        params += 1  # learnable threshold

    if layer is not None:
        union = int(layer.hard_masks().reshape(k, -1).any(axis=0).sum())
    else:
        union = int(round(positions * kernel_density.get(path, 1.0)))
    agg = lambda nnz: (k * nnz + agg_bias) if k > 1 else 0  # noqa: E731
    dense = conv_macs + attn_macs + agg(positions)
    sparse = union * ho * wo + attn_macs + agg(union)
    return LayerCost(path, "dynamic_conv", params, dense, sparse), (node.cout, ho, wo)


def _cost(node, path, shape, arch, model, out, kernel_density):
    if isinstance(node, zoo.Seq):
        for name, child in node.children:
            shape = _cost(child, f"{path}.{name}" if path else name, shape, arch, model, out, kernel_density)
        return shape
    if isinstance(node, zoo.Res):
        main = _cost(node.body, f"{path}.body", shape, arch, model, out, kernel_density)
        if node.shortcut is not None:
            side = _cost(node.shortcut, f"{path}.shortcut", shape, arch, model, out, kernel_density)
        else:
            side = shape
        if main != side:
            raise AnalysisError(f"{path}: residual branches disagree ({main} vs {side})")
        return main
    c, h, w = shape
    if isinstance(node, zoo.Conv):
        layer = None
        if model is not None:
            mod = model.get_submodule(f"body.{path}")
            layer = mod if isinstance(mod, SDConv2d) else None
        cost, shape = _conv_cost(path, node, shape, arch, layer, kernel_density)
        out.append(cost)
        return shape
    if isinstance(node, zoo.BN):
        out.append(LayerCost(path, "batchnorm", 2 * node.channels, 0, 0))
        return shape
    if isinstance(node, zoo.Act):
        return shape
    if isinstance(node, zoo.MaxPool):
        ho = (h + 2 * node.padding - node.kernel) // node.stride + 1
        wo = (w + 2 * node.padding - node.kernel) // node.stride + 1
        return (c, ho, wo)
    if isinstance(node, zoo.GlobalPool):
        out.append(LayerCost(path, "avgpool", 0, c * h * w, c * h * w))
        return (c, 1, 1)
    if isinstance(node, zoo.Dense):
        if c * h * w != node.fin:
            raise AnalysisError(f"{path}: expects {node.fin} features, graph provides {c * h * w}")
        params = node.fin * node.fout + (node.fout if node.bias else 0)
        macs = node.fin * node.fout
        out.append(LayerCost(path, "linear", params, macs, macs))
        return (node.fout, 1, 1)
    raise AnalysisError(f"{path}: unknown layer kind {type(node).__name__}")


def count_cost(model, resolution=None, kernel_density=None):
    """Parameter and MAC counts for an ``Arch`` or a built ``Network``.

    For a built network the sparse MAC count uses the live masks; for a bare
    graph, ``kernel_density`` optionally maps dynamic-layer paths to the
    fraction of kernel positions kept.
    """
    if isinstance(model, zoo.Network):
        arch, net = model.arch, model
    elif isinstance(model, zoo.Arch):
        arch, net = model, None
    else:
        raise AnalysisError(f"cannot cost an object of type {type(model).__name__}")
    resolution = resolution or arch.resolution
    report = CostReport(arch.name, resolution, classifier=arch.meta.get("classifier"))
    _cost(arch.root, "", (arch.in_channels, resolution, resolution), arch, net, report.layers,
          kernel_density or {})
    return report


# -- sparse execution ---------------------------------------------------------------

@dataclass
class SparseRun:
    output: T.Tensor
    macs: dict
    dense_macs: dict

    @property
    def total_macs(self):
        return sum(self.macs.values())


@contextlib.contextmanager
def sparse_execution(model):
    layers = sd_layers(model)
    previous = [layer.executor for _, layer in layers]
    for _, layer in layers:
        layer.executor = "sparse"
    try:
        yield layers
    finally:
        for (_, layer), ex in zip(layers, previous):
            layer.executor = ex


def sparse_forward(x, model):
    """Run ``model`` with every dynamic layer on the zero-skipping executor.

    Returns the output with per-layer executed MACs next to the dense count.
    """
    x = T.as_tensor(x)
    with T.no_grad(), sparse_execution(model) as layers:
        out = model(x)
    macs, dense = {}, {}
    for name, layer in layers:
        if layer.last_macs is None:
            continue
        macs[name] = layer.last_macs
        dense[name] = _dense_conv_macs(layer, x.shape[0], out_hw=layer._last_out_hw)
        layer.last_macs = None
    return SparseRun(out, macs, dense)


def _dense_conv_macs(layer, n, out_hw):
    cout, cg, kh, kw = layer.kernel_shape
    return n * cout * cg * kh * kw * out_hw[0] * out_hw[1]

