"""Diagnostic studies: one-shot pruning, aggregated-kernel statistics, noise
robustness, sparsity sweeps and the shared- versus per-expert mask comparison."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdconv import tensor as T
from sdconv.analysis import count_cost, measure_sparsity
from sdconv.data import Dataset
from sdconv.errors import AnalysisError, ConfigError
from sdconv.sdconv import MaskMode
from sdconv.train import evaluate, stream, train

DEFAULT_SIGMAS = (0.05, 0.10, 0.15, 0.20)


# -- one-shot pruning -------------------------------------------------------------

def magnitude_mask(weights, fraction):
    """Keep-mask removing the ``fraction`` smallest-magnitude entries of ``weights``.

    Ranking is over the whole array; ties are broken by position so exactly
    ``round(fraction * size)`` entries are removed.
    """
    if not 0 <= fraction < 1:
        raise ConfigError(f"fraction: must lie in [0, 1), got {fraction}")
    flat = np.abs(np.asarray(weights)).ravel()
    cut = int(round(fraction * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:cut]] = False
    return keep.reshape(np.shape(weights))


def prune_pretrained(model, fraction):
    """Copy of ``model`` whose dynamic layers carry fixed one-shot magnitude masks.

    Per layer, the smallest ``fraction`` of entries across all k experts jointly
    are removed. Entries already masked count as zero magnitude.
    """
    pruned = copy.deepcopy(model)
    for _, layer in pruned.sd_layers():
        current = layer.hard_masks()
        effective = layer.experts.data * current
        keep = magnitude_mask(effective, fraction) & current
        layer.fixed_masks = keep.astype(layer.experts.dtype)
    return pruned


# -- aggregated kernel statistics ---------------------------------------------------

@dataclass
class RunningStats:
    """Streaming mean/variance (pairwise merge of count, mean, sum of squared deviations)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return self
        n_b = values.size
        mean_b = float(values.mean())
        m2_b = float(((values - mean_b) ** 2).sum())
        return self.merge(RunningStats(n_b, mean_b, m2_b))

    def merge(self, other):
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        self.mean += delta * other.count / n
        self.m2 += other.m2 + delta * delta * self.count * other.count / n
        self.count = n
        return self

    @property
    def variance(self):
        return max(self.m2 / self.count, 0.0) if self.count else float("nan")


@dataclass
class KernelStats:
    layers: dict = field(default_factory=dict)  # name -> RunningStats

    def to_csv(self):
        rows = ["layer,count,mean,variance"]
        rows += [f"{n},{s.count},{s.mean:.9g},{s.variance:.9g}" for n, s in self.layers.items()]
        return "\n".join(rows) + "\n"

    def scaled(self):
        """Per-curve min-max scaled means and variances, for plotting."""
        out = {}
        for key in ("mean", "variance"):
            vals = np.array([getattr(s, key) for s in self.layers.values()])
            span = vals.max() - vals.min() if vals.size else 0.0
            out[key] = dict(zip(self.layers, (vals - vals.min()) / span if span > 0 else np.zeros_like(vals)))
        return out


def kernel_statistics(model, dataset, batch_size=256):
    """Stream the mean and variance of every per-sample aggregated kernel entry, per layer."""
    layers = model.sd_layers()
    if not layers:
        raise AnalysisError("model has no dynamic layers")
    stats = KernelStats({name: RunningStats() for name, _ in layers})
    was_training = model.training
    model.eval()
    for _, layer in layers:
        layer.capture_kernels = True
    try:
        with T.no_grad():
            for x, _ in dataset.batches(batch_size):
                model(T.Tensor(x))
                for name, layer in layers:
                    if layer.last_kernels is None:
                        raise AnalysisError(f"{name}: layer does not aggregate kernels in this mode")
                    stats.layers[name].update(layer.last_kernels)
                    layer.last_kernels = None
    finally:
        for _, layer in layers:
            layer.capture_kernels = False
        model.train(was_training)
    return stats


# -- noise robustness ---------------------------------------------------------------

def noise_robustness(model, dataset, sigmas=DEFAULT_SIGMAS, seed=0):
    """Top-1 accuracy under additive Gaussian noise on normalized inputs, per sigma.

    Each sigma gets its own fixed noise stream; sigma = 0 evaluates the clean data.
    """
    sigmas = list(sigmas)
    if not sigmas:
        raise ConfigError("sigmas: need at least one noise level")
    results = []
    for sigma in sigmas:
        if sigma < 0:
            raise ConfigError(f"sigmas: noise level must be non-negative, got {sigma}")
        if sigma == 0:
            results.append((sigma, evaluate(model, dataset)))
            continue
        rng = stream(seed, "noise", int(round(sigma * 1e6)))
        noise = rng.standard_normal(dataset.images.shape).astype(np.float32) * np.float32(sigma)
        noisy = Dataset(dataset.images + noise, dataset.labels, dataset.name)
        results.append((sigma, evaluate(model, noisy)))
    return results


def robustness_csv(results):
    return "sigma,accuracy\n" + "".join(f"{s:g},{a:.6f}\n" for s, a in results)


# -- sparsity sweep -------------------------------------------------------------------

@dataclass
class SweepPoint:
    s: float
    final_density: float
    accuracy: float

    @property
    def target_density(self):
        return 1.0 - self.s


def sparsity_sweep(cfg, s_list, out_dir=None, train_set=None, test_set=None):
    """Train one model per target sparsity, all else (seed included) equal."""
    points = []
    for s in s_list:
        run_cfg = cfg.replace(sparsity=float(s))
        run_dir = Path(out_dir) / f"s{s:g}" if out_dir else None
        result = train(run_cfg, run_dir, train_set, test_set)
        points.append(SweepPoint(float(s), result.final_density, result.final_accuracy))
    if out_dir:
        Path(out_dir, "sweep.csv").write_text(sweep_csv(points), encoding="utf-8")
    return points


def sweep_csv(points):
    return "s,final_density,accuracy\n" + "".join(
        f"{p.s:g},{p.final_density:.6f},{p.accuracy:.6f}\n" for p in points)


# -- mask strategy comparison -----------------------------------------------------------

@dataclass
class StrategyReport:
    mode: str
    accuracy: float
    layer_sparsity: dict
    kernel_sparsity: dict
    sparse_macs: int
    dense_macs: int

    def to_records(self):
        lines = [f"{self.mode}.accuracy={self.accuracy:.6f}", f"{self.mode}.sparse_macs={self.sparse_macs}",
                 f"{self.mode}.dense_macs={self.dense_macs}"]
        for name in self.layer_sparsity:
            lines.append(f"{self.mode}.{name}.layer_sparsity={self.layer_sparsity[name]:.6f}")
            lines.append(f"{self.mode}.{name}.kernel_sparsity={self.kernel_sparsity[name]:.6f}")
        return "\n".join(lines) + "\n"


def strategy_report(model, accuracy=float("nan")):
    sp = measure_sparsity(model)
    cost = count_cost(model)
    return StrategyReport(model.arch.mode.value, accuracy,
                          {l.name: l.layer_sparsity for l in sp.layers},
                          {l.name: l.kernel_sparsity for l in sp.layers},
                          cost.sparse_macs, cost.macs)


def masking_strategy_compare(cfg, out_dir=None, train_set=None, test_set=None):
    """Train per-expert-mask and shared-mask models with identical settings and report both."""
    reports = []
    for mode in (MaskMode.DIFFERENT, MaskMode.SAME):
        run_dir = Path(out_dir) / mode.value if out_dir else None
        result = train(cfg.replace(mask_mode=mode.value), run_dir, train_set, test_set)
        reports.append(strategy_report(result.model, result.final_accuracy))
    if out_dir:
        Path(out_dir, "compare.txt").write_text("".join(r.to_records() for r in reports), encoding="utf-8")
    return reports
