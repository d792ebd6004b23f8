"""Training and evaluation loop for desk-scale runs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdconv import checkpoint as ckpt_io
from sdconv import data as data_mod
from sdconv import nn
from sdconv import tensor as T
from sdconv import zoo
from sdconv.analysis import measure_sparsity
from sdconv.config import TrainConfig
from sdconv.errors import ConfigError, ContractError, TrainingDiverged
from sdconv.sdconv import SDConv2d, anneal_attention_temperature
from sdconv.sparsity import SGD, SparsitySchedule, cosine_warmup_lr, total_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "train_loss", "task_loss", "sparsity_loss", "eval_acc",
                  "global_density", "lr"]
LAYER_HEADER = ["epoch", "layer", "params", "nonzero", "layer_sparsity", "kernel_sparsity", "threshold"]
CHECKPOINT_NAME = "checkpoint.sdcv"

# Fixed ids keep each stream stable no matter which others are drawn from.
_STREAM_IDS = {"init": 0, "shuffle": 1, "augment": 2, "noise": 3}


def stream(seed, name, *extra):
    """Independent generator for a named purpose (init, shuffle, augment, noise)."""
    return np.random.default_rng([int(seed), _STREAM_IDS[name], *extra])


def build_arch(cfg: TrainConfig):
    in_ch, res = (1, 28) if cfg.dataset == "mnist" else (3, 32)
    if cfg.model == "toy":
        return zoo.toy_cnn(in_channels=in_ch, widths=cfg.width_tuple, k=cfg.k, reduce_ratio=cfg.reduce_ratio,
                           mode=cfg.mode, sharpness=cfg.sharpness, resolution=res)
    arch = zoo.get_arch(cfg.model, dynamic=True, k=cfg.k, reduce_ratio=cfg.reduce_ratio, num_classes=10,
                        in_channels=in_ch, mode=cfg.mode, resolution=res)
    return zoo.Arch(arch.name, arch.root, arch.in_channels, arch.k, arch.reduce_ratio, arch.mode,
                    cfg.sharpness, arch.resolution, arch.meta)


def build_network(cfg: TrainConfig):
    return zoo.build_model(build_arch(cfg), stream(cfg.seed, "init"))


def decayed_weights(model):
    """Convolution, linear and expert weights; biases, BN affine terms and thresholds are exempt."""
    out = []
    for m in model.modules():
        if isinstance(m, SDConv2d):
            out.append(m.experts)
        elif isinstance(m, (nn.Conv2d, nn.Linear)):
            out.append(m.weight)
    return out


def evaluate(model, dataset, batch_size=500):
    """Top-1 accuracy of ``model`` in inference mode over ``dataset``."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        with T.no_grad():
            for x, y in dataset.batches(batch_size):
                logits = model(T.Tensor(x))
                correct += int((logits.data.argmax(axis=1) == y).sum())
    finally:
        model.train(was_training)
    return correct / len(dataset)


def set_attention_temperature(model, value):
    for m in model.modules():
        if isinstance(m, SDConv2d):
            m.attn_temperature = value


def layer_stats(model):
    """Per-parameter diagnostics used when a run diverges."""
    lines = []
    for name, p in model.named_parameters():
        d = p.data
        finite = np.isfinite(d)
        line = (f"{name}: shape={d.shape} nonfinite={int((~finite).sum())} "
                f"absmax={float(np.abs(d[finite]).max()) if finite.any() else float('nan'):.4g}")
        if p.grad is not None:
            g = np.abs(p.grad)
            line += f" grad_absmax={float(g[np.isfinite(g)].max()) if np.isfinite(g).any() else float('nan'):.4g}"
        lines.append(line)
    return "\n".join(lines)


@dataclass
class TrainResult:
    model: zoo.Network
    config: TrainConfig
    metrics: list = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_accuracy(self):
        return self.metrics[-1]["eval_acc"] if self.metrics else float("nan")

    @property
    def final_density(self):
        return self.metrics[-1]["global_density"] if self.metrics else float("nan")


def model_tensors(model, optimizer=None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for name, layer in model.sd_layers():
        if layer.fixed_masks is not None:
            tensors[f"mask.{name}"] = layer.fixed_masks
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in optimizer.state().items()})
    return tensors


def restore_model(model, ckpt):
    model.load_state_dict(ckpt.with_prefix("model"))
    masks = ckpt.with_prefix("mask")
    for name, layer in model.sd_layers():
        if name in masks:
            layer.fixed_masks = masks[name].astype(layer.experts.dtype)
    return model


def load_model(path):
    """Rebuild a network from a checkpoint written by ``train`` or the pruning tool."""
    from sdconv.config import parse_config

    ckpt = ckpt_io.load(path)
    cfg = parse_config(overrides=ckpt.config)
    model = restore_model(build_network(cfg), ckpt)
    return model, cfg, ckpt


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _load_split(cfg, split):
    ds = data_mod.load_dataset(cfg.dataset, cfg.data_dir or None, split)
    return ds.subset(cfg.train_limit if split == "train" else cfg.eval_limit)


def train(cfg: TrainConfig, out_dir=None, train_set=None, test_set=None, resume=False):
    """Run the sparse dynamic training loop and return the trained model and its metric log.

    Each step: forward with hard masks, loss = cross-entropy + lambda_s * budget
    penalty (on soft masks) + lambda_r * weight decay, momentum SGD on weights,
    plain gradient steps on thresholds, then the density target advances at
    phase boundaries.
    """
    cfg.validate()
    train_set = train_set if train_set is not None else _load_split(cfg, "train")
    test_set = test_set if test_set is not None else _load_split(cfg, "test")
    if len(train_set) == 0:
        raise ConfigError("train_limit: training set is empty")

    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    anneal = max(1, int(round(cfg.attn_anneal_epochs * steps_per_epoch)))

    model = build_network(cfg)
    schedule = SparsitySchedule(cfg.sparsity, cfg.pruning_iterations, total_steps)
    optimizer = SGD(model.named_parameters(), cfg.momentum, cfg.threshold_lr_scale)
    weights = decayed_weights(model)
    layers = model.sd_layers()

    out_dir = Path(out_dir) if out_dir else None
    metrics = []
    start_epoch, step = 0, 0
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        ck_path = out_dir / CHECKPOINT_NAME
        if resume and ck_path.exists():
            ckpt = ckpt_io.load(ck_path)
            restore_model(model, ckpt)
            optimizer.load_state(ckpt.with_prefix("optim"))
            schedule.load_state(ckpt.schedule)
            step = ckpt.step
            start_epoch = int(ckpt.meta.get("epoch", step // steps_per_epoch))
            metrics = _read_metrics(out_dir / "metrics.csv")[:start_epoch]
            _write_csv(out_dir / "metrics.csv", METRICS_HEADER,
                       [[_fmt(r[k]) for k in METRICS_HEADER] for r in metrics])
        else:
            _write_csv(out_dir / "metrics.csv", METRICS_HEADER, [])
            _write_csv(out_dir / "layers.csv", LAYER_HEADER, [])
            (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    augment_needed = cfg.dataset == "cifar10"
    lr = 0.0
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        augment = data_mod.flip_crop(stream(cfg.seed, "augment", epoch)) if augment_needed else None
        sums = np.zeros(3)
        seen = 0
        for x, y in train_set.batches(cfg.batch_size, stream(cfg.seed, "shuffle", epoch), augment):
            lr = cosine_warmup_lr(step, cfg.max_lr, warmup, total_steps)
            set_attention_temperature(
                model, anneal_attention_temperature(step, cfg.attn_tau_start, cfg.attn_tau_end, anneal))
            logits = model(T.Tensor(x))
            masks = [layer.last_masks.soft for _, layer in layers
                     if layer.last_masks is not None and layer.fixed_masks is None]
            loss = total_loss(logits, y, masks, weights, schedule.current, cfg.lambda_s, cfg.lambda_r)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss at step {step + 1} (epoch {epoch + 1})\n"
                                       + layer_stats(model))
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step(lr)
            step += 1
            schedule.step(step)
            sums += len(y) * np.array([loss.value, loss.task, loss.sparsity])
            seen += len(y)

        report = measure_sparsity(model)
        acc = evaluate(model, test_set) if len(test_set) else float("nan")
        row = dict(zip(METRICS_HEADER, [epoch + 1, step, *(sums / seen), acc, report.global_density, lr]))
        row = {k: (float(v) if k not in ("epoch", "step") else int(v)) for k, v in row.items()}
        metrics.append(row)
        log.info("epoch %d step %d loss %.4f acc %.4f density %.4f", epoch + 1, step, row["train_loss"],
                 acc, report.global_density)
        if out_dir:
            _append_csv(out_dir / "metrics.csv", [_fmt(row[k]) for k in METRICS_HEADER])
            thresholds = {name: float(layer.threshold.data) for name, layer in layers}
            for l in report.layers:
                _append_csv(out_dir / "layers.csv",
                            [epoch + 1, l.name, l.params, l.nonzero, _fmt(l.layer_sparsity),
                             _fmt(l.kernel_sparsity), _fmt(thresholds[l.name])])
            ckpt_io.save(out_dir / CHECKPOINT_NAME, ckpt_io.Checkpoint(
                model_tensors(model, optimizer), step, schedule.state(), cfg.as_dict(),
                {"epoch": epoch + 1, "eval_acc": repr(acc)}))

    return TrainResult(model, cfg, metrics, out_dir / CHECKPOINT_NAME if out_dir else None)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _append_csv(path, row):
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(row)


def _read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()} for r in rows]
