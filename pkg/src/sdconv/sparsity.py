"""Sparsity budget: L0 penalty, composite loss, pruning schedule, optimizers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sdconv import tensor as T
from sdconv.errors import ConfigError


def l0_penalty(masks, target_density):
    """ReLU of the global mask density in excess of ``target_density``.

    ``masks`` is a sequence of per-layer mask tensors (soft masks keep the
    result differentiable); the layer sizes are the mask sizes.
    """
    masks = [T.as_tensor(m) for m in masks]
    if not masks:
        return T.Tensor(0.0)
    total = sum(m.size for m in masks)
    kept = masks[0].sum()
    for m in masks[1:]:
        kept = kept + m.sum()
    return T.relu((kept - float(target_density) * total) * (1.0 / total))


def weight_decay_term(weights):
    """Half the squared L2 norm, so the gradient is the weights themselves."""
    weights = list(weights)
    if not weights:
        return T.Tensor(0.0)
    term = (weights[0] * weights[0]).sum()
    for w in weights[1:]:
        term = term + (w * w).sum()
    return term * 0.5


@dataclass
class LossBreakdown:
    total: T.Tensor
    task: float
    sparsity: float
    weight_decay: float
    lambda_s: float
    lambda_r: float

    @property
    def value(self):
        return float(self.total.item())


def total_loss(logits, labels, masks, weights, target_density, lambda_s=0.01, lambda_r=4e-5):
    """Task cross-entropy + lambda_s * L0 budget penalty + lambda_r * weight decay."""
    task = T.cross_entropy(logits, labels)
    total = task
    sparsity = l0_penalty(masks, target_density) if masks else T.Tensor(0.0, dtype=task.dtype)
    if lambda_s:
        total = total + sparsity * lambda_s
    decay = weight_decay_term(weights)
    if lambda_r:
        total = total + decay * lambda_r
    return LossBreakdown(total, float(task.item()), float(sparsity.item()), float(decay.item()),
                         lambda_s, lambda_r)


class SparsitySchedule:
    """Piecewise-constant density target over ``pruning_iterations + 1`` phases.

    The target starts at 1 (dense). At each phase boundary ``t`` (a multiple of
    the phase length) it becomes ``final_density ** min(t / (phase * n), 1)``.
    """

    def __init__(self, target_sparsity, pruning_iterations, total_steps):
        if not 0 <= target_sparsity < 1:
            raise ConfigError(f"target sparsity must lie in [0, 1), got {target_sparsity}")
        if pruning_iterations < 1:
            raise ConfigError("pruning_iterations must be >= 1")
        if total_steps < pruning_iterations + 1:
            raise ConfigError("total_steps must cover at least one step per phase")
        self.target_sparsity = float(target_sparsity)
        self.final_density = 1.0 - self.target_sparsity
        self.pruning_iterations = int(pruning_iterations)
        self.total_steps = int(total_steps)
        self.phase_length = self.total_steps // (self.pruning_iterations + 1)
        self.current = 1.0

    def value_after(self, t):
        """Target density in effect after a boundary at step ``t``."""
        exponent = min(t / (self.phase_length * self.pruning_iterations), 1.0)
        return self.final_density ** exponent

    def step(self, t):
        """Advance past step ``t`` (1-based) and return the target for step t+1."""
        if t % self.phase_length == 0:
            self.current = self.value_after(t)
        return self.current

    def target_at(self, t):
        """Target density used by the loss at step ``t`` (pure function)."""
        boundary = (t - 1) // self.phase_length * self.phase_length
        return 1.0 if boundary <= 0 else self.value_after(boundary)

    def boundaries(self):
        return [self.phase_length * i for i in range(1, self.pruning_iterations + 2)]

    def state(self):
        return {"current": self.current}

    def load_state(self, state):
        self.current = float(state["current"])


def cosine_warmup_lr(step, max_lr, warmup_steps, total_steps):
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be smaller than total_steps")
    if step < warmup_steps:
        return max_lr * step / warmup_steps
    progress = min((step - warmup_steps) / (total_steps - warmup_steps), 1.0)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_update(params, grads, lr, momentum=0.0, velocities=None):
    """Classic momentum SGD in place: v <- mu v + g ; p <- p - lr v."""
    if velocities is None:
        velocities = [None] * len(params)
    out = []
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            out.append(v)
            continue
        v = g.copy() if v is None or momentum == 0 else momentum * v + g
        p.data = (p.data - lr * v).astype(p.dtype)
        out.append(v)
    return out


def threshold_update(threshold, grad, lr):
    if grad is not None:
        threshold.data = (threshold.data - lr * grad).astype(threshold.dtype)


class SGD:
    """Momentum SGD over named parameters; thresholds take plain steps at their own rate."""

    def __init__(self, named_params, momentum=0.9, threshold_lr_scale=0.1):
        self.params = []
        self.thresholds = []
        for name, p in named_params:
            (self.thresholds if name.endswith("threshold") else self.params).append((name, p))
        self.momentum = momentum
        self.threshold_lr_scale = threshold_lr_scale
        self.velocity = {}

    def step(self, lr):
        names = [n for n, _ in self.params]
        ps = [p for _, p in self.params]
        vs = sgd_update(ps, [p.grad for p in ps], lr, self.momentum,
                        [self.velocity.get(n) for n in names])
        for n, v in zip(names, vs):
            if v is not None:
                self.velocity[n] = v
        for _, tau in self.thresholds:
            threshold_update(tau, tau.grad, lr * self.threshold_lr_scale)

    def zero_grad(self):
        for _, p in self.params + self.thresholds:
            p.grad = None

    def state(self):
        return {f"velocity.{n}": np.asarray(v) for n, v in self.velocity.items()}

    def load_state(self, state):
        self.velocity = {k[len("velocity."):]: np.array(v) for k, v in state.items()
                         if k.startswith("velocity.")}
