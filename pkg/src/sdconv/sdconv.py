"""Sparse dynamic convolution layer.

A layer holds ``k`` expert kernels. An attention branch turns each input
sample into mixing weights ``pi`` (rows sum to one); the experts are pruned
by binary masks derived from a single learnable per-layer threshold and then
mixed into one kernel per sample.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from sdconv import kernels
from sdconv import tensor as T
from sdconv.errors import ConfigError, ContractError, DimensionError
from sdconv.nn import Linear, Module, kaiming_normal
from sdconv.tensor import Parameter, Tensor


class MaskMode(str, enum.Enum):
    DYNAMIC = "dynamic-dense"
    DIFFERENT = "sparse-different-masks"
    SAME = "sparse-same-mask"
    STATIC = "static"

    @property
    def sparse(self):
        return self in (MaskMode.DIFFERENT, MaskMode.SAME)


@dataclass
class MaskState:
    """Soft and binary masks, both shaped like the stacked experts [k, ...]."""

    soft: Tensor
    hard: Tensor

    @property
    def density(self):
        return float(self.hard.data.mean())


@dataclass
class AggregatedKernel:
    weight: np.ndarray
    bias: np.ndarray | None

    @property
    def nonzero(self):
        return np.flatnonzero(self.weight)


def compute_mask(weight, threshold, sharpness, same_mask=False):
    """Masks for stacked expert kernels ``weight`` [k, ...].

    The score is ``|W|`` (the mean magnitude over experts when ``same_mask``).
    ``soft = sigmoid((2 * sigmoid(score - threshold) - 1) / sharpness)`` is the
    two-way softmax of the gate and its complement; ``hard`` rounds it with
    ties kept, and its gradient is passed straight through to ``soft``.
    """
    if sharpness <= 0:
        raise ContractError(f"sharpness must be positive, got {sharpness}")
    weight = T.as_tensor(weight)
    threshold = T.as_tensor(threshold, dtype=weight.dtype)
    scores = T.tabs(weight)
    if same_mask:
        scores = T.mean(scores, axis=0, keepdims=True)
    gate = T.sigmoid(scores - threshold)
    soft = T.sigmoid((gate * 2.0 - 1.0) * (1.0 / sharpness))
    if same_mask and weight.shape[0] > 1:
        soft = soft * np.ones(weight.shape[:1] + (1,) * (weight.ndim - 1), dtype=weight.dtype)
    return soft, T.round_ste(soft)


def aggregate(pi_row, experts, expert_bias=None, masks=None):
    """Mix (masked) expert kernels with attention weights for one sample.

    ``experts`` is [k, ...]; ``masks`` is an optional 0/1 array of the same
    shape. Biases are mixed but never masked.
    """
    pi = np.asarray(T.as_tensor(pi_row).data, dtype=np.float64)
    w = np.asarray(T.as_tensor(experts).data)
    if masks is not None:
        w = w * np.asarray(T.as_tensor(masks).data)
    k = w.shape[0]
    weight = (pi @ w.reshape(k, -1)).reshape(w.shape[1:]).astype(w.dtype)
    bias = None
    if expert_bias is not None:
        bias = (pi @ np.asarray(T.as_tensor(expert_bias).data)).astype(w.dtype)
    return AggregatedKernel(weight, bias)


def anneal_attention_temperature(step, start=30.0, end=1.0, anneal_steps=1):
    if anneal_steps < 1:
        raise ConfigError("anneal_steps must be >= 1")
    if step >= anneal_steps:
        return float(end)
    return float(start + (end - start) * step / anneal_steps)


class AttentionBranch(Module):
    """pool -> reduce -> ReLU -> expand -> softmax(logits / temperature)."""

    def __init__(self, in_channels, k, reduce_ratio=16, rng=None):
        if reduce_ratio < 1 or in_channels % reduce_ratio:
            raise ConfigError(
                f"in_channels={in_channels} is not divisible by reduce_ratio={reduce_ratio}")
        rng = rng or np.random.default_rng(0)
        self.hidden = in_channels // reduce_ratio
        self.reduce = Linear(in_channels, self.hidden, rng=rng)
        self.expand = Linear(self.hidden, k, rng=rng)

    def forward(self, x, temperature=1.0):
        if not temperature > 0:
            raise ContractError(f"attention temperature must be positive, got {temperature}")
        h = T.relu(self.reduce(T.global_avg_pool(x)))
        return T.softmax(self.expand(h) * (1.0 / temperature), axis=1)


class SDConv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, groups=1,
                 k=4, reduce_ratio=16, sharpness=1 / 1024, mode=MaskMode.DIFFERENT, bias=True,
                 rng=None):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        rng = rng or np.random.default_rng(0)
        self.spec = T.ConvSpec(in_channels, out_channels, kernel_size, kernel_size, stride, padding, groups)
        self.k = k
        self.sharpness = float(sharpness)
        self.mode = MaskMode(mode)
        cg = in_channels // groups
        fan_in = cg * kernel_size * kernel_size
        self.experts = Parameter(kaiming_normal(rng, (k, out_channels, cg, kernel_size, kernel_size), fan_in))
        self.expert_bias = Parameter(np.zeros((k, out_channels), np.float32)) if bias else None
        self.threshold = Parameter(np.zeros((), np.float32))
        self.attention = AttentionBranch(in_channels, k, reduce_ratio, rng) if k > 1 else None
        self.attn_temperature = 1.0
        self.fixed_masks = None
        self.executor = "dense"
        self.last_masks = None
        self.last_macs = None
        self._last_out_hw = None
        self.capture_kernels = False
        self.last_kernels = None

    @property
    def kernel_shape(self):
        return self.experts.shape[1:]

    def masks(self):
        """Current MaskState, or None when no masking applies."""
        if self.fixed_masks is not None:
            m = Tensor(self.fixed_masks, dtype=self.experts.dtype)
            return MaskState(m, m)
        if not self.mode.sparse:
            return None
        soft, hard = compute_mask(self.experts, self.threshold, self.sharpness,
                                  same_mask=self.mode is MaskMode.SAME)
        return MaskState(soft, hard)

    def hard_masks(self):
        with T.no_grad():
            state = self.masks()
        if state is None:
            return np.ones(self.experts.shape, dtype=bool)
        return state.hard.data.astype(bool)

    def attention_weights(self, x):
        if self.attention is None:
            return Tensor(np.ones((x.shape[0], 1), dtype=x.dtype))
        return self.attention(x, self.attn_temperature)

    def forward(self, x):
        x = T.as_tensor(x)
        s = self.spec
        if x.ndim != 4:
            raise DimensionError(f"SDConv2d expects [N, C, H, W], got shape {x.shape}")
        if self.mode is MaskMode.STATIC:
            bias = self.expert_bias[0] if self.expert_bias is not None else None
            self.last_masks = None
            return T.conv2d(x, self.experts[0], bias, s.stride, s.padding, s.groups)

        n, cin, h, w = x.shape
        if cin != s.in_channels:
            raise DimensionError(f"axis 1 (channels) of input is {cin}, expected {s.in_channels}")
        pi = self.attention_weights(x)
        state = self.masks()
        self.last_masks = state
        kern = self.experts if state is None else self.experts * state.hard
        w_hat = T.matmul(pi, kern.reshape(self.k, -1))
        b_hat = T.matmul(pi, self.expert_bias) if self.expert_bias is not None else None
        if self.capture_kernels:
            self.last_kernels = w_hat.data.copy()

        cout, cg, kh, kw = self.kernel_shape
        if self.executor == "sparse":
            xp = x.data
            if s.padding:
                p = s.padding
                xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
            out, macs = kernels.sparse_conv2d(
                np.ascontiguousarray(xp), w_hat.data.reshape(n, cout, cg, kh, kw),
                None if b_hat is None else b_hat.data, s.stride, s.groups)
            self.last_macs = macs
            self._last_out_hw = out.shape[2:]
            return Tensor(out)

        # one grouped convolution: sample n owns channel block n and its own kernel
        out = T.conv2d(
            x.reshape(1, n * cin, h, w),
            w_hat.reshape(n * cout, cg, kh, kw),
            None if b_hat is None else b_hat.reshape(n * cout),
            s.stride, s.padding, n * s.groups,
        )
        ho, wo = out.shape[2], out.shape[3]
        return out.reshape(n, cout, ho, wo)
