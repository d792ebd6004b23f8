"""Training configuration: defaults, file parsing and validation."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from sdconv.errors import ConfigError
from sdconv.sdconv import MaskMode


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    data_dir: str = ""
    model: str = "toy"
    k: int = 4
    reduce_ratio: int = 16
    sharpness: float = 1 / 1024
    sparsity: float = 0.5
    pruning_iterations: int = 4
    epochs: int = 5
    batch_size: int = 128
    max_lr: float = 0.1
    warmup_epochs: float = 1.0
    lambda_s: float = 0.01
    lambda_r: float = 4e-5
    momentum: float = 0.9
    threshold_lr_scale: float = 0.1
    seed: int = 0
    mask_mode: str = MaskMode.DIFFERENT.value
    attn_tau_start: float = 30.0
    attn_tau_end: float = 1.0
    attn_anneal_epochs: float = 1.0
    train_limit: int = 0
    eval_limit: int = 0
    widths: str = "16,16,32"

    def validate(self):
        positive = ["k", "reduce_ratio", "sharpness", "pruning_iterations", "epochs", "batch_size",
                    "max_lr", "attn_tau_start", "attn_tau_end", "threshold_lr_scale"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ["warmup_epochs", "lambda_s", "lambda_r", "momentum", "seed", "train_limit",
                     "eval_limit", "attn_anneal_epochs"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.sparsity < 1:
            raise ConfigError(f"sparsity: target sparsity must lie in [0, 1), got {self.sparsity}")
        if self.momentum >= 1:
            raise ConfigError(f"momentum: must be < 1, got {self.momentum}")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs: must be smaller than epochs ({self.epochs})")
        try:
            MaskMode(self.mask_mode)
        except ValueError:
            choices = ", ".join(m.value for m in MaskMode)
            raise ConfigError(f"mask_mode: {self.mask_mode!r} is not one of {choices}") from None
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"dataset: unknown dataset {self.dataset!r}")
        try:
            w = self.width_tuple
        except ValueError:
            raise ConfigError(f"widths: expected comma-separated integers, got {self.widths!r}") from None
        if len(w) != 3 or min(w) < 1:
            raise ConfigError(f"widths: expected three positive integers, got {self.widths!r}")
        return self

    @property
    def width_tuple(self):
        return tuple(int(v) for v in str(self.widths).split(","))

    @property
    def mode(self):
        return MaskMode(self.mask_mode)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()

    def to_text(self):
        """``key=value`` lines covering every field, defaults included."""
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n" for f in fields(self))

    def as_dict(self):
        return dataclasses.asdict(self)


def _render(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_ALIASES = {"s": "sparsity", "n": "pruning_iterations", "r": "reduce_ratio", "T": "sharpness",
            "lr": "max_lr", "mode": "mask_mode"}


def _coerce(key, raw):
    kind = type(getattr(TrainConfig(), key))
    if isinstance(raw, bool) or (not isinstance(raw, str) and kind is str):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}")
    try:
        if kind is str:
            return raw
        if kind is int:
            return _int_strict(raw)
        return float(Fraction(raw.strip())) if isinstance(raw, str) else float(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def _int_strict(raw):
    value = Fraction(str(raw).strip())
    if value.denominator != 1:
        raise ValueError
    return int(value)


def _flatten(obj, prefix=""):
    out = {}
    for key, value in obj.items():
        name = f"{prefix}_{key}" if prefix else str(key)
        if isinstance(value, dict):
            out.update(_flatten(value, name))
        else:
            out[name] = value
    return out


def parse_pairs(lines, source="<overrides>"):
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _canonical(key):
    key = key.replace(".", "_").replace("-", "_")
    return _ALIASES.get(key, key)


def parse_config(path=None, overrides=()):
    """Build a validated ``TrainConfig`` from a file plus ``key=value`` overrides.

    The file holds either ``key=value`` lines or a JSON object; nested objects
    are flattened with ``_`` so ``{"attn": {"tau_start": 10}}`` sets
    ``attn_tau_start``. Overrides are applied after the file.
    """
    values = {}
    if path:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
            values.update(_flatten(obj))
        else:
            values.update(parse_pairs(text.splitlines(), str(path)))
    if isinstance(overrides, dict):
        values.update(overrides)
    else:
        values.update(parse_pairs(overrides))

    resolved = {}
    for key, raw in values.items():
        name = _canonical(key)
        if name not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration key")
        resolved[name] = _coerce(name, raw)
    return TrainConfig(**resolved).validate()
