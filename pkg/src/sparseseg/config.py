"""Model/training configuration: defaults, JSON loading, dotted overrides, validation."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "SPARSESEG_SEED"

# Reference optimisation settings for full-scale training on real CT/MRI data.
REFERENCE_LR = 1.3e-4
REFERENCE_LAYER_DECAY = 0.75
REFERENCE_BATCH_SIZE = 2
# Intensity window used for abdominal CT before rescaling to [-1, 1] (not applied to synthetic data).
CT_CLIP_RANGE = (-958.0, 326.0)


def kept_count(n, r):
    """Number of tokens kept out of ``n`` at pruning ratio ``r``: nearest integer, halves round up."""
    # rounding to 9 decimals first absorbs representation error such as (1 - 0.9) * 5 = 0.4999...
    return int(math.floor(round((1.0 - r) * n, 9) + 0.5))


def token_chain(n, r, num_stp):
    """Non-CLS token counts entering the encoder and leaving each pruning module."""
    chain = [n]
    for _ in range(num_stp):
        chain.append(kept_count(chain[-1], r))
    return chain


@dataclass
class EncoderConfig:
    depth: int = 12
    dim: int = 64
    heads: int = 4
    patch: int = 8
    extents: tuple = (32, 32, 32)
    in_channels: int = 1
    mlp_ratio: int = 4
    stp_after: tuple = (3, 6, 9)
    r: float = 0.5
    tau: float = 1.0
    eps: float = 1e-6
    perturb: bool = True

    @property
    def grid(self):
        return tuple(e // self.patch for e in self.extents)

    @property
    def num_tokens(self):
        return math.prod(self.grid)


@dataclass
class MtaConfig:
    depth: int = 1


@dataclass
class DecoderConfig:
    # one entry per resolution stage, coarsest (token grid) first; None derives from the patch size
    channels: tuple | None = None
    num_classes: int = 3


@dataclass
class TrainConfig:
    # 300 steps over 60 distinct volumes; fewer volumes overfit within that budget
    epochs: int = 10
    batch_size: int = 2
    num_train: int = 60
    num_val: int = 12
    lr: float = 3e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    layer_decay: float = REFERENCE_LAYER_DECAY
    warmup_epochs: int = 0

    @property
    def steps_per_epoch(self):
        return math.ceil(self.num_train / self.batch_size)


@dataclass
class InferConfig:
    overlap: float = 0.5


@dataclass
class BenchConfig:
    extents: tuple = (96, 96, 96)
    warmup: int = 1
    iters: int = 5
    ratios: tuple = (0.0, 0.5, 0.9)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mta: MtaConfig = field(default_factory=MtaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    precision: str = "f32"

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == "f64" else np.float32

    @property
    def decoder_channels(self):
        if self.decoder.channels is not None:
            return tuple(self.decoder.channels)
        stages = int(math.log2(self.encoder.patch))
        return tuple(max(8, 32 >> i) for i in range(stages + 1))

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **sections):
        """Copy with per-section field updates, e.g. ``replace(encoder={"r": 0.9})``."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
        return from_dict(data)


_SECTIONS = {
    "encoder": EncoderConfig,
    "mta": MtaConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "bench": BenchConfig,
}


def _coerce(cls, key, value, default):
    if isinstance(default, tuple) or key == "channels":
        if value is None and key == "channels":
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{cls.__name__.replace('Config', '').lower()}.{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return value


def _build_section(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        try:
            kwargs[key] = _coerce(cls, key, value, getattr(defaults, key))
        except ConfigError as exc:
            raise ConfigError(f"invalid value for '{name}.{key}': {exc}") from None
    return cls(**kwargs)


def from_dict(raw):
    """Build and validate a :class:`ModelConfig` from a plain mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key == "seed":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"invalid value for 'seed': {value!r}")
            kwargs[key] = value
        elif key == "precision":
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key '{key}'")
    cfg = ModelConfig(**kwargs)
    validate(cfg)
    return cfg


def set_dotted(raw, assignment):
    """Apply one ``a.b=value`` override to a nested mapping; value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' must look like key=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}' descends into a non-object")
    node[parts[-1]] = value
    return raw


def parse_config(path=None, overrides=(), env=None):
    """Load a JSON config file (or defaults when ``path`` is None), apply overrides and validate.

    The ``SPARSESEG_SEED`` environment variable, when set, replaces the seed.
    """
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    for item in overrides:
        set_dotted(raw, item)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return from_dict(raw)


def validate(cfg):
    enc = cfg.encoder
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError(f"invalid value for 'precision': {cfg.precision!r} (f32 or f64)")
    if enc.patch < 1 or enc.patch & (enc.patch - 1):
        raise ConfigError(f"invalid value for 'encoder.patch': {enc.patch} must be a power of two")
    if len(enc.extents) != 3 or any(e < 1 or e % enc.patch for e in enc.extents):
        raise ConfigError(f"invalid value for 'encoder.extents': {enc.extents} must be 3 extents divisible by patch {enc.patch}")
    if enc.depth < 1:
        raise ConfigError("invalid value for 'encoder.depth': must be >= 1")
    if enc.dim < 2 or enc.dim % 2:
        raise ConfigError(f"invalid value for 'encoder.dim': {enc.dim} must be even")
    if enc.heads < 1 or enc.dim % enc.heads:
        raise ConfigError(f"invalid value for 'encoder.heads': dim {enc.dim} not divisible by {enc.heads}")
    if enc.in_channels < 1 or enc.mlp_ratio < 1:
        raise ConfigError("invalid value for 'encoder.in_channels'/'encoder.mlp_ratio': must be >= 1")
    stp = list(enc.stp_after)
    if any(not isinstance(i, int) for i in stp) or stp != sorted(set(stp)) or any(i < 1 or i > enc.depth - 1 for i in stp):
        raise ConfigError(f"invalid value for 'encoder.stp_after': {enc.stp_after} must be strictly increasing within [1, {enc.depth - 1}]")
    if not 0.0 <= enc.r < 1.0:
        raise ConfigError(f"invalid value for 'encoder.r': {enc.r} not in [0, 1)")
    if not enc.tau > 0:
        raise ConfigError(f"invalid value for 'encoder.tau': {enc.tau} must be > 0")
    if not 0 < enc.eps < 1:
        raise ConfigError(f"invalid value for 'encoder.eps': {enc.eps} must be in (0, 1)")
    chain = token_chain(enc.num_tokens, enc.r, len(stp))
    if min(chain) < 1:
        raise ConfigError(f"invalid value for 'encoder.r': token chain {chain} drops below one kept token")
    if cfg.mta.depth < 0:
        raise ConfigError("invalid value for 'mta.depth': must be >= 0")
    stages = int(math.log2(enc.patch))
    if len(cfg.decoder_channels) != stages + 1 or any(c < 1 for c in cfg.decoder_channels):
        raise ConfigError(f"invalid value for 'decoder.channels': need {stages + 1} positive entries for patch {enc.patch}")
    if cfg.decoder.num_classes < 1:
        raise ConfigError("invalid value for 'decoder.num_classes': must be >= 1")
    tr = cfg.train
    if not tr.lr > 0:
        raise ConfigError(f"invalid value for 'train.lr': {tr.lr} must be > 0")
    if not 0 < tr.layer_decay <= 1:
        raise ConfigError(f"invalid value for 'train.layer_decay': {tr.layer_decay} not in (0, 1]")
    if tr.optimizer not in ("adamw", "sgd"):
        raise ConfigError(f"invalid value for 'train.optimizer': {tr.optimizer!r} (adamw or sgd)")
    if tr.batch_size < 1 or tr.num_train < 1 or tr.num_val < 0 or tr.epochs < 0:
        raise ConfigError("invalid train sizes: batch_size/num_train >= 1, epochs/num_val >= 0")
    if not 0 <= tr.warmup_epochs <= max(tr.epochs, 0):
        raise ConfigError("invalid value for 'train.warmup_epochs': must be within [0, epochs]")
    if len(tr.betas) != 2 or not all(0 <= b < 1 for b in tr.betas) or tr.weight_decay < 0:
        raise ConfigError("invalid value for 'train.betas'/'train.weight_decay'")
    if not 0 <= cfg.infer.overlap < 1:
        raise ConfigError(f"invalid value for 'infer.overlap': {cfg.infer.overlap} not in [0, 1)")
    b = cfg.bench
    if len(b.extents) != 3 or any(e < 1 or e % enc.patch for e in b.extents):
        raise ConfigError(f"invalid value for 'bench.extents': {b.extents} must be divisible by patch {enc.patch}")
    if b.warmup < 1 or b.iters < 1:
        raise ConfigError("invalid value for 'bench.warmup'/'bench.iters': must be >= 1")
    if any(not 0 <= r < 1 for r in b.ratios):
        raise ConfigError(f"invalid value for 'bench.ratios': {b.ratios}")
