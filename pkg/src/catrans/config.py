"""Flat ``key = value`` run configuration with typed validation."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


VARIANTS = ("full", "rct_only", "rat_only", "rct_nosupport", "baseline")


@dataclass
class ModelConfig:
    # architecture
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 64)
    mask_channels: tuple[int, ...] = (8, 16, 32, 32)
    decoder_channels: tuple[int, ...] = (32, 32, 16, 16)
    levels: tuple[int, ...] = (3, 4)
    heads: int = 1
    variant: str = "full"
    share_qk: bool = False
    init: str = "identity"
    ln_eps_mask: float = 10.0
    ln_eps_affinity: float = 1000.0
    precision: str = "f32"
    # episodes
    fold: int = 0
    shots: int = 1
    flip: bool = True
    # schedule
    steps: int = 2000
    decay_step: int = 1000
    base_lr: float = 5e-5
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    w_bg: float = 1.0
    w_fg: float = 4.0
    eval_every: int = 200
    val_episodes: int = 50
    test_episodes: int = 500
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    seed: int = 0
    # synthetic benchmark calibration
    data_size_min: float = 7.0
    data_size_max: float = 13.0
    data_distractors_min: int = 1
    data_distractors_max: int = 3
    data_hue_jitter: float = 6.0
    data_texture_amp: float = 0.15
    data_noise: float = 0.03
    data_bg_smooth_amp: float = 0.12

    def validate(self) -> "ModelConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.image_size >= 16 and self.image_size % 16 == 0, "image_size must be a positive multiple of 16")
        for name in ("channels", "mask_channels", "decoder_channels"):
            v = getattr(self, name)
            need(len(v) == 4 and all(c >= 1 for c in v), f"{name} needs 4 positive widths")
        need(len(self.levels) >= 1 and set(self.levels) <= {3, 4} and len(set(self.levels)) == len(self.levels),
             "levels must be a non-empty subset of {3, 4}")
        need(self.heads >= 1, "heads must be >= 1")
        for l in self.levels:
            n = (self.image_size // 2 ** l) ** 2
            need(self.mask_channels[l - 1] % self.heads == 0 and n % self.heads == 0
                 and self.channels[l - 1] % self.heads == 0,
                 f"level {l} widths not divisible by {self.heads} heads")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}")
        need(self.init in ("random", "identity"), "init must be random or identity")
        need(self.ln_eps_mask > 0 and self.ln_eps_affinity > 0, "norm epsilons must be positive")
        need(self.precision in ("f32", "f64"), "precision must be f32 or f64")
        need(0 <= self.fold < 4, "fold must be in 0..3")
        need(self.shots >= 1, "shots must be >= 1")
        need(self.steps >= 0 and self.decay_step >= 0, "steps and decay_step must be >= 0")
        need(self.base_lr >= 0 and self.weight_decay >= 0, "learning rate and weight decay must be >= 0")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0, "bad AdamW constants")
        need(self.w_bg > 0 and self.w_fg > 0, "class weights must be positive")
        need(self.eval_every >= 1, "eval_every must be >= 1")
        need(self.val_episodes >= 1 and self.test_episodes >= 1, "episode counts must be >= 1")
        need(len(self.eval_seeds) >= 1 and len(self.ablation_seeds) >= 1, "seed lists must be non-empty")
        need(0 < self.data_size_min <= self.data_size_max, "bad shape size range")
        need(0 <= self.data_distractors_min <= self.data_distractors_max, "bad distractor range")
        return self

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse(value, types[key], lineno)
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "ModelConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        cfg = cls.from_text(text)
        return apply_env(cfg)


def apply_env(cfg: ModelConfig) -> ModelConfig:
    """CATRANS_PRECISION overrides the configured precision."""
    env = os.environ.get("CATRANS_PRECISION")
    if env:
        if env not in ("f32", "f64"):
            raise ConfigError(f"CATRANS_PRECISION must be f32 or f64, got {env!r}")
        cfg = cfg.replace(precision=env)
    return cfg


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, f: dataclasses.Field, lineno: int):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if t == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        if t == "str":
            return value
        if t.startswith("tuple"):
            return tuple(int(x) for x in value.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"line {lineno}: {f.name} expects {t}, got {value!r}") from None
    raise ConfigError(f"line {lineno}: unsupported type {t}")


def tiny_config(**kw) -> ModelConfig:
    """16 x 16 images and minimum channel widths; used by gradient checks."""
    base = dict(image_size=16, channels=(2, 2, 2, 2), mask_channels=(2, 2, 2, 2),
                decoder_channels=(2, 2, 2, 2), precision="f64", steps=10, decay_step=5,
                eval_every=5, val_episodes=2, test_episodes=4, eval_seeds=(0,))
    base.update(kw)
    return ModelConfig(**base).validate()
