"""Architecture and training configuration, with validation and fingerprints."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError


def _pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ArchConfig:
    """Network sizes. Desk-scale defaults; ``ArchConfig.paper()`` gives the
    published 64 -> 256 setting."""

    n_g: int = 16
    n_z: int = 16
    n_d: int = 16
    m_d: int = 4
    m_g: int = 4
    w0: int = 16
    h0: int = 16
    w: int = 32
    h: int = 32
    base_channels: int = 8
    embed_dim: int = 32
    relu_after_residual: bool = False

    @classmethod
    def paper(cls):
        return cls(n_g=128, n_z=100, n_d=128, m_d=4, m_g=16, w0=64, h0=64, w=256, h=256,
                   base_channels=16, embed_dim=1024)

    @property
    def upscale(self):
        return self.w // self.w0

    @property
    def residual_blocks(self):
        return {2: 2, 4: 4}[self.upscale]

    def validate(self):
        for name in ("w0", "h0", "w", "h", "m_d", "m_g"):
            if not _pow2(getattr(self, name)):
                raise ConfigError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.w0 != self.h0 or self.w != self.h:
            raise ConfigError("only square images are supported")
        if self.w % self.w0 or self.w // self.w0 not in (2, 4):
            raise ConfigError("W / W0 must be 2 or 4")
        if self.m_d > self.w0 or self.m_g > self.w0:
            raise ConfigError("joint spatial sizes must not exceed the Stage-I resolution")
        if self.w0 < 4:
            raise ConfigError("Stage-I resolution must be at least 4")
        for name in ("n_g", "n_z", "n_d", "base_channels", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self


@dataclass
class TrainConfig:
    stage1_epochs: int = 200
    stage2_epochs: int = 200
    batch_size: int = 32
    initial_lr: float = 2e-4
    lr_halving_period: int = 100
    lambda_kl: float = 1.0
    seed: int = 0
    use_ca: bool = True
    text_twice: bool = True
    single_stage_resolution: Optional[int] = None
    non_saturating: bool = False
    checkpoint_every: int = 50
    dtype: str = "float32"

    def validate(self):
        for name in ("stage1_epochs", "stage2_epochs", "batch_size", "lr_halving_period", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (mismatched pairs need another sample)")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.lambda_kl < 0:
            raise ConfigError("lambda_kl must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.single_stage_resolution is not None and not _pow2(self.single_stage_resolution):
            raise ConfigError("single_stage_resolution must be a power of two")
        return self


# Fields that set the training horizon or I/O cadence, not the trajectory.
_HORIZON_FIELDS = {"stage1_epochs", "stage2_epochs", "checkpoint_every"}


def _digest(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:32]


def fingerprint(arch, train, stage):
    """Hash of everything that shapes the given stage's parameters.

    Stage 1 ignores ``text_twice`` (it only changes Stage-II), so several
    Stage-II ablations can share one Stage-I checkpoint.
    """
    t = {k: v for k, v in dataclasses.asdict(train).items() if k not in _HORIZON_FIELDS}
    if stage == 1:
        t.pop("text_twice")
    return _digest({"arch": dataclasses.asdict(arch), "train": t, "stage": stage})


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Optional[str] = None
    out: Optional[str] = None
    n_classes: int = 8
    per_class: int = 64
    train_fraction: float = 0.75
    samples: int = 2048
    n_splits: int = 4

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        arch = ArchConfig(**d.pop("arch", {}))
        train = TrainConfig(**d.pop("train", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(arch=arch, train=train, **d)

    def validate(self):
        self.arch.validate()
        self.train.validate()
        if self.n_classes < 2 or self.per_class < 2:
            raise ConfigError("need at least 2 classes and 2 images per class")
        if self.samples < 1 or self.n_splits < 1:
            raise ConfigError("samples and n_splits must be positive")
        return self
