"""Configuration dataclasses and fingerprinting.

Every run is described by a :class:`RunConfig`. Its fingerprint (a sha256 over
the canonical JSON of everything except filesystem paths) is embedded in each
artifact written to disk so reports and checkpoints can be traced back to the
exact settings that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    dim: int = 192
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    text_vocab: int = 0  # 0 means "size of the built-in vocabulary"
    max_text_len: int = 40
    image_size: tuple[int, int] = (16, 16)  # (H, W) of one panel
    rope_axes: tuple[int, ...] = (8, 20, 20)  # per-head dims for (text index, row, col)
    rope_theta: float = 100.0
    time_freqs: int = 16

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "rope_axes", tuple(self.rope_axes))
        if self.text_vocab == 0:
            from .text import VOCAB

            object.__setattr__(self, "text_vocab", len(VOCAB))
        h, w = self.image_size
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if sum(self.rope_axes) != self.head_dim or any(a % 2 for a in self.rope_axes):
            raise ConfigError(f"rope_axes {self.rope_axes} must be even and sum to head dim {self.head_dim}")
        if len(self.rope_axes) != 3:
            raise ConfigError("rope_axes needs exactly three entries (text index, row, col)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> tuple[int, int]:
        """Patch grid of the full diptych (rows, cols)."""
        h, w = self.image_size
        return h // self.patch_size, 2 * w // self.patch_size

    @property
    def num_image_tokens(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def token_pixels(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 8.0
    num_experts: int = 4
    top_k: int = 1
    moe_targets: tuple[str, ...] = ("out",)
    lora_targets: tuple[str, ...] = ("q", "k", "v", "fc1", "fc2")
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "moe_targets", tuple(self.moe_targets))
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, num_experts={self.num_experts}]")
        if set(self.moe_targets) & set(self.lora_targets):
            raise ConfigError("a layer cannot be both a MoE and a plain LoRA target")


# Setting for d=3072-class layers: four rank-32 experts, top-1, alpha = rank.
FULL_SCALE_ADAPTERS = AdapterConfig(rank=32, alpha=32.0, num_experts=4, top_k=1)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    null_prompt_prob: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 20
    guidance: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    total: int = 5000
    heldout: int = 200
    seed: int = 1234
    pretrain_records: int = 20000
    corruption_rate: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=3000, lr=3e-3, warmup=200))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(steps=3000, lr=3e-3, seed=1))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    num_candidates: int = 6
    preview_steps: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self, include_paths: bool = True) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if not include_paths:
            d.pop("paths")
        return _jsonable(d)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict(include_paths=False))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub = {
            "model": ModelConfig,
            "adapters": AdapterConfig,
            "pretrain": TrainConfig,
            "finetune": TrainConfig,
            "sampler": SamplerConfig,
            "data": DataConfig,
        }
        kwargs: dict[str, Any] = {}
        defaults = cls()
        for name in known:
            if name not in d:
                continue
            value = d[name]
            if name in sub:
                base = dataclasses.asdict(getattr(defaults, name))
                extra = set(value) - set(base)
                if extra:
                    raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
                base.update(value)
                try:
                    value = sub[name](**base)
                except TypeError as exc:
                    raise ConfigError(str(exc)) from exc
            kwargs[name] = value
        return cls(**kwargs)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format (sha1 over ``blob <len>\\0<data>``)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
