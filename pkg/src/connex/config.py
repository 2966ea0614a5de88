"""Dataclass configs for every pipeline stage plus seeded RNG plumbing.

All randomness in the package funnels through :func:`stage_rng`: each stage
derives an independent, platform-stable substream from the run seed and the
stage name, so stages can be re-run in isolation and still reproduce.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1


def stage_rng(seed: int, *labels: str) -> np.random.Generator:
    """Deterministic generator for one (seed, stage, ...) combination."""
    keys = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        keys.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(keys))


def _from_dict(cls, payload: dict, context: str):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    return cls(**payload)


@dataclass
class BackboneConfig:
    """Per-modality graph backbone: 5 gated layers, 32 channels, GAP readout."""

    layers: int = 5
    channels: int = 32
    dropout: float = 0.6
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    patience: int = 30  # early stop when train loss stops improving
    min_delta: float = 1e-5
    dtype: str = "float64"

    def validate(self):
        if self.layers < 1 or self.channels < 1 or self.batch_size < 1:
            raise ConfigError("backbone: layers, channels and batch_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("backbone: dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("backbone: dtype must be float32 or float64")
        return self


@dataclass
class MaskConfig:
    """Globally shared edge-mask learning against a frozen backbone."""

    steps: int = 200
    lr: float = 1e-3
    sparsity_weight: float = 0.005
    entropy_weight: float = 0.1
    init_std: float = 0.1

    def validate(self):
        if self.steps < 0:
            raise ConfigError("mask: steps must be >= 0")
        if self.sparsity_weight < 0 or self.entropy_weight < 0:
            raise ConfigError("mask: regularizer weights must be >= 0")
        return self


@dataclass
class FinetuneConfig:
    """Supervised refinement of a backbone on mask-weighted graphs."""

    epochs: int = 200
    lr: float = 5e-4
    batch_size: int = 16
    patience: int = 30
    min_delta: float = 1e-5

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("finetune: bad epochs/batch_size")
        return self


@dataclass
class FusionConfig:
    """Cross-attention-mixer fusion network dimensions and training."""

    batch_size: int = 8  # fixed subject-token count; partial batches are padded
    token_count: int = 8  # per-subject tokens carved out of the embedding
    model_dim: int = 16
    heads: int = 4
    dropout: float = 0.0
    lr: float = 1e-4
    epochs: int = 300

    def validate(self, channels: int):
        if channels % self.token_count != 0:
            raise ConfigError(
                f"fusion: channels {channels} not divisible by token_count {self.token_count}"
            )
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"fusion: model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.batch_size < 1:
            raise ConfigError("fusion: batch_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("fusion: dropout must be in [0, 1)")
        return self


@dataclass
class LossWeights:
    """Branch weights of the multi-head joint loss; must sum to 1."""

    sc_view: float = 0.15
    fnc_view: float = 0.15
    unified_view: float = 0.15
    fused: float = 0.55

    def validate(self):
        total = self.sc_view + self.fnc_view + self.unified_view + self.fused
        if any(w < 0 for w in (self.sc_view, self.fnc_view, self.unified_view, self.fused)):
            raise ConfigError("loss weights must be non-negative")
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"loss weights must sum to 1 (got {total!r})")
        return self

    def as_tuple(self):
        return (self.sc_view, self.fnc_view, self.unified_view, self.fused)


def loss_weight_grid():
    """The built-in grid: view weights in {0.1, 0.15, 0.2}, remainder on fused."""
    values = (0.1, 0.15, 0.2)
    grid = []
    for a in values:
        for b in values:
            for c in values:
                grid.append(LossWeights(a, b, c, round(1.0 - a - b - c, 10)).validate())
    return grid


#: the ten ablation rows, in reporting order
ABLATION_ROWS = (
    "SC/base",
    "SC/explained",
    "FNC/base",
    "FNC/explained",
    "SC+FNC/concat",
    "SC+FNC/cross-att",
    "SC+FNC/connex",
    "SC+FNC/concat+unified",
    "SC+FNC/cross-att+unified",
    "SC+FNC/connex+unified",
)


@dataclass
class PipelineConfig:
    """Everything one cross-validated run needs, JSON-round-trippable."""

    knn_k: int = 5
    ldp_two_hop: bool = False
    folds: int = 5
    seed: int = 0
    grid_search_weights: bool = False  # fold-local grid search; slow, off by default
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    rows: tuple = ABLATION_ROWS

    def validate(self):
        if self.knn_k < 1:
            raise ConfigError("pipeline: knn_k must be >= 1")
        if self.folds < 2:
            raise ConfigError("pipeline: folds must be >= 2")
        self.backbone.validate()
        self.mask.validate()
        self.finetune.validate()
        self.fusion.validate(self.backbone.channels)
        self.loss_weights.validate()
        unknown_rows = set(self.rows) - set(ABLATION_ROWS)
        if unknown_rows:
            raise ConfigError(f"pipeline: unknown ablation rows {sorted(unknown_rows)}")
        return self

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["rows"] = list(self.rows)
        payload["schema_version"] = SCHEMA_VERSION
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        version = payload.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"pipeline config schema_version {version} unsupported")
        nested = {
            "backbone": BackboneConfig,
            "mask": MaskConfig,
            "finetune": FinetuneConfig,
            "fusion": FusionConfig,
            "loss_weights": LossWeights,
        }
        kwargs = {}
        for key, value in payload.items():
            if key in nested:
                kwargs[key] = _from_dict(nested[key], value, key)
            elif key == "rows":
                kwargs[key] = tuple(value)
            elif key in {f.name for f in fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"pipeline config: unknown key {key!r}")
        return cls(**kwargs).validate()

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(payload)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
