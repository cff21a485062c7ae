"""Experiment configuration: a JSON config file plus command-line overrides.

Unknown keys anywhere in the file are rejected so a typo cannot silently
fall back to a default. The fully resolved config (seed included) is echoed
into every run directory for provenance.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import SyntheticWorldConfig
from .errors import ConfigError

FUSION_CHOICES = ("none", "early", "late", "deep")
EMBEDDING_CHOICES = ("learned", "pretrained-frozen", "pretrained-finetune")


def _default_alpha_grid() -> list[float]:
    return [round(0.1 * i, 1) for i in range(11)]


@dataclass
class RunConfig:
    seed: int = 1
    run_dir: str = "runs/exp"
    # captioner dims
    hidden_size: int = 256
    frame_proj_size: int | None = None  # None: same as hidden_size
    embed_dim: int = 500  # learned-mode width; pretrained modes take the file width
    # language model dims
    lm_hidden_size: int = 256
    lm_embed_dim: int | None = None  # None: same as embed_dim
    vocab_size: int = 10_000
    # training
    epochs: int = 5
    lr: float = 0.1
    lm_epochs: int = 4
    lm_lr: float = 0.5
    clip_norm: float = 5.0
    lr_decay: float = 0.5
    lr_decay_every: int = 0  # 0: constant learning rate
    # knowledge injection
    fusion: str = "none"
    alpha: float = 0.5
    alpha_grid: list[float] = field(default_factory=_default_alpha_grid)
    embeddings: str = "learned"
    predict_embeddings: bool = False
    lambda_emb: float = 1.0
    # decoding
    beam: int = 5
    max_len: int = 20
    # synthetic world
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)

    def validate(self) -> None:
        if self.fusion not in FUSION_CHOICES:
            raise ConfigError(f"fusion must be one of {FUSION_CHOICES}, got {self.fusion!r}")
        if self.embeddings not in EMBEDDING_CHOICES:
            raise ConfigError(
                f"embeddings must be one of {EMBEDDING_CHOICES}, got {self.embeddings!r}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.alpha_grid or any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise ConfigError(f"alpha_grid must be nonempty within [0, 1]: {self.alpha_grid}")
        if self.beam < 1 or self.max_len < 1:
            raise ConfigError("beam and max_len must be >= 1")
        if self.lr <= 0 or self.lm_lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr, lm_lr and clip_norm must be > 0")
        if self.lambda_emb < 0:
            raise ConfigError(f"lambda_emb must be >= 0, got {self.lambda_emb}")
        if self.epochs < 0 or self.lm_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        for name in ("hidden_size", "lm_hidden_size", "embed_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.world.validate()


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_WORLD_KEYS = {f.name for f in dataclasses.fields(SyntheticWorldConfig)}


def load_config_file(path) -> dict:
    """Parse the JSON config file, rejecting unknown keys (nested included)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    world = raw.get("world", {})
    if not isinstance(world, dict):
        raise ConfigError(f"{path}: 'world' must be a JSON object")
    unknown = set(world) - _WORLD_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown world keys: {sorted(unknown)}")
    return raw


def resolve_config(file_config: dict | None, overrides: dict | None = None) -> RunConfig:
    """defaults <- config file <- explicit overrides; world.seed follows seed."""
    merged: dict = {}
    if file_config:
        merged.update(file_config)
    world_dict = dict(merged.pop("world", {}))
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in _TOP_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    cfg = RunConfig(**merged)
    if "seed" not in world_dict:
        world_dict["seed"] = cfg.seed
    cfg.world = SyntheticWorldConfig(**world_dict)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    return out


def echo_config(cfg: RunConfig, out_dir, command: str) -> Path:
    """Write the resolved config into the run directory for provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.config.json"
    record = {"command": command, "config": config_to_dict(cfg)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
