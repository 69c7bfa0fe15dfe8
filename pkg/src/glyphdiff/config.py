"""Run configuration: composable sub-configs with YAML round-tripping and a
content hash that ties checkpoints, datasets and reports together."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .guidance import GuidanceParams
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    n_scripts: int = 2
    n_glyphs: int = 20
    n_samples: int = 5000
    h: int = 48
    w: int = 48
    small_fraction: float = 0.3
    script_weights: tuple = (10.0, 1.0)  # long-tail frequency axis
    stroke_ranges: tuple | None = None   # default: script i gets (1+i, 3+i)
    font_range: tuple = (14, 24)
    small_font: tuple = (6, 12)
    lines_range: tuple = (1, 2)
    text_len: tuple = (2, 4)
    seed: int = 1


@dataclass
class ScheduleConfig:
    kind: str = "ddpm_linear"
    T: int = 200
    beta_start: float | None = None  # None: DDPM range scaled by 1000/T
    beta_end: float | None = None


@dataclass
class RenderConfig:
    steps: int = 30
    alpha1: float = 3.0
    upscale_factor: int = 2
    patch: int | None = None    # None: base h
    stride: int | None = None   # None: base h // 2
    upscale_method: str = "bicubic"
    fresh_noise: bool = False
    use_dynamic: bool = True


@dataclass
class EvalConfig:
    n_prompts: int = 200
    gens_per_prompt: int = 4
    small_fraction: float = 0.25
    chunk_prompts: int = 8
    modes: tuple = ("cfg", "ndcfg", "ldtsr", "ld")
    seed: int = 123


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    codec: str = "identity"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        max_steps=1500, loss_glyph_enabled=False))
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    render: RenderConfig = field(default_factory=RenderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.guidance.T = self.schedule.T

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kw = dict(d)
        for key, sub in (("data", DataConfig), ("schedule", ScheduleConfig),
                         ("model", ModelConfig), ("train", TrainConfig),
                         ("pretrain", TrainConfig), ("guidance", GuidanceParams),
                         ("render", RenderConfig), ("eval", EvalConfig)):
            if key in kw and isinstance(kw[key], dict):
                kw[key] = sub(**kw[key])
        return cls(**kw)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), f,
                       sort_keys=True)


def load_config(path) -> RunConfig:
    with open(path) as f:
        d = yaml.safe_load(f)
    return RunConfig.from_dict(d or {})
