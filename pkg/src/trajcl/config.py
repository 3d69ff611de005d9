"""Run configuration: one flat document validated up front.

The CLI reads a flat JSON config file, applies flag overrides, and echoes the
fully resolved document into the output directory so every artifact records
exactly what produced it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .divergence import MDNConfig
from .predictor import ModelConfig


@dataclass
class ScenarioSource:
    """One entry of the scenario sequence: a dataset path or a synthetic spec."""

    name: str
    path: str | None = None
    synthetic: dict | None = None

    def validate(self) -> None:
        if (self.path is None) == (self.synthetic is None):
            raise ValueError(f"scenario {self.name!r}: give exactly one of path / synthetic")


@dataclass
class RunConfig:
    scenarios: list = field(default_factory=list)     # list of ScenarioSource
    mode: str = "dgsm"
    output_dir: str = "runs/out"

    # memory budgets
    memory_capacity: int = 9000          # M, total repository items
    m_cl: int = 3500                     # M_cl, per-update CL memory budget
    per_task_memory: int | None = None   # fixed per-task count (non-dynamic sweeps)

    # divergence measuring
    w1: float = 0.5
    k: int = 3
    lambda_decay: float = 0.9
    mdn_components: int = 20             # K
    mdn_epochs: int = 60
    mdn_lr: float = 0.05
    mdn_hidden: int = 64
    n_mc: int = 1000
    downsample: int = 5
    condition_cap: int = 2000

    # training
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 32
    gamma: float = 1e-3
    eps_feas: float = 1e-8
    qp_tol: float = 1e-8
    memory_batch_mode: str = "resample"
    clip_norm: float | None = 25.0

    # data windowing
    frame_rate: float = 10.0
    t_h: float = 2.0
    t_f: float = 4.0
    n_neighbors: int = 5                 # N
    stride: int = 1
    split_ratios: tuple = (0.7, 0.1, 0.2)
    normalize: bool = True

    # seeds
    model_seed: int = 0
    train_seed: int = 0
    split_seed: int = 0
    repo_seed: int = 0
    memory_seed: int = 0
    divergence_seed: int = 0

    def __post_init__(self):
        self.scenarios = [
            s if isinstance(s, ScenarioSource) else ScenarioSource(**s)
            for s in self.scenarios
        ]
        self.split_ratios = tuple(self.split_ratios)
        self.validate()

    def validate(self) -> None:
        from .trainer import MODES
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for s in self.scenarios:
            s.validate()
        positive = ("memory_capacity", "m_cl", "mdn_components", "mdn_epochs",
                    "mdn_hidden", "n_mc", "downsample", "condition_cap", "lr",
                    "epochs", "batch_size", "frame_rate", "t_h", "t_f",
                    "n_neighbors", "stride", "k", "mdn_lr")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.w1 <= 1.0):
            raise ValueError("w1 must be in [0, 1]")
        if not (0.0 < self.lambda_decay <= 1.0):
            raise ValueError("lambda_decay must be in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.memory_batch_mode not in ("resample", "full"):
            raise ValueError("memory_batch_mode must be 'resample' or 'full'")
        if len(self.split_ratios) != 3:
            raise ValueError("split_ratios must have three entries")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["split_ratios"] = list(self.split_ratios)
        return doc

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            t_h_frames=int(round(self.t_h * self.frame_rate)),
            t_f_frames=int(round(self.t_f * self.frame_rate)),
            n_neighbors=self.n_neighbors,
            normalize=self.normalize,
        )

    def mdn_config(self) -> MDNConfig:
        return MDNConfig(hidden=self.mdn_hidden)
