"""Experiment configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METHODS = ("gpi-exact", "gpi-learned", "gpi-entangled", "gpi-offdiag", "baseline-q")
Method = Literal["gpi-exact", "gpi-learned", "gpi-entangled", "gpi-offdiag", "baseline-q"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvironmentConfig(_Strict):
    kind: Literal["spriteworld", "hypercube"] = "spriteworld"
    # spriteworld
    grid_size: int = Field(5, ge=3)
    object_count: int = Field(1, ge=0, le=2)
    move_step: int = Field(2, ge=2)
    drag_step: int = Field(1, ge=1)
    seed: int = 0
    # hypercube
    k: Optional[int] = Field(None, ge=1)
    m: Optional[int] = Field(None, ge=1)


class FeatureConfig(_Strict):
    m: int = Field(3, ge=1)
    kind: Literal["disentangled", "entangled"] = "disentangled"
    rotation: Optional[list[tuple[int, int, float]]] = None
    entities: Literal["all", "agent"] = "all"


class ErlConfig(_Strict):
    steps: int = Field(200_000, ge=0)
    alpha: float = Field(0.1, gt=0, le=1)
    epsilon: float = Field(0.2, ge=0, le=1)
    episode_length: int = Field(20, ge=1)
    tie_tol: float = Field(1e-3, ge=0)
    update: Literal["all", "behavior"] = "all"


class BaselineConfig(_Strict):
    steps: int = Field(100_000, ge=0)
    alpha: float = Field(0.5, gt=0, le=1)
    epsilon: float = Field(0.2, ge=0, le=1)
    eval_every: int = Field(1000, ge=1)


class RegressionConfig(_Strict):
    budgets: list[int] = Field(default_factory=lambda: [0, 25, 50, 100, 200, 400, 800, 1600, 3200])
    ridge: float = Field(1e-6, gt=0)

    @field_validator("budgets")
    @classmethod
    def _increasing(cls, v):
        if not v or any(b < 0 for b in v) or sorted(set(v)) != v:
            raise ValueError("budgets must be non-empty, non-negative and strictly increasing")
        return v


class EvaluationConfig(_Strict):
    episodes: int = Field(100, ge=1)
    horizon: Optional[int] = Field(None, ge=1)


class SampleComplexityConfig(_Strict):
    erl_steps: float = Field(1e7, ge=0)
    gpi_per_task: float = Field(5e4, ge=0)
    baseline_per_task: float = Field(5e5, ge=0)
    run_record: Optional[str] = None


class ExperimentConfig(_Strict):
    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    gamma: float = Field(0.9, ge=0, lt=1)
    erl: ErlConfig = Field(default_factory=ErlConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    regression: RegressionConfig = Field(default_factory=RegressionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    sample_complexity: SampleComplexityConfig = Field(default_factory=SampleComplexityConfig)
    tasks: Optional[str] = None
    alignment: Literal["aligned", "unaligned"] = "unaligned"
    method: Union[Method, list[Method]] = "gpi-exact"
    seeds: list[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    workers: int = Field(1, ge=1)

    @field_validator("seeds")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("seeds must be non-empty")
        return v

    @model_validator(mode="after")
    def _hypercube_needs_k(self):
        if self.environment.kind == "hypercube" and self.environment.k is None:
            raise ValueError("hypercube environment needs k")
        return self

    @property
    def methods(self) -> list[str]:
        return [self.method] if isinstance(self.method, str) else list(self.method)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a config file; relative file references resolve against its directory."""
    path = Path(path)
    cfg = ExperimentConfig.model_validate_json(path.read_text())
    base = path.resolve().parent
    if cfg.tasks is not None:
        tasks = Path(cfg.tasks)
        if not tasks.is_absolute():
            tasks = base / tasks
        if not tasks.exists():
            raise FileNotFoundError(f"task file {tasks} does not exist")
        cfg.tasks = str(tasks)
    rec = cfg.sample_complexity.run_record
    if rec is not None and not Path(rec).is_absolute():
        cfg.sample_complexity.run_record = str(base / rec)
    return cfg
