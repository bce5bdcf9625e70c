"""Run configuration: one declarative file (YAML or JSON) per experiment.

Every section maps onto a module's parameter dataclass.  Unknown keys are
rejected before any work starts.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .ba_solver import SolverConfig
from .errors import ConfigurationError
from .frontend_sim.tracking import TrackingConfig
from .frontend_sim.world import (
    CLASS_NAMES,
    ClassNoise,
    NoiseModel,
    WorldConfig,
    burst_noise,
    burst_world,
)
from .introspection import TrainConfig
from .labelgen import GpParams, LabelConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorldSection(_Section):
    kind: Literal["default", "burst"] = "default"
    length: float = Field(100.0, gt=0)
    frames_per_meter: float = Field(5.0, gt=0)
    landmarks_per_patch: int = Field(30, ge=1)
    n_bursts: int = Field(4, ge=1)
    burst_landmarks_per_meter: float = Field(200.0, gt=0)
    context_cell: int = Field(16, ge=1)

    def build(self) -> WorldConfig:
        kw = {"length": self.length, "frames_per_meter": self.frames_per_meter, "context_cell": self.context_cell}
        world = burst_world(self.n_bursts, **kw) if self.kind == "burst" else WorldConfig(**kw)
        for lay in world.layout:
            lay.landmarks_per_patch = self.landmarks_per_patch
        for b in world.bursts:
            b.landmarks_per_meter = self.burst_landmarks_per_meter
        return world


class ClassNoiseSection(_Section):
    name: str
    sigma: float = Field(ge=0)
    outlier_rate: float = Field(0.0, ge=0, le=1)
    outlier_spread: float = Field(15.0, ge=0)


class NoiseSection(_Section):
    classes: Optional[list[ClassNoiseSection]] = None
    reference_noise: bool = True
    reference_sigma_t: float = Field(0.1, gt=0)
    reference_sigma_r: float = Field(0.0003**0.5, gt=0)

    @field_validator("classes")
    @classmethod
    def _five_classes(cls, v):
        if v is not None and len(v) != len(CLASS_NAMES):
            raise ValueError(f"expected {len(CLASS_NAMES)} class entries, got {len(v)}")
        return v

    def build(self, world_kind: str) -> NoiseModel:
        cov = np.diag([self.reference_sigma_t**2] * 3 + [self.reference_sigma_r**2] * 3)
        noise = burst_noise() if world_kind == "burst" and self.classes is None else NoiseModel()
        if self.classes is not None:
            noise.classes = [ClassNoise(c.name, c.sigma, c.outlier_rate, c.outlier_spread) for c in self.classes]
        noise.reference_covariance = cov
        noise.reference_noise = self.reference_noise
        return noise


class SolverSection(_Section):
    max_iterations: int = Field(100, ge=1)
    rel_tol: float = Field(1e-8, ge=0)
    grad_tol: float = Field(1e-8, ge=0)
    lambda_init: float = Field(1e-4, gt=0)
    branch: Literal["continuous", "literal"] = "continuous"

    def build(self) -> SolverConfig:
        return SolverConfig(max_iterations=self.max_iterations, rel_tol=self.rel_tol, grad_tol=self.grad_tol,
                            lambda_init=self.lambda_init, branch=self.branch)


class TrackingSection(_Section):
    budget: int = Field(120, ge=0)
    select_cell: int = Field(64, ge=1)
    occupied_only: bool = True
    min_inliers: int = Field(15, ge=1)
    inlier_threshold: float = Field(TrackingConfig().inlier_threshold, gt=0)
    window: int = Field(10, ge=1)
    max_jump: float = Field(1.0, gt=0)
    pose_iterations: int = Field(20, ge=1)
    ba_iterations: int = Field(10, ge=1)

    def build(self, solver: SolverSection) -> TrackingConfig:
        def _s(n: int) -> SolverConfig:
            cfg = solver.build()
            cfg.max_iterations = n
            cfg.rel_tol = max(cfg.rel_tol, 1e-6)
            return cfg

        return TrackingConfig(
            budget=self.budget, select_cell=self.select_cell, occupied_only=self.occupied_only,
            min_inliers=self.min_inliers, inlier_threshold=self.inlier_threshold, window=self.window,
            max_jump=self.max_jump, pose_solver=_s(self.pose_iterations), ba_solver=_s(self.ba_iterations),
        )


class LabelSection(_Section):
    alpha: float = Field(0.05, gt=0, lt=1)
    cost_cap: float = Field(7.82, gt=0)
    grid_cell_size: int = Field(16, ge=1)
    length_scale: Optional[float] = Field(None, gt=0)
    signal_variance: float = Field(0.25, gt=0)
    noise_variance: float = Field(0.01, gt=0)
    prior_mean: float = 0.5
    mask_factor: float = Field(0.3, gt=0)

    def build(self) -> LabelConfig:
        gp = GpParams(self.length_scale, self.signal_variance, self.noise_variance, self.prior_mean, self.mask_factor)
        return LabelConfig(alpha=self.alpha, cost_cap=self.cost_cap, grid_cell_size=self.grid_cell_size, gp=gp)


class IntrospectionSection(_Section):
    epochs: int = Field(2000, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    l2: float = Field(0.0, ge=0)
    init_scale: float = Field(0.01, ge=0)

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.l2, seed, self.init_scale)


class EvalSection(_Section):
    d: float = Field(2.0, gt=0)
    n_shuffles: int = Field(1000, ge=1)


class RunConfig(_Section):
    seed: int = 0
    output_dir: str = "out"
    sessions: int = Field(1, ge=1)
    world: WorldSection = Field(default_factory=WorldSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    tracking: TrackingSection = Field(default_factory=TrackingSection)
    labelgen: LabelSection = Field(default_factory=LabelSection)
    introspection: IntrospectionSection = Field(default_factory=IntrospectionSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def world_config(self) -> WorldConfig:
        return self.world.build()

    def noise_model(self) -> NoiseModel:
        noise = self.noise.build(self.world.kind)
        noise.seed = self.seed
        return noise

    def tracking_config(self) -> TrackingConfig:
        return self.tracking.build(self.solver)

    def label_config(self) -> LabelConfig:
        return self.labelgen.build()

    def train_config(self) -> TrainConfig:
        return self.introspection.build(self.seed)


def parse_config(doc: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(doc or {})
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {p}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigurationError("config root must be a mapping")
    return parse_config(doc)

