"""Glue between simulation, tracking, label generation and training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TrainingDataError
from .evalkit import TrajectoryLog
from .frontend_sim.tracking import CostPredictor, TrackingConfig, run_tracking
from .frontend_sim.world import NoiseModel, Session, WorldConfig, simulate_session
from .introspection import ContextGrid, IntrospectionModel, TrainConfig, train
from .labelgen import CostMap, LabelConfig, LabelFrame, LabelResult, label_frame

log = logging.getLogger(__name__)


def label_frames_from_log(session: Session, log_: TrajectoryLog) -> list[LabelFrame]:
    """Matched features of every tracked frame against the map of its epoch."""
    if len(log_.frame_ids) != len(session.frames):
        raise ValueError("trajectory log and session disagree in frame count")
    out = []
    for i, frame in enumerate(session.frames):
        if log_.frame_ids[i] != frame.frame_id:
            raise ValueError(f"frame id mismatch at position {i}")
        rec = log_.features.get(frame.frame_id)
        cand = frame.candidates
        row = {int(l): k for k, l in enumerate(cand.landmark_id)}
        rows, pts = [], []
        if rec is not None:
            ep = log_.epochs[i]
            for l in rec.landmark_id:
                p = log_.map_points.get((ep, int(l)))
                if p is not None and int(l) in row:
                    rows.append(row[int(l)])
                    pts.append(p)
        rows = np.array(rows, dtype=np.int64)
        out.append(
            LabelFrame(
                frame_id=frame.frame_id,
                estimated=log_.estimated[i] if i < len(log_.estimated_tq) else frame.true_pose,
                reference=frame.reference,
                z=cand.z[rows] if rows.size else np.zeros((0, 3)),
                points=np.array(pts).reshape(-1, 3),
                levels=cand.level[rows] if rows.size else np.zeros(0, dtype=np.int64),
            )
        )
    return out


def label_session(session: Session, log_: TrajectoryLog, config: LabelConfig | None = None) -> list[LabelResult]:
    config = config or LabelConfig()
    return [label_frame(f, session.intrinsics, config) for f in label_frames_from_log(session, log_)]


def training_pairs(sessions: Sequence[Session], results: Sequence[Sequence[LabelResult]]) -> list[tuple[ContextGrid, CostMap]]:
    pairs = []
    for sess, res in zip(sessions, results):
        ctx = {f.frame_id: f.context for f in sess.frames}
        for r in res:
            if r.passed and r.costmap is not None and r.costmap.mask.any():
                pairs.append((ctx[r.frame_id], r.costmap))
    return pairs


@dataclass
class TrainingRecipe:
    """How to produce a model from scratch: simulate, track, label, fit."""

    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    seeds: Sequence[int] = tuple(range(1000, 1004))
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class TrainingOutcome:
    model: IntrospectionModel
    n_frames: int
    n_passed: int


def train_from_recipe(recipe: TrainingRecipe) -> TrainingOutcome:
    sessions, results = [], []
    for seed in recipe.seeds:
        sess = simulate_session(recipe.world, recipe.noise, seed)
        lg = run_tracking(sess, "baseline", None, recipe.tracking)
        sessions.append(sess)
        results.append(label_session(sess, lg, recipe.labels))
    pairs = training_pairs(sessions, results)
    n_frames = sum(len(r) for r in results)
    log.info("training on %d of %d frames", len(pairs), n_frames)
    if not pairs:
        raise TrainingDataError("no frame passed the consistency gate")
    return TrainingOutcome(train(pairs, recipe.train), n_frames, len(pairs))


def track_pair(session: Session, model: CostPredictor, config: TrackingConfig | None = None) -> tuple[TrajectoryLog, TrajectoryLog]:
    """Baseline and introspective runs over the same session."""
    return (
        run_tracking(session, "baseline", model, config),
        run_tracking(session, "introspective", model, config),
    )
