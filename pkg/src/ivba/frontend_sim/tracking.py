"""Stereo tracking over a simulated session.

Per frame: choose a feature subset under a per-cell budget, set each
feature's Huber parameter, update the pose against the current map, add
new landmarks by stereo triangulation, and every few frames refine a
sliding window with local bundle adjustment.  A frame with too few inliers
is a tracking failure; the tracker then restarts from the frame's reference
pose with an empty map.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import chi2

from ..ba_solver import BaProblem, SolverConfig, TrackingFailure, marginal_pose_update, solve
from ..errors import ConfigurationError
from ..evalkit import FeatureRecords, TrajectoryLog
from ..geometry import CameraIntrinsics, Pose, StereoObservation
from ..introspection import ContextGrid, predict_costmap
from ..labelgen import COST_CAP, CostMap, normalize_cost
from ..robust_loss import DELTA_MAX, delta_from_cost, level_sigma2
from .world import CLASS_NAMES, NoiseModel, Session

log = logging.getLogger(__name__)

MODES = ("baseline", "introspective")


# --------------------------------------------------------------------------
# costmap-guided selection


def cell_caps(cell_sums: np.ndarray, total_budget: int, occupied: np.ndarray | None = None,
              eps0: float = 1e-3) -> np.ndarray:
    """Per-cell feature caps ``round(B * w_k / sum_j w_j)``, ``w_k = 1 / (eps0 + S_k)``.

    With ``occupied`` given, the normalisation runs over those cells only and
    the rest get cap 0.  Rounding is half-up.
    """
    if total_budget < 0:
        raise ValueError("total_budget must be non-negative")
    s = np.asarray(cell_sums, dtype=float)
    w = 1.0 / (eps0 + s)
    if occupied is not None:
        w = np.where(occupied, w, 0.0)
    tot = w.sum()
    if tot <= 0:
        return np.zeros(s.shape, dtype=np.int64)
    return np.floor(total_budget * w / tot + 0.5).astype(np.int64)


def select_indices(
    u: np.ndarray,
    v: np.ndarray,
    costmap: CostMap,
    total_budget: int,
    cell_size: int,
    eps0: float = 1e-3,
    occupied_only: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Indices (ascending, i.e. input order) of the kept candidates and the
    cap grid used."""
    sums = costmap.pixel_sums(cell_size)
    nr, nc = sums.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.clip(np.floor(v / cell_size).astype(np.int64), 0, nr - 1)
    c = np.clip(np.floor(u / cell_size).astype(np.int64), 0, nc - 1)
    flat = r * nc + c
    occ = None
    if occupied_only:
        occ = np.zeros(nr * nc, dtype=bool)
        occ[flat] = True
        occ = occ.reshape(nr, nc)
    caps = cell_caps(sums, total_budget, occ, eps0)
    # rank of each candidate within its cell, in input order
    order = np.argsort(flat, kind="stable")
    sf = flat[order]
    starts = np.flatnonzero(np.r_[True, sf[1:] != sf[:-1]]) if sf.size else np.zeros(0, dtype=np.int64)
    rank_sorted = np.arange(sf.size) - np.repeat(starts, np.diff(np.r_[starts, sf.size]))
    rank = np.empty_like(rank_sorted)
    rank[order] = rank_sorted
    keep = np.flatnonzero(rank < caps.reshape(-1)[flat])
    return keep, caps


def guided_select(
    candidates: Sequence[StereoObservation],
    costmap: CostMap,
    total_budget: int,
    cell_size: int,
    eps0: float = 1e-3,
    occupied_only: bool = True,
) -> list[StereoObservation]:
    """Keep candidates in input order up to each cell's cap; cells with more
    summed cost get proportionally fewer features."""
    if not candidates:
        return []
    u = np.array([o.u_left for o in candidates])
    v = np.array([o.v for o in candidates])
    keep, _ = select_indices(u, v, costmap, total_budget, cell_size, eps0, occupied_only)
    return [candidates[i] for i in keep]


def uniform_costmap(context: ContextGrid, value: float = 0.5) -> CostMap:
    rows, cols = context.descriptors.shape[:2]
    return CostMap(
        width=context.width, height=context.height, cell_size=context.cell_size,
        values=np.full((rows, cols), value), uncertainty=np.zeros((rows, cols)),
        mask=np.ones((rows, cols), dtype=bool), frame_id=context.frame_id,
    )


# --------------------------------------------------------------------------
# predictors


class CostPredictor(Protocol):
    def predict(self, descriptors: np.ndarray) -> np.ndarray: ...


@dataclass
class OracleModel:
    """Knows each class's true noise: cost of a cell is the class-fraction
    weighted normalised expected squared error (empty cells: ``empty_cost``)."""

    class_costs: np.ndarray
    empty_cost: float = 0.5

    @classmethod
    def from_noise(cls, noise: NoiseModel, cost_cap: float = COST_CAP, base_sigma: float = 1.0,
                   n_samples: int = 20000) -> OracleModel:
        """Monte Carlo expectation of the normalised per-feature cost.  The
        pyramid level cancels: noise and assumed variance scale together."""
        rng = np.random.default_rng(0)
        costs = []
        for c in noise.classes:
            eps = rng.normal(0.0, c.sigma, (n_samples, 3))
            out = rng.random(n_samples) < c.outlier_rate
            box = rng.uniform(-c.outlier_spread, c.outlier_spread, (n_samples, 3))
            eps = np.where(out[:, None], box, eps)
            x = np.einsum("ni,ni->n", eps, eps) / base_sigma**2
            costs.append(float(np.mean(normalize_cost(x, cost_cap))))
        return cls(np.array(costs))

    def predict(self, descriptors: np.ndarray) -> np.ndarray:
        d = np.asarray(descriptors, dtype=float)
        K = self.class_costs.shape[0]
        frac = d[..., :K]
        tot = frac.sum(axis=-1)
        val = frac @ self.class_costs
        out = np.where(tot > 1e-12, val / np.maximum(tot, 1e-12), self.empty_cost)
        return np.clip(out, 0.0, 1.0)


def _predicted_costmap(model: CostPredictor, context: ContextGrid) -> CostMap:
    if hasattr(model, "weights"):
        return predict_costmap(model, context)  # type: ignore[arg-type]
    cm = uniform_costmap(context)
    cm.values = np.asarray(model.predict(context.descriptors), dtype=float)
    return cm


# --------------------------------------------------------------------------
# tracking


@dataclass
class TrackingConfig:
    budget: int = 120
    select_cell: int = 64
    eps0: float = 1e-3
    occupied_only: bool = True
    min_inliers: int = 15
    inlier_threshold: float = float(chi2.ppf(0.95, 3))
    window: int = 10
    max_jump: float = 1.0
    min_disparity: float = 1.0
    max_depth: float = 40.0
    delta_max: float = DELTA_MAX
    base_sigma: float = 1.0
    scale_factor: float = 1.2
    pose_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=20, rel_tol=1e-6))
    ba_solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=10, rel_tol=1e-6))
    record_features: bool = True

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ConfigurationError("budget must be non-negative")
        if self.window < 1:
            raise ConfigurationError("window must be at least 1")
        if self.min_inliers < 1:
            raise ConfigurationError("min_inliers must be positive")


@dataclass
class _WindowFrame:
    index: int
    pose: Pose  # camera-to-world
    lm: np.ndarray
    z: np.ndarray
    sigma2: np.ndarray
    delta: np.ndarray


def _triangulate(z: np.ndarray, intr: CameraIntrinsics, pose: Pose, min_disp: float, max_depth: float):
    disp = z[:, 0] - z[:, 2]
    ok = disp > min_disp
    depth = np.where(ok, intr.fx * intr.baseline / np.where(ok, disp, 1.0), 0.0)
    ok &= depth < max_depth
    pc = np.stack([(z[:, 0] - intr.cx) * depth / intr.fx, (z[:, 1] - intr.cy) * depth / intr.fy, depth], axis=1)
    return ok, pose.apply(pc)


class Tracker:
    """Single-session tracking state machine."""

    def __init__(self, session: Session, mode: str, model: CostPredictor | None, config: TrackingConfig):
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == "introspective" and model is None:
            raise ConfigurationError("introspective mode requires a model")
        self.session = session
        self.mode = mode
        self.model = model
        self.cfg = config
        self.intr = session.intrinsics
        self.thr = config.inlier_threshold
        self.map: dict[int, np.ndarray] = {}
        self.epoch = 0
        self.window: deque[_WindowFrame] = deque(maxlen=config.window + 1)
        self.since_ba = 0
        self.est: list[Pose] = []
        self.velocity = Pose.identity()
        self.failures: list[tuple[int, str]] = []
        self.epochs: list[int] = []
        self.features: dict[int, FeatureRecords] = {}
        self.map_log: dict[tuple[int, int], np.ndarray] = {}

    # -- per-frame pieces -------------------------------------------------
    def _costs(self, frame) -> tuple[CostMap | None, CostMap]:
        pred = _predicted_costmap(self.model, frame.context) if self.model is not None else None
        sel = pred if self.mode == "introspective" else uniform_costmap(frame.context)
        return pred, sel

    def _predict_pose(self) -> Pose:
        return self.est[-1] @ self.velocity

    def _pose_update(self, fid: int, guess: Pose, lm, z, s2, dl) -> tuple[Pose, np.ndarray, np.ndarray]:
        in_map = np.array([l in self.map for l in lm], dtype=bool)
        if in_map.sum() < self.cfg.min_inliers:
            raise TrackingFailure(f"only {int(in_map.sum())} map matches")
        ids = lm[in_map]
        prob = BaProblem(
            intrinsics=self.intr, frame_ids=[fid], poses=[guess], frame_fixed=[False],
            landmark_ids=list(ids), points=np.array([self.map[l] for l in ids]),
            landmark_fixed=np.ones(ids.size, dtype=bool),
            obs_frame=np.zeros(ids.size, dtype=np.int64), obs_landmark=np.arange(ids.size),
            z=z[in_map], sigma2=s2[in_map], delta=dl[in_map], delta_max=self.cfg.delta_max,
        )
        upd = marginal_pose_update(prob, fid, self.cfg.pose_solver, min_observations=4)
        inl = upd.usable & (upd.x <= self.thr)
        n_in = int(inl.sum())
        if n_in < self.cfg.min_inliers:
            raise TrackingFailure(f"only {n_in} inliers")
        jump = float(np.linalg.norm(upd.pose.t - guess.t))
        if jump > self.cfg.max_jump:
            raise TrackingFailure(f"pose jump {jump:.2f} m")
        return upd.pose, in_map, ~inl

    def _add_landmarks(self, pose: Pose, lm, z, skip: set[int]) -> np.ndarray:
        new = np.array([(l not in self.map) and (l not in skip) for l in lm], dtype=bool)
        if new.any():
            ok, pw = _triangulate(z[new], self.intr, pose, self.cfg.min_disparity, self.cfg.max_depth)
            for l, good, p in zip(lm[new], ok, pw):
                if good:
                    self.map[int(l)] = p
        return np.array([l in self.map for l in lm], dtype=bool)

    def _local_ba(self) -> None:
        frames = list(self.window)
        if len(frames) < 2:
            return
        lm_all = np.unique(np.concatenate([f.lm for f in frames]))
        lm_all = np.array([l for l in lm_all if l in self.map], dtype=np.int64)
        if lm_all.size == 0:
            return
        pos = {int(l): i for i, l in enumerate(lm_all)}
        of, ol, zz, s2, dl = [], [], [], [], []
        for fi, f in enumerate(frames):
            m = np.array([l in pos for l in f.lm], dtype=bool)
            of.append(np.full(int(m.sum()), fi))
            ol.append(np.array([pos[int(l)] for l in f.lm[m]], dtype=np.int64))
            zz.append(f.z[m])
            s2.append(f.sigma2[m])
            dl.append(f.delta[m])
        prob = BaProblem(
            intrinsics=self.intr, frame_ids=[f.index for f in frames], poses=[f.pose for f in frames],
            frame_fixed=[i == 0 for i in range(len(frames))],
            landmark_ids=list(lm_all), points=np.array([self.map[int(l)] for l in lm_all]),
            landmark_fixed=np.zeros(lm_all.size, dtype=bool),
            obs_frame=np.concatenate(of), obs_landmark=np.concatenate(ol),
            z=np.concatenate(zz), sigma2=np.concatenate(s2), delta=np.concatenate(dl),
            delta_max=self.cfg.delta_max,
        )
        sol = solve(prob, self.cfg.ba_solver)
        if sol.status == "diverged":
            log.debug("local BA diverged at frame %d; keeping previous estimates", frames[-1].index)
            return
        for f in frames[1:]:
            f.pose = sol.poses[f.index]
            self.est[f.index] = f.pose
        for l, p in sol.landmarks.items():
            self.map[int(l)] = p
        if len(self.est) >= 2:
            self.velocity = self.est[-2].inverse() @ self.est[-1]

    def _snapshot_map(self) -> None:
        for l, p in self.map.items():
            self.map_log[(self.epoch, int(l))] = p.copy()

    def _reset(self, index: int) -> None:
        self._snapshot_map()
        self.map = {}
        self.window.clear()
        self.since_ba = 0
        self.epoch += 1 if index > 0 else 0

    # -- main loop ----------------------------------------------------------
    def step(self, index: int) -> None:
        frame = self.session.frames[index]
        cand = frame.candidates
        pred, selmap = self._costs(frame)
        # detector order puts features of already-mapped landmarks first
        tracked = np.array([l in self.map for l in cand.landmark_id], dtype=bool)
        order = np.argsort(~tracked, kind="stable")
        keep, _ = select_indices(cand.z[order, 0], cand.z[order, 1], selmap, self.cfg.budget,
                                 self.cfg.select_cell, self.cfg.eps0, self.cfg.occupied_only)
        sub = cand.subset(order[keep])
        lm, z = sub.landmark_id, sub.z
        s2 = level_sigma2(sub.level, self.cfg.base_sigma, self.cfg.scale_factor) * np.ones(len(sub))
        c_hat = pred.value_at(z[:, 0], z[:, 1]) if pred is not None else np.full(len(sub), np.nan)
        if self.mode == "introspective":
            dl = delta_from_cost(c_hat, self.cfg.delta_max) * np.ones(len(sub))
        else:
            dl = np.full(len(sub), self.cfg.delta_max)
        if self.cfg.record_features:
            self.features[frame.frame_id] = FeatureRecords(
                lm.copy(), np.asarray(c_hat, dtype=float).copy(), np.einsum("ni,ni->n", sub.true_eps, sub.true_eps))

        culled: set[int] = set()
        restarted = True
        if index == 0:
            pose = frame.true_pose
            self._reset(index)
        else:
            guess = self._predict_pose()
            try:
                pose, in_map, bad = self._pose_update(frame.frame_id, guess, lm, z, s2, dl)
                restarted = False
                for l in lm[in_map][bad]:
                    culled.add(int(l))
                    # culled points stay in the logged map so labels see
                    # every matched feature, not only the inliers
                    self.map_log[(self.epoch, int(l))] = self.map.pop(int(l))
            except TrackingFailure as exc:
                log.info("frame %d: tracking failure (%s); reinitialising", frame.frame_id, exc.reason)
                self.failures.append((frame.frame_id, exc.reason))
                pose = frame.reference.pose
                self._reset(index)
        # velocity survives a restart since the reference pose is noisy
        if not restarted:
            self.velocity = self.est[-1].inverse() @ pose
        self.est.append(pose)
        self.epochs.append(self.epoch)
        used = self._add_landmarks(pose, lm, z, culled)
        self.window.append(_WindowFrame(index, pose, lm[used], z[used], s2[used], dl[used]))
        self.since_ba += 1
        if self.since_ba >= self.cfg.window:
            self._local_ba()
            self.since_ba = 0

    def run(self) -> TrajectoryLog:
        for i in range(len(self.session.frames)):
            self.step(i)
        self._snapshot_map()
        frames = self.session.frames
        return TrajectoryLog(
            frame_ids=[f.frame_id for f in frames],
            timestamps=[f.timestamp for f in frames],
            estimated_tq=np.array([p.to_tq() for p in self.est]),
            reference_tq=np.array([f.true_pose.to_tq() for f in frames]),
            odometer=np.array([f.timestamp for f in frames]),
            failures=list(self.failures),
            epochs=list(self.epochs),
            features=self.features,
            map_points=self.map_log,
            meta={"mode": self.mode, "seed": self.session.seed, "reinit_pose_source": "reference",
                  "reference_field": "ground_truth", "class_names": list(self.session.class_names or CLASS_NAMES)},
        )


def run_tracking(session: Session, mode: str = "baseline", model: CostPredictor | None = None,
                 config: TrackingConfig | None = None) -> TrajectoryLog:
    """Track a session; failures are logged events, not exceptions."""
    return Tracker(session, mode, model, config or TrackingConfig()).run()
