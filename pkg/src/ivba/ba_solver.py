"""Robust bundle adjustment over stereo observations.

Minimises ``sum_i L_i(eps_i^T Sigma_i^-1 eps_i)`` over free camera poses and
free landmark positions with Levenberg-Marquardt.  Each iteration linearises
the robust objective as an IRLS problem (weights from :func:`huber_weight`)
and eliminates landmark blocks with the Schur complement, leaving a dense
pose-only system of size ``6 * free_frames``.

Poses handed in and out are camera-to-world; internally the state holds the
world-to-camera transforms that the projection model consumes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from .geometry import (
    DEPTH_EPSILON,
    CameraIntrinsics,
    Landmark,
    Pose,
    StereoObservation,
    project_points,
    residual_jacobians,
    se3_exp_batch,
)
from .robust_loss import (
    DELTA_MAX,
    LossParams,
    ObservationCovariance,
    huber_eval,
    huber_weight,
)


class TrackingFailure(RuntimeError):
    """Pose-only update cannot produce a trustworthy pose."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class SolverConfig:
    max_iterations: int = 100
    rel_tol: float = 1e-8
    grad_tol: float = 1e-8
    abs_tol: float = 1e-24
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e12
    # Mahalanobis squared error charged to observations that fall behind the camera
    clamp_sq_error: float = 1e6
    branch: str = "continuous"
    trace_path: str | None = None


@dataclass(frozen=True)
class BaFrame:
    frame_id: int
    pose: Pose  # camera-to-world
    fixed: bool = False


@dataclass(frozen=True)
class BaLandmark:
    landmark: Landmark
    fixed: bool = False


@dataclass(frozen=True)
class BaObservation:
    obs: StereoObservation
    cov: ObservationCovariance
    loss: LossParams


@dataclass
class BaProblem:
    """Array form of a BA problem.

    Observation ``i`` links frame ``obs_frame[i]`` and landmark
    ``obs_landmark[i]`` (both positional indices).
    """

    intrinsics: CameraIntrinsics
    frame_ids: list[int]
    poses: list[Pose]
    frame_fixed: np.ndarray
    landmark_ids: list[int]
    points: np.ndarray
    landmark_fixed: np.ndarray
    obs_frame: np.ndarray
    obs_landmark: np.ndarray
    z: np.ndarray
    sigma2: np.ndarray
    delta: np.ndarray
    delta_max: float = DELTA_MAX

    def __post_init__(self) -> None:
        self.frame_fixed = np.asarray(self.frame_fixed, dtype=bool).reshape(-1)
        self.landmark_fixed = np.asarray(self.landmark_fixed, dtype=bool).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.obs_frame = np.asarray(self.obs_frame, dtype=np.int64).reshape(-1)
        self.obs_landmark = np.asarray(self.obs_landmark, dtype=np.int64).reshape(-1)
        self.z = np.asarray(self.z, dtype=float).reshape(-1, 3)
        n = self.z.shape[0]
        self.sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=float), (n,)).copy()
        self.delta = np.broadcast_to(np.asarray(self.delta, dtype=float), (n,)).copy()
        F, M = len(self.poses), self.points.shape[0]
        if len(self.frame_ids) != F or self.frame_fixed.shape[0] != F:
            raise ValueError("frame arrays disagree in length")
        if len(self.landmark_ids) != M or self.landmark_fixed.shape[0] != M:
            raise ValueError("landmark arrays disagree in length")
        if len(set(self.landmark_ids)) != M:
            raise ValueError("landmark ids must be unique")
        if self.obs_frame.shape[0] != n or self.obs_landmark.shape[0] != n:
            raise ValueError("observation arrays disagree in length")
        if n and (
            self.obs_frame.min() < 0 or self.obs_frame.max() >= F
            or self.obs_landmark.min() < 0 or self.obs_landmark.max() >= M
        ):
            raise ValueError("observation references a missing frame or landmark")
        if np.any(self.sigma2 <= 0):
            raise ValueError("observation variances must be positive")
        if np.any((self.delta < 0) | (self.delta > self.delta_max)):
            raise ValueError("loss parameters outside [0, delta_max]")
        if not (self.frame_fixed.any() or self.landmark_fixed.any()):
            raise ValueError("no gauge constraint: fix at least one frame or landmark")

    @classmethod
    def from_objects(
        cls,
        frames: Sequence[BaFrame],
        landmarks: Sequence[BaLandmark],
        observations: Sequence[BaObservation],
        intrinsics: CameraIntrinsics,
    ) -> BaProblem:
        fidx = {f.frame_id: i for i, f in enumerate(frames)}
        lidx = {b.landmark.id: i for i, b in enumerate(landmarks)}
        try:
            of = [fidx[o.obs.frame_id] for o in observations]
            ol = [lidx[o.obs.landmark_id] for o in observations]
        except KeyError as exc:
            raise ValueError(f"observation references unknown id {exc}") from None
        dmax = {o.loss.delta_max for o in observations} or {DELTA_MAX}
        if len(dmax) > 1:
            raise ValueError("mixed delta_max values in one problem")
        return cls(
            intrinsics=intrinsics,
            frame_ids=[f.frame_id for f in frames],
            poses=[f.pose for f in frames],
            frame_fixed=[f.fixed for f in frames],
            landmark_ids=[b.landmark.id for b in landmarks],
            points=np.array([b.landmark.position for b in landmarks], dtype=float).reshape(-1, 3),
            landmark_fixed=[b.fixed for b in landmarks],
            obs_frame=of,
            obs_landmark=ol,
            z=np.array([o.obs.z for o in observations], dtype=float).reshape(-1, 3),
            sigma2=[o.cov.sigma2 for o in observations],
            delta=[o.loss.delta for o in observations],
            delta_max=dmax.pop(),
        )

    @property
    def n_obs(self) -> int:
        return self.z.shape[0]


@dataclass
class BaState:
    """World-to-camera rotations/translations and landmark positions."""

    Rcw: np.ndarray
    tcw: np.ndarray
    points: np.ndarray

    @classmethod
    def from_poses(cls, poses: Sequence[Pose], points: np.ndarray) -> BaState:
        inv = [p.normalized().inverse() for p in poses]
        Rcw = np.array([p.R for p in inv]).reshape(-1, 3, 3)
        tcw = np.array([p.t for p in inv]).reshape(-1, 3)
        return cls(Rcw, tcw, np.array(points, dtype=float).reshape(-1, 3))

    @classmethod
    def initial(cls, problem: BaProblem) -> BaState:
        return cls.from_poses(problem.poses, problem.points)

    def copy(self) -> BaState:
        return BaState(self.Rcw.copy(), self.tcw.copy(), self.points.copy())

    def poses(self) -> list[Pose]:
        return [Pose(R, t).normalized().inverse() for R, t in zip(self.Rcw, self.tcw)]


def _segment_sum(idx: np.ndarray, vals: np.ndarray, size: int) -> np.ndarray:
    """``out[k] = sum(vals[idx == k])``; a sparse product, much faster than
    ``np.add.at`` for block-shaped values."""
    n = idx.shape[0]
    out_shape = (size,) + vals.shape[1:]
    if n == 0 or size == 0:
        return np.zeros(out_shape)
    if size == 1:
        return vals.sum(axis=0, keepdims=True)
    M = scipy.sparse.csr_matrix((np.ones(n), (idx, np.arange(n))), shape=(size, n))
    return np.asarray(M @ vals.reshape(n, -1)).reshape(out_shape)


# dense Schur path while frames x landmarks stays below this many blocks
_DENSE_SCHUR_LIMIT = 200_000


class _Layout:
    """Parameter ordering and Schur pair structure for one problem."""

    def __init__(self, problem: BaProblem):
        self.free_frames = np.flatnonzero(~problem.frame_fixed)
        self.free_lms = np.flatnonzero(~problem.landmark_fixed)
        F, M = len(problem.poses), problem.points.shape[0]
        self.frame_slot = np.full(F, -1, dtype=np.int64)
        self.frame_slot[self.free_frames] = np.arange(self.free_frames.size)
        self.lm_slot = np.full(M, -1, dtype=np.int64)
        self.lm_slot[self.free_lms] = np.arange(self.free_lms.size)
        self.nf = self.free_frames.size
        self.nl = self.free_lms.size
        self.obs_fs = self.frame_slot[problem.obs_frame]
        self.obs_ls = self.lm_slot[problem.obs_landmark]

        # observation pairs sharing a free landmark, both on free frames
        both = np.flatnonzero((self.obs_fs >= 0) & (self.obs_ls >= 0))
        self.cross_obs = both
        if both.size:
            order = both[np.argsort(self.obs_ls[both], kind="stable")]
            lms = self.obs_ls[order]
            starts = np.flatnonzero(np.r_[True, lms[1:] != lms[:-1]])
            counts = np.diff(np.r_[starts, lms.size])
            group_of = np.repeat(np.arange(starts.size), counts)
            reps = counts[group_of]
            a = np.repeat(order, reps)
            first = np.repeat(starts[group_of], reps)
            offs = np.arange(a.size) - np.repeat(np.cumsum(reps) - reps, reps)
            b = order[first + offs]
            self.pair_a, self.pair_b = a, b
        else:
            self.pair_a = self.pair_b = np.zeros(0, dtype=np.int64)

    @property
    def n_params(self) -> int:
        return 6 * self.nf + 3 * self.nl


@dataclass
class _Eval:
    eps: np.ndarray
    pc: np.ndarray
    valid: np.ndarray
    x: np.ndarray
    cost: float


def _evaluate(problem: BaProblem, state: BaState, config: SolverConfig) -> _Eval:
    n = problem.n_obs
    if n == 0:
        return _Eval(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, bool), np.zeros(0), 0.0)
    Rc = state.Rcw[problem.obs_frame]
    tc = state.tcw[problem.obs_frame]
    pw = state.points[problem.obs_landmark]
    pc = (Rc @ pw[:, :, None])[:, :, 0] + tc
    valid = pc[:, 2] > DEPTH_EPSILON
    safe_z = np.where(valid, pc[:, 2], 1.0)
    intr = problem.intrinsics
    ul = intr.fx * pc[:, 0] / safe_z + intr.cx
    v = intr.fy * pc[:, 1] / safe_z + intr.cy
    ur = ul - intr.fx * intr.baseline / safe_z
    eps = problem.z - np.stack([ul, v, ur], axis=1)
    eps[~valid] = 0.0
    x = np.einsum("ni,ni->n", eps, eps) / problem.sigma2
    x = np.where(valid, x, config.clamp_sq_error)
    terms = huber_eval(x, problem.delta, config.branch)
    return _Eval(eps, pc, valid, x, float(np.sum(terms)))


def total_cost(
    problem: BaProblem,
    poses: Sequence[Pose] | None = None,
    landmarks: np.ndarray | None = None,
    config: SolverConfig | None = None,
) -> float:
    """Robust BA objective at the given camera-to-world poses and landmarks
    (defaults: the problem's initial values)."""
    poses = problem.poses if poses is None else poses
    landmarks = problem.points if landmarks is None else landmarks
    return _evaluate(problem, BaState.from_poses(poses, landmarks), config or SolverConfig()).cost


@dataclass
class _Linear:
    Hpp: np.ndarray  # (nf, 6, 6)
    Hll: np.ndarray  # (nl, 3, 3)
    Hpl: np.ndarray  # (n_obs, 6, 3), zero where not cross
    gp: np.ndarray  # (nf, 6)  gradient / 2
    gl: np.ndarray  # (nl, 3)


def _linearize(problem: BaProblem, layout: _Layout, state: BaState, ev: _Eval, config) -> _Linear:
    n = problem.n_obs
    w = huber_weight(ev.x, problem.delta, config.branch) / problem.sigma2
    w = np.where(ev.valid, w, 0.0)
    safe_pc = np.where(ev.valid[:, None], ev.pc, np.array([0.0, 0.0, 1.0]))
    Jx, Jl = residual_jacobians(np.eye(3), safe_pc, problem.intrinsics)
    # residual_jacobians used identity R above; rotate the point Jacobian per frame
    Jl = Jl @ state.Rcw[problem.obs_frame]
    Hpp = np.zeros((layout.nf, 6, 6))
    Hll = np.zeros((layout.nl, 3, 3))
    gp = np.zeros((layout.nf, 6))
    gl = np.zeros((layout.nl, 3))
    Hpl = np.zeros((n, 6, 3))
    fs, ls = layout.obs_fs, layout.obs_ls
    mf = fs >= 0
    if mf.any():
        wJx = w[mf, None, None] * Jx[mf]
        Hpp = _segment_sum(fs[mf], wJx.transpose(0, 2, 1) @ Jx[mf], layout.nf)
        gp = _segment_sum(fs[mf], (wJx.transpose(0, 2, 1) @ ev.eps[mf][:, :, None])[:, :, 0], layout.nf)
    ml = ls >= 0
    if ml.any():
        wJl = w[ml, None, None] * Jl[ml]
        Hll = _segment_sum(ls[ml], wJl.transpose(0, 2, 1) @ Jl[ml], layout.nl)
        gl = _segment_sum(ls[ml], (wJl.transpose(0, 2, 1) @ ev.eps[ml][:, :, None])[:, :, 0], layout.nl)
    c = layout.cross_obs
    if c.size:
        Hpl[c] = (w[c, None, None] * Jx[c]).transpose(0, 2, 1) @ Jl[c]
    return _Linear(Hpp, Hll, Hpl, gp, gl)


def _gradient_vector(lin: _Linear) -> np.ndarray:
    return 2.0 * np.concatenate([lin.gp.reshape(-1), lin.gl.reshape(-1)])


def _solve_damped(layout: _Layout, lin: _Linear, lam: float) -> np.ndarray | None:
    """Solve ``(H + lam * D) dx = -g`` through the landmark Schur complement.

    Returns the stacked step ``[poses (6 nf), landmarks (3 nl)]`` or ``None``
    when the reduced system is singular.
    """
    nf, nl = layout.nf, layout.nl
    idx6 = np.arange(6)
    idx3 = np.arange(3)
    Hpp = lin.Hpp.copy()
    Hll = lin.Hll.copy()
    if lam > 0:
        Hpp[:, idx6, idx6] += lam * np.maximum(lin.Hpp[:, idx6, idx6], 1e-12)
        Hll[:, idx3, idx3] += lam * np.maximum(lin.Hll[:, idx3, idx3], 1e-12)
    bp = -lin.gp
    bl = -lin.gl

    Hll_inv = _inv3_batch(Hll) if nl else np.zeros((0, 3, 3))
    c = layout.cross_obs
    dense = c.size and nf * nl <= _DENSE_SCHUR_LIMIT

    if dense:
        # (6 nf, nl, 3) coupling matrix; duplicate (frame, landmark) pairs add up
        key = layout.obs_fs[c] * nl + layout.obs_ls[c]
        W = _segment_sum(key, lin.Hpl[c], nf * nl).reshape(nf, nl, 6, 3)
        W = W.transpose(0, 2, 1, 3).reshape(6 * nf, nl, 3)
        Y = (W.transpose(1, 0, 2) @ Hll_inv).transpose(1, 0, 2)  # W Hll^-1 per landmark
        Wf = W.reshape(6 * nf, 3 * nl)
        Yf = Y.reshape(6 * nf, 3 * nl)

    if nf:
        S = np.zeros((nf, nf, 6, 6))
        S[np.arange(nf), np.arange(nf)] = Hpp
        S = S.transpose(0, 2, 1, 3).reshape(6 * nf, 6 * nf)
        rhs = bp.reshape(-1).copy()
        if dense:
            S -= Yf @ Wf.T
            rhs -= Yf @ bl.reshape(-1)
        elif layout.pair_a.size:
            a, b = layout.pair_a, layout.pair_b
            la = layout.obs_ls[a]
            Yp = lin.Hpl[a] @ Hll_inv[la]
            contrib = Yp @ lin.Hpl[b].transpose(0, 2, 1)
            blocks = _segment_sum(layout.obs_fs[a] * nf + layout.obs_fs[b], contrib, nf * nf)
            S -= blocks.reshape(nf, nf, 6, 6).transpose(0, 2, 1, 3).reshape(6 * nf, 6 * nf)
            Yc = lin.Hpl[c] @ Hll_inv[layout.obs_ls[c]]
            rhs -= _segment_sum(layout.obs_fs[c], (Yc @ bl[layout.obs_ls[c]][:, :, None])[:, :, 0], nf).reshape(-1)
        S = 0.5 * (S + S.T)
        try:
            cf = scipy.linalg.cho_factor(S, check_finite=True)
            dp = scipy.linalg.cho_solve(cf, rhs).reshape(nf, 6)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(dp)):
            return None
    else:
        dp = np.zeros((0, 6))

    if nl:
        r = bl.copy()
        if dense:
            r -= (Wf.T @ dp.reshape(-1)).reshape(nl, 3)
        elif c.size:
            r -= _segment_sum(layout.obs_ls[c], (lin.Hpl[c].transpose(0, 2, 1) @ dp[layout.obs_fs[c]][:, :, None])[:, :, 0], nl)
        dl = (Hll_inv @ r[:, :, None])[:, :, 0]
    else:
        dl = np.zeros((0, 3))
    return np.concatenate([dp.reshape(-1), dl.reshape(-1)])


def _inv3_batch(A: np.ndarray) -> np.ndarray:
    """Inverses of ``(n, 3, 3)`` matrices by cofactors; singular blocks map to 0
    (their landmark then takes no step)."""
    a, b, c = A[:, 0, 0], A[:, 0, 1], A[:, 0, 2]
    d, e, f = A[:, 1, 0], A[:, 1, 1], A[:, 1, 2]
    g, h, i = A[:, 2, 0], A[:, 2, 1], A[:, 2, 2]
    co = np.stack(
        [
            e * i - f * h, c * h - b * i, b * f - c * e,
            f * g - d * i, a * i - c * g, c * d - a * f,
            d * h - e * g, b * g - a * h, a * e - b * d,
        ],
        axis=1,
    ).reshape(-1, 3, 3)
    det = a * co[:, 0, 0] + b * co[:, 1, 0] + c * co[:, 2, 0]
    scale = np.abs(A).reshape(-1, 9).max(axis=1) ** 3
    ok = np.abs(det) > 1e-14 * scale
    safe = np.where(ok, det, 1.0)
    return np.where(ok[:, None, None], co / safe[:, None, None], 0.0)


def retract(problem: BaProblem, state: BaState, dx: np.ndarray, layout: _Layout | None = None) -> BaState:
    """Apply a stacked step: left twist on each free ``T_cw``, additive on
    free landmarks."""
    layout = layout or _Layout(problem)
    out = state.copy()
    nf = layout.nf
    if nf:
        dR, dt = se3_exp_batch(dx[: 6 * nf].reshape(nf, 6))
        f = layout.free_frames
        out.Rcw[f] = dR @ state.Rcw[f]
        out.tcw[f] = (dR @ state.tcw[f][:, :, None])[:, :, 0] + dt
    if layout.nl:
        out.points[layout.free_lms] += dx[6 * nf :].reshape(-1, 3)
    return out


def cost_gradient(problem: BaProblem, state: BaState, config: SolverConfig | None = None) -> np.ndarray:
    """Analytic gradient of :func:`total_cost` in the :func:`retract` chart."""
    config = config or SolverConfig()
    layout = _Layout(problem)
    ev = _evaluate(problem, state, config)
    return _gradient_vector(_linearize(problem, layout, state, ev, config))


def gauss_newton_step(problem: BaProblem, state: BaState, config: SolverConfig | None = None) -> np.ndarray:
    """Undamped IRLS Gauss-Newton step at ``state`` (Schur path)."""
    config = config or SolverConfig()
    layout = _Layout(problem)
    ev = _evaluate(problem, state, config)
    step = _solve_damped(layout, _linearize(problem, layout, state, ev, config), 0.0)
    if step is None:
        raise np.linalg.LinAlgError("normal equations are singular")
    return step


@dataclass
class BaSolution:
    poses: dict[int, Pose]
    landmarks: dict[int, np.ndarray]
    final_cost: float
    initial_cost: float
    iterations: int
    converged: bool
    status: str
    per_observation_residuals: np.ndarray
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cost_history: list[float] = field(default_factory=list)
    state: BaState | None = None


def solve(problem: BaProblem, config: SolverConfig | None = None, state: BaState | None = None) -> BaSolution:
    """Levenberg-Marquardt with IRLS reweighting; never raises on numerical
    trouble, it reports ``status="diverged"`` instead."""
    config = config or SolverConfig()
    layout = _Layout(problem)
    state = BaState.initial(problem) if state is None else state.copy()
    ev = _evaluate(problem, state, config)
    initial_cost = ev.cost
    history = [ev.cost]
    trace: list[tuple] = []
    lam = config.lambda_init
    status = "max_iterations"
    converged = False
    it = 0
    if layout.n_params == 0 or ev.cost <= config.abs_tol:
        status, converged = "converged", True
    else:
        while it < config.max_iterations:
            it += 1
            lin = _linearize(problem, layout, state, ev, config)
            g = _gradient_vector(lin)
            if np.max(np.abs(g)) < config.grad_tol:
                status, converged = "converged", True
                break
            accepted = False
            singular = False
            while lam <= config.lambda_max:
                step = _solve_damped(layout, lin, lam)
                if step is None:
                    singular = True
                    lam *= config.lambda_up
                    continue
                singular = False
                cand = retract(problem, state, step, layout)
                ev_new = _evaluate(problem, cand, config)
                trace.append((it, ev.cost, ev_new.cost, lam, ev_new.cost < ev.cost))
                if np.isfinite(ev_new.cost) and ev_new.cost < ev.cost:
                    accepted = True
                    break
                lam *= config.lambda_up
            if not accepted:
                # no descent direction at any damping: stalled at a minimum
                # unless the system was singular throughout
                status = "diverged" if singular else "converged"
                converged = not singular
                break
            rel = (ev.cost - ev_new.cost) / max(ev.cost, 1e-300)
            state, ev = cand, ev_new
            history.append(ev.cost)
            lam = max(lam * config.lambda_down, 1e-15)
            if rel < config.rel_tol or ev.cost <= config.abs_tol:
                status, converged = "converged", True
                break

    if config.trace_path:
        _write_trace(config.trace_path, trace, layout)

    return BaSolution(
        poses={fid: p for fid, p in zip(problem.frame_ids, state.poses())},
        landmarks={lid: state.points[i].copy() for i, lid in enumerate(problem.landmark_ids)},
        final_cost=ev.cost,
        initial_cost=initial_cost,
        iterations=it,
        converged=converged,
        status=status,
        per_observation_residuals=ev.eps.copy(),
        flagged=np.flatnonzero(~ev.valid),
        cost_history=history,
        state=state,
    )


def _write_trace(path: str, trace: list[tuple], layout: _Layout) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "candidate_cost", "lambda", "accepted"])
        for row in trace:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), int(row[4])])
    nf = layout.nf
    pattern = np.eye(nf, dtype=bool)
    if layout.pair_a.size:
        pattern[layout.obs_fs[layout.pair_a], layout.obs_fs[layout.pair_b]] = True
    sp = p.with_name(p.stem + "_sparsity.csv")
    with sp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_frame_slot", "col_frame_slot"])
        for i, j in zip(*np.nonzero(pattern)):
            w.writerow([int(i), int(j)])


@dataclass
class PoseUpdate:
    pose: Pose  # camera-to-world
    x: np.ndarray  # final Mahalanobis squared errors per observation
    usable: np.ndarray  # positive weight and projectable
    converged: bool
    iterations: int


def marginal_pose_update(
    problem: BaProblem,
    frame_id: int,
    config: SolverConfig | None = None,
    min_observations: int = 4,
) -> PoseUpdate:
    """Optimise one frame's pose with every landmark held fixed.

    Raises :class:`TrackingFailure` when fewer than ``min_observations``
    observations carry information (positive delta, positive depth) or the
    solver fails.
    """
    config = config or SolverConfig()
    fi = problem.frame_ids.index(frame_id)
    sel = np.flatnonzero(problem.obs_frame == fi)
    used_lm, inv = np.unique(problem.obs_landmark[sel], return_inverse=True)
    sub = BaProblem(
        intrinsics=problem.intrinsics,
        frame_ids=[frame_id],
        poses=[problem.poses[fi]],
        frame_fixed=[False],
        landmark_ids=[problem.landmark_ids[i] for i in used_lm],
        points=problem.points[used_lm],
        landmark_fixed=np.ones(used_lm.size, dtype=bool),
        obs_frame=np.zeros(sel.size, dtype=np.int64),
        obs_landmark=inv,
        z=problem.z[sel],
        sigma2=problem.sigma2[sel],
        delta=problem.delta[sel],
        delta_max=problem.delta_max,
    ) if sel.size else None
    if sub is None:
        raise TrackingFailure("no observations")
    ev0 = _evaluate(sub, BaState.initial(sub), config)
    informative = ev0.valid & (sub.delta > 0)
    if int(informative.sum()) < min_observations:
        raise TrackingFailure(f"only {int(informative.sum())} informative observations")
    sol = solve(sub, config)
    if sol.status == "diverged":
        raise TrackingFailure("pose optimisation diverged")
    ev = _evaluate(sub, sol.state, config)
    w = huber_weight(ev.x, sub.delta, config.branch)
    usable = ev.valid & (w > 0)
    if int(usable.sum()) < min_observations:
        raise TrackingFailure(f"only {int(usable.sum())} usable observations after optimisation")
    if not all(math.isfinite(v) for v in sol.poses[frame_id].t):
        raise TrackingFailure("non-finite pose")
    return PoseUpdate(sol.poses[frame_id], ev.x, usable, sol.converged, sol.iterations)
