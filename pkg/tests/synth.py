"""Synthetic BA problems and independent oracles shared by the solver tests
and the acceptance suite."""

import numpy as np

from ivba.ba_solver import BaProblem, BaState, SolverConfig, cost_gradient, gauss_newton_step, retract, total_cost
from ivba.frontend_sim.world import default_intrinsics
from ivba.geometry import Pose, exp_map, project_points, reprojection_jacobians
from ivba.robust_loss import DELTA_MAX, huber_weight

INTR = default_intrinsics()


def ground_truth(rng, n_frames=5, n_landmarks=200):
    """Camera-to-world poses stepping along x, landmarks 4-15 m ahead."""
    poses = [
        exp_map(np.r_[0.5 * k, 0.05 * rng.normal(size=2), 0.02 * rng.normal(size=3)])
        for k in range(n_frames)
    ]
    pts = np.c_[
        rng.uniform(-4, 4 + 0.5 * n_frames, n_landmarks),
        rng.uniform(-2, 2, n_landmarks),
        rng.uniform(4, 15, n_landmarks),
    ]
    return poses, pts


def observe(poses, pts, rng=None, sigma=0.0, outlier_rate=0.0, spread=30.0):
    """Every landmark in every frame; returns (obs_frame, obs_landmark, z, eps, outlier)."""
    of, ol, zs = [], [], []
    for f, P in enumerate(poses):
        cw = P.inverse()
        z, _ = project_points(cw.R, cw.t, INTR, pts)
        of.append(np.full(len(pts), f))
        ol.append(np.arange(len(pts)))
        zs.append(z)
    of, ol, z = np.concatenate(of), np.concatenate(ol), np.concatenate(zs)
    eps = np.zeros_like(z)
    out = np.zeros(len(z), dtype=bool)
    if rng is not None:
        eps = rng.normal(0, sigma, z.shape) if sigma > 0 else eps
        out = rng.random(len(z)) < outlier_rate
        eps[out] = rng.uniform(-spread, spread, (int(out.sum()), 3))
    return of, ol, z + eps, eps, out


def make_problem(poses, pts, of, ol, z, delta=DELTA_MAX, fixed_frame=0, sigma2=1.0, fix_all_frames=False):
    nf = len(poses)
    ff = np.ones(nf, dtype=bool) if fix_all_frames else np.arange(nf) == fixed_frame
    return BaProblem(
        intrinsics=INTR, frame_ids=list(range(nf)), poses=list(poses), frame_fixed=ff,
        landmark_ids=list(range(len(pts))), points=pts, landmark_fixed=np.zeros(len(pts), dtype=bool),
        obs_frame=of, obs_landmark=ol, z=z, sigma2=sigma2, delta=delta,
    )


def perturb(rng, poses, pts, sig_t=0.05, sig_r=0.01, sig_l=0.05, keep=(0,)):
    out = [
        P if k in keep else exp_map(np.r_[rng.normal(0, sig_t, 3), rng.normal(0, sig_r, 3)]) @ P
        for k, P in enumerate(poses)
    ]
    return out, pts + rng.normal(0, sig_l, pts.shape)


def align(est, ref, k=0):
    """Rigidly move ``est`` so that frame ``k`` coincides with ``ref``."""
    G = ref[k] @ est[k].inverse()
    return [G @ P for P in est]


def pose_errors(est, ref):
    t = max(float(np.linalg.norm(a.t - b.t)) for a, b in zip(est, ref))
    r = max((a.inverse() @ b).rotation_angle() for a, b in zip(est, ref))
    return t, r


def dense_irls_step(problem: BaProblem, state: BaState) -> np.ndarray:
    """Weighted least-squares step built observation by observation from
    the per-point Jacobians; free frames first, then free landmarks."""
    free_f = np.flatnonzero(~problem.frame_fixed)
    free_l = np.flatnonzero(~problem.landmark_fixed)
    fcol = {f: 6 * i for i, f in enumerate(free_f)}
    lcol = {l: 6 * len(free_f) + 3 * i for i, l in enumerate(free_l)}
    P = 6 * len(free_f) + 3 * len(free_l)
    H = np.zeros((P, P))
    b = np.zeros(P)
    for i in range(problem.n_obs):
        f, l = problem.obs_frame[i], problem.obs_landmark[i]
        cw = Pose(state.Rcw[f], state.tcw[f])
        zhat, _ = project_points(cw.R, cw.t, problem.intrinsics, state.points[l][None])
        eps = problem.z[i] - zhat[0]
        x = float(eps @ eps) / problem.sigma2[i]
        w = float(huber_weight(x, problem.delta[i])) / problem.sigma2[i]
        Jx, Jl = reprojection_jacobians(cw, problem.intrinsics, state.points[l])
        J = np.zeros((3, P))
        if f in fcol:
            J[:, fcol[f]:fcol[f] + 6] = Jx
        if l in lcol:
            J[:, lcol[l]:lcol[l] + 3] = Jl
        H += w * J.T @ J
        b += w * J.T @ eps
    return -np.linalg.solve(H, b)


def irls_equivalence_error(problem: BaProblem, state: BaState) -> float:
    a = gauss_newton_step(problem, state)
    b = dense_irls_step(problem, state)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def gradient_fd_error(problem: BaProblem, state: BaState, h: float = 1e-6) -> float:
    g = cost_gradient(problem, state)
    num = np.zeros_like(g)
    for k in range(g.size):
        d = np.zeros_like(g)
        d[k] = h
        cp = total_cost(problem, retract(problem, state, d).poses(), retract(problem, state, d).points)
        cm = total_cost(problem, retract(problem, state, -d).poses(), retract(problem, state, -d).points)
        num[k] = (cp - cm) / (2 * h)
    return float(np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12))


def tight() -> SolverConfig:
    return SolverConfig(max_iterations=100, rel_tol=0.0, grad_tol=1e-10)
