"""SE(3) algebra, the rectified stereo pinhole model and reprojection errors.

Conventions
-----------
* A twist is a 6-vector ``(rho, phi)``: translational part first, rotational
  part second (meters, radians).
* ``Pose`` is a rigid transform ``x_a = R @ x_b + t``.  Trajectories store
  camera-to-world poses; projection functions take the world-to-camera pose.
* Pose Jacobians use a left perturbation of the world-to-camera transform,
  ``T_cw <- exp(xi) @ T_cw``.
* A stereo observation is ``(u_left, v, u_right)`` in pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

DEPTH_EPSILON = 1e-3
_SMALL_ANGLE = 1e-6
BRANCH_CUT_TOL = 1e-6


class ProjectionError(ValueError):
    """Raised when a point is at or behind the camera plane."""


class BranchCutWarning(RuntimeWarning):
    """Rotation angle is within tolerance of pi; the log is ill-conditioned."""


def hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]], dtype=float
    )


def hat_batch(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices for an ``(N, 3)`` array of vectors."""
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=float)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = math.sqrt(float(phi @ phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` on the principal branch (angle in [0, pi])."""
    w = vee(R - R.T)
    s = 0.5 * math.sqrt(float(w @ w))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta < _SMALL_ANGLE:
        return 0.5 * w
    if math.pi - theta > 1e-3:
        return w * (theta / (2.0 * s))
    # near pi the antisymmetric part vanishes; recover the axis from R + R^T
    S = 0.5 * (R + R.T) - c * np.eye(3)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / max(float(np.linalg.norm(S[:, i])), 1e-300)
    if float(axis @ w) < 0.0:
        axis = -axis
    return axis * theta


def _left_jacobian_coeffs(theta: float) -> tuple[float, float]:
    if theta < 1e-4:
        t2 = theta * theta
        return 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    return (1.0 - math.cos(theta)) / t2, (theta - math.sin(theta)) / (t2 * theta)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(phi @ phi))
    K = hat(phi)
    a, b = _left_jacobian_coeffs(theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = math.sqrt(float(phi @ phi))
    K = hat(phi)
    if theta < 1e-4:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = 0.5 * theta
        coeff = (1.0 - half / math.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_tq(cls, tq) -> Pose:
        """From a 7-tuple ``(tx, ty, tz, qx, qy, qz, qw)``."""
        tq = np.asarray(tq, dtype=float).reshape(7)
        pose = cls(Rotation.from_quat(tq[3:]).as_matrix(), tq[:3])
        # remember the encoding so that read -> write is exact
        object.__setattr__(pose, "_tq", [float(x) for x in tq])
        return pose

    def to_tq(self) -> list[float]:
        cached = self.__dict__.get("_tq")
        if cached is not None:
            return list(cached)
        q = Rotation.from_matrix(self.R).as_quat()
        # canonical sign so that the encoding is unique
        if q[3] < 0:
            q = -q
        return [float(x) for x in self.t] + [float(x) for x in q]

    def normalized(self) -> Pose:
        """Same pose with ``R`` projected back onto SO(3); long chains of
        compositions otherwise drift away from orthonormality."""
        return Pose(project_to_so3(self.R), self.t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: Pose) -> Pose:
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> Pose:
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def rotation_angle(self) -> float:
        c = 0.5 * (float(np.trace(self.R)) - 1.0)
        return math.acos(min(1.0, max(-1.0, c)))

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=atol, rtol=0)
            and np.allclose(self.t, other.t, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        rv = so3_log(self.R)
        return f"Pose(t={np.round(self.t, 6).tolist()}, rotvec={np.round(rv, 6).tolist()})"


def exp_map(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log_map(pose: Pose) -> np.ndarray:
    """Twist ``(rho, phi)`` with ``exp_map(log_map(P)) == P``.

    Emits :class:`BranchCutWarning` when the rotation angle is within
    ``BRANCH_CUT_TOL`` of pi; the result is still returned.
    """
    phi = so3_log(pose.R)
    theta = math.sqrt(float(phi @ phi))
    if math.pi - theta < BRANCH_CUT_TOL:
        warnings.warn(
            f"rotation angle {theta:.9f} is at the log branch cut", BranchCutWarning,
            stacklevel=2,
        )
    rho = so3_left_jacobian_inv(phi) @ pose.t
    return np.concatenate([rho, phi])


def se3_exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised exp for an ``(N, 6)`` array; returns ``(R (N,3,3), t (N,3))``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    rho, phi = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    K = hat_batch(phi)
    K2 = K @ K
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    t2 = th * th
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / (t2 * th))
    eye = np.eye(3)[None]
    R = eye + a[:, None, None] * K + b[:, None, None] * K2
    V = eye + b[:, None, None] * K + c[:, None, None] * K2
    return R, (V @ rho[:, :, None])[:, :, 0]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError("fx, fy and baseline must be strictly positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray
    context_class: int = 0
    level: int = 0


@dataclass(frozen=True)
class StereoObservation:
    frame_id: int
    landmark_id: int
    u_left: float
    v: float
    u_right: float
    level: int = 0

    @property
    def z(self) -> np.ndarray:
        return np.array([self.u_left, self.v, self.u_right], dtype=float)

    def in_image(self, intr: CameraIntrinsics) -> bool:
        return (
            0 <= self.u_left < intr.image_width
            and 0 <= self.u_right < intr.image_width
            and 0 <= self.v < intr.image_height
        )


def project_points(
    R: np.ndarray, t: np.ndarray, intr: CameraIntrinsics, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Project ``(N, 3)`` world points; returns ``(z_hat (N,3), p_cam (N,3))``.

    No depth check; callers inspect ``p_cam[:, 2]``.
    """
    pc = np.asarray(points, dtype=float) @ R.T + t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = 1.0 / z
    ul = intr.fx * pc[:, 0] * inv_z + intr.cx
    v = intr.fy * pc[:, 1] * inv_z + intr.cy
    ur = ul - intr.fx * intr.baseline * inv_z
    return np.stack([ul, v, ur], axis=1), pc


def projection_jacobian(pc: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """d(u_l, v, u_r)/d(p_cam) for ``(N, 3)`` camera-frame points."""
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    iz2 = iz * iz
    J = np.zeros((pc.shape[0], 3, 3))
    J[:, 0, 0] = intr.fx * iz
    J[:, 0, 2] = -intr.fx * x * iz2
    J[:, 1, 1] = intr.fy * iz
    J[:, 1, 2] = -intr.fy * y * iz2
    J[:, 2, 0] = intr.fx * iz
    J[:, 2, 2] = -intr.fx * (x - intr.baseline) * iz2
    return J


def residual_jacobians(
    R: np.ndarray, pc: np.ndarray, intr: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of ``eps = z - z_hat`` w.r.t. a left twist on ``T_cw`` and
    the world point; shapes ``(N, 3, 6)`` and ``(N, 3, 3)``."""
    Jp = projection_jacobian(pc, intr)
    n = pc.shape[0]
    dpc = np.zeros((n, 3, 6))
    dpc[:, :, :3] = np.eye(3)
    dpc[:, :, 3:] = -hat_batch(pc)
    J_pose = -(Jp @ dpc)
    J_point = -(Jp @ R)
    return J_pose, J_point


def project_stereo(
    pose_world_to_cam: Pose, intr: CameraIntrinsics, point_world
) -> np.ndarray:
    z_hat, pc = project_points(
        pose_world_to_cam.R, pose_world_to_cam.t, intr,
        np.asarray(point_world, dtype=float).reshape(1, 3),
    )
    if not pc[0, 2] > DEPTH_EPSILON:
        raise ProjectionError(f"point depth {pc[0, 2]:.6g} m is behind the camera")
    return z_hat[0]


def reprojection_error(
    obs: StereoObservation,
    pose_world_to_cam: Pose,
    intr: CameraIntrinsics,
    landmark: Landmark,
) -> np.ndarray:
    """Observed minus predicted stereo measurement, pixels."""
    return obs.z - project_stereo(pose_world_to_cam, intr, landmark.position)


def reprojection_jacobians(
    pose_world_to_cam: Pose, intr: CameraIntrinsics, point_world
) -> tuple[np.ndarray, np.ndarray]:
    pc = pose_world_to_cam.apply(np.asarray(point_world, dtype=float).reshape(1, 3))
    if not pc[0, 2] > DEPTH_EPSILON:
        raise ProjectionError(f"point depth {pc[0, 2]:.6g} m is behind the camera")
    Jx, Jl = residual_jacobians(pose_world_to_cam.R, pc, intr)
    return Jx[0], Jl[0]


def triangulate_stereo(
    z: np.ndarray, intr: CameraIntrinsics, min_disparity: float = 1e-6
) -> np.ndarray | None:
    """Camera-frame point from one stereo measurement, or ``None`` when the
    disparity is not positive."""
    ul, v, ur = z
    disp = ul - ur
    if disp <= min_disparity:
        return None
    depth = intr.fx * intr.baseline / disp
    x = (ul - intr.cx) * depth / intr.fx
    y = (v - intr.cy) * depth / intr.fy
    return np.array([x, y, depth])
