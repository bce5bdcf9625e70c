"""Synthetic stereo world: trajectory, context-tagged landmarks, noisy frames.

The camera drives along a gently curving path at fixed height.  Landmarks
sit on both sides of the path in patches; every patch carries one context
class, so context is spatially coherent in the image the way real surfaces
are.  Each class has its own inlier noise level and outlier rate.

World frame: z up.  Camera frame: x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from ..errors import ConfigurationError, DegenerateSessionError
from ..geometry import CameraIntrinsics, Pose, StereoObservation, exp_map, project_points, so3_exp
from ..introspection import ContextGrid
from ..labelgen import DEFAULT_REF_COVARIANCE, ReferencePose, grid_shape

CLASS_NAMES = (
    "static-sharp",
    "vegetation-texture",
    "reflection",
    "dynamic-object",
    "shadow-edge",
)
# texture frequency, specularity, dynamic-object occupancy
CLASS_ATTRIBUTES = np.array(
    [
        [0.2, 0.0, 0.0],
        [0.9, 0.1, 0.0],
        [0.3, 1.0, 0.0],
        [0.4, 0.1, 1.0],
        [0.5, 0.3, 0.0],
    ]
)
N_ATTRIBUTES = CLASS_ATTRIBUTES.shape[1]
LEVEL_PROBS = (0.55, 0.25, 0.12, 0.08)


def descriptor_dim(n_classes: int = len(CLASS_NAMES)) -> int:
    # class mixture, attributes, empty-cell flag
    return n_classes + N_ATTRIBUTES + 1


@dataclass
class ClassNoise:
    name: str
    sigma: float
    outlier_rate: float = 0.0
    outlier_spread: float = 15.0

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ConfigurationError(f"{self.name}: sigma must be non-negative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ConfigurationError(f"{self.name}: outlier rate must be in [0, 1]")


def default_class_noise() -> list[ClassNoise]:
    return [
        ClassNoise("static-sharp", 0.5, 0.0),
        ClassNoise("vegetation-texture", 1.0, 0.03),
        ClassNoise("reflection", 2.5, 0.10),
        ClassNoise("dynamic-object", 1.5, 0.25),
        ClassNoise("shadow-edge", 1.3, 0.05),
    ]


@dataclass
class NoiseModel:
    classes: list[ClassNoise] = field(default_factory=default_class_noise)
    reference_covariance: np.ndarray = field(default_factory=lambda: DEFAULT_REF_COVARIANCE.copy())
    reference_noise: bool = True
    level_scale_factor: float = 1.2
    seed: int = 0

    @classmethod
    def noiseless(cls, n_classes: int = len(CLASS_NAMES)) -> NoiseModel:
        return cls(
            classes=[ClassNoise(CLASS_NAMES[i % len(CLASS_NAMES)], 0.0, 0.0) for i in range(n_classes)],
            reference_noise=False,
        )


@dataclass
class ClassLayout:
    name: str
    patch_weight: float
    landmarks_per_patch: int

    def __post_init__(self) -> None:
        if self.patch_weight <= 0 or self.landmarks_per_patch <= 0:
            raise ConfigurationError(f"{self.name}: every class needs patches and landmarks")


def default_layout() -> list[ClassLayout]:
    return [
        ClassLayout("static-sharp", 0.34, 30),
        ClassLayout("vegetation-texture", 0.18, 30),
        ClassLayout("reflection", 0.18, 30),
        ClassLayout("dynamic-object", 0.12, 30),
        ClassLayout("shadow-edge", 0.18, 30),
    ]


@dataclass
class Burst:
    """Dense patch of one class near the path, visible only while the camera
    odometer is within ``[start, end]``."""

    start: float
    end: float
    context_class: int = 2
    landmarks_per_meter: float = 200.0
    side: float = 1.0  # +1 left of the path, -1 right
    lateral: tuple[float, float] = (2.0, 5.0)
    ahead: tuple[float, float] = (3.0, 15.0)


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=400.0, fy=400.0, cx=320.0, cy=240.0, baseline=0.4,
                            image_width=640, image_height=480)


@dataclass
class WorldConfig:
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    length: float = 100.0
    frames_per_meter: float = 5.0
    path_amplitude: float = 3.0
    path_wavelength: float = 60.0
    camera_height: float = 1.5
    wobble: float = 0.01
    patch_length: float = 5.0
    lateral_range: tuple[float, float] = (4.0, 12.0)
    height_range: tuple[float, float] = (0.0, 5.0)
    layout: list[ClassLayout] = field(default_factory=default_layout)
    bursts: list[Burst] = field(default_factory=list)
    min_depth: float = 1.0
    max_depth: float = 40.0
    context_cell: int = 16
    context_blur: int = 5
    context_noise: float = 0.05

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise ConfigurationError("trajectory length must be positive")
        if not self.frames_per_meter > 0:
            raise ConfigurationError("frames_per_meter must be positive")
        if not self.layout:
            raise ConfigurationError("world needs at least one context class")

    @property
    def n_classes(self) -> int:
        return len(self.layout)


def burst_world(n_bursts: int = 4, **kw) -> WorldConfig:
    """Default world with evenly spaced reflection bursts."""
    world = WorldConfig(**kw)
    span = world.length / n_bursts
    world.bursts = [
        Burst(start=span * (i + 0.45), end=span * (i + 0.45) + 6.0, side=1.0 if i % 2 == 0 else -1.0)
        for i in range(n_bursts)
    ]
    return world


def burst_noise(**kw) -> NoiseModel:
    noise = NoiseModel(**kw)
    noise.classes[2] = ClassNoise("reflection", 8.0, 0.10)
    return noise


@dataclass
class Candidates:
    """In-frame stereo features of one frame, in detector order."""

    landmark_id: np.ndarray
    z: np.ndarray  # (N, 3)
    level: np.ndarray
    context_class: np.ndarray
    is_outlier: np.ndarray
    true_eps: np.ndarray  # (N, 3): z minus noiseless projection

    def __len__(self) -> int:
        return int(self.landmark_id.shape[0])

    def subset(self, idx) -> Candidates:
        return Candidates(*(a[idx] for a in (
            self.landmark_id, self.z, self.level, self.context_class, self.is_outlier, self.true_eps)))

    def observations(self, frame_id: int) -> list[StereoObservation]:
        return [
            StereoObservation(frame_id, int(l), float(z[0]), float(z[1]), float(z[2]), int(lv))
            for l, z, lv in zip(self.landmark_id, self.z, self.level)
        ]


@dataclass
class FrameBundle:
    frame_id: int
    timestamp: float
    true_pose: Pose  # camera-to-world
    reference: ReferencePose
    context: ContextGrid
    candidates: Candidates


@dataclass
class Session:
    intrinsics: CameraIntrinsics
    landmark_positions: np.ndarray  # (M, 3), row = landmark id
    landmark_classes: np.ndarray
    frames: list[FrameBundle]
    seed: int
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def length(self) -> float:
        pos = np.array([f.true_pose.t for f in self.frames])
        return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1))) if len(pos) > 1 else 0.0


# --------------------------------------------------------------------------
# trajectory


def _centerline(world: WorldConfig, s: np.ndarray) -> np.ndarray:
    k = 2.0 * math.pi / world.path_wavelength
    return np.stack([s, world.path_amplitude * np.sin(k * s), np.full_like(s, world.camera_height)], axis=1)


def _arc_to_param(world: WorldConfig, arc: np.ndarray, s_max: float) -> np.ndarray:
    fine = np.linspace(-20.0, s_max, int((s_max + 20.0) * 50) + 1)
    pts = _centerline(world, fine)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.r_[0.0, np.cumsum(seg)]
    cum -= np.interp(0.0, fine, cum)
    return np.interp(arc, cum, fine)


def trajectory(world: WorldConfig) -> tuple[list[Pose], np.ndarray]:
    """Camera-to-world poses at uniform arc-length spacing and their odometer."""
    n = int(round(world.length * world.frames_per_meter)) + 1
    arc = np.linspace(0.0, world.length, n)
    s = _arc_to_param(world, arc, world.length * 1.5 + 40.0)
    p = _centerline(world, s)
    ds = 1e-3
    fwd = _centerline(world, s + ds) - _centerline(world, s - ds)
    fwd /= np.linalg.norm(fwd, axis=1, keepdims=True)
    up = np.array([0.0, 0.0, 1.0])
    poses = []
    for i in range(n):
        zc = fwd[i]
        xc = np.cross(zc, up)
        xc /= np.linalg.norm(xc)
        yc = np.cross(zc, xc)
        R = np.stack([xc, yc, zc], axis=1)
        wob = world.wobble * np.array([math.sin(0.37 * arc[i]), math.sin(0.23 * arc[i] + 1.0), 0.5 * math.sin(0.11 * arc[i])])
        poses.append(Pose(R @ so3_exp(wob), p[i]))
    return poses, arc


# --------------------------------------------------------------------------
# landmarks


def _place_landmarks(world: WorldConfig, rng: np.random.Generator):
    """Positions, classes and odometer visibility windows of all landmarks."""
    s_end = world.length + world.max_depth + 5.0
    starts = np.arange(-10.0, s_end, world.patch_length)
    weights = np.array([c.patch_weight for c in world.layout])
    weights /= weights.sum()
    pts, cls, win = [], [], []
    for side in (-1.0, 1.0):
        patch_cls = rng.choice(len(weights), size=starts.size, p=weights)
        for s0, k in zip(starts, patch_cls):
            m = world.layout[k].landmarks_per_patch
            arc = rng.uniform(s0, s0 + world.patch_length, m)
            lat = rng.uniform(*world.lateral_range, m)
            h = rng.uniform(*world.height_range, m)
            pts.append(_offset_points(world, arc, side * lat, h))
            cls.append(np.full(m, k))
            win.append(np.tile([-np.inf, np.inf], (m, 1)))
    for b in world.bursts:
        lo, hi = b.start + b.ahead[0], b.end + b.ahead[1]
        m = int(round(b.landmarks_per_meter * (hi - lo)))
        arc = rng.uniform(lo, hi, m)
        side = np.full(m, b.side)
        lat = rng.uniform(*b.lateral, m)
        h = rng.uniform(*world.height_range, m)
        pts.append(_offset_points(world, arc, side * lat, h))
        cls.append(np.full(m, b.context_class))
        win.append(np.tile([b.start, b.end], (m, 1)))
    return np.concatenate(pts), np.concatenate(cls).astype(np.int64), np.concatenate(win)


def _offset_points(world: WorldConfig, arc: np.ndarray, lateral: np.ndarray, height: np.ndarray) -> np.ndarray:
    s = _arc_to_param(world, arc, world.length * 1.5 + 80.0)
    c = _centerline(world, s)
    d = _centerline(world, s + 1e-3) - _centerline(world, s - 1e-3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    left = np.stack([-d[:, 1], d[:, 0], np.zeros_like(s)], axis=1)
    left /= np.linalg.norm(left, axis=1, keepdims=True)
    out = c + left * lateral[:, None]
    out[:, 2] = height
    return out


# --------------------------------------------------------------------------
# context


def context_grid(
    frame_id: int,
    u: np.ndarray,
    v: np.ndarray,
    classes: np.ndarray,
    world: WorldConfig,
    rng: np.random.Generator,
) -> ContextGrid:
    """Descriptor grid from the classes of the landmarks imaged in each cell,
    blurred so that a cell describes its surrounding image region."""
    intr = world.intrinsics
    cell = world.context_cell
    rows, cols = grid_shape((intr.image_width, intr.image_height), cell)
    K = world.n_classes
    hist = np.zeros((rows, cols, K))
    r = np.clip((v // cell).astype(int), 0, rows - 1)
    c = np.clip((u // cell).astype(int), 0, cols - 1)
    np.add.at(hist, (r, c, classes), 1.0)
    if world.context_blur > 1:
        hist = uniform_filter(hist, size=(world.context_blur, world.context_blur, 1), mode="constant")
    total = hist.sum(axis=2, keepdims=True)
    empty = total[..., 0] <= 1e-12
    frac = np.where(total > 1e-12, hist / np.maximum(total, 1e-12), 0.0)
    attrs = frac @ CLASS_ATTRIBUTES[:K]
    if world.context_noise > 0:
        attrs = attrs + rng.normal(0.0, world.context_noise, attrs.shape) * (~empty)[..., None]
    attrs = np.clip(attrs, 0.0, 1.0)
    desc = np.concatenate([frac, attrs, empty[..., None].astype(float)], axis=2)
    # stored as float32 in session files; round now so that a reloaded
    # session tracks bit-identically to the in-memory one
    desc = desc.astype(np.float32).astype(float)
    return ContextGrid(frame_id, desc, cell, intr.image_width, intr.image_height)


# --------------------------------------------------------------------------
# session


def simulate_session(world: WorldConfig, noise: NoiseModel, seed: int | None = None) -> Session:
    """Deterministic synthetic session for ``seed`` (default: ``noise.seed``)."""
    seed = noise.seed if seed is None else seed
    if len(noise.classes) != world.n_classes:
        raise ConfigurationError(
            f"noise model has {len(noise.classes)} classes, world has {world.n_classes}"
        )
    ss = np.random.SeedSequence(seed)
    rng_world, rng_obs, rng_ref, rng_ctx, rng_order = (np.random.default_rng(s) for s in ss.spawn(5))
    intr = world.intrinsics
    points, classes, windows = _place_landmarks(world, rng_world)
    levels_all = rng_world.choice(len(LEVEL_PROBS), size=points.shape[0], p=LEVEL_PROBS)
    poses, arc = trajectory(world)
    sig = np.array([c.sigma for c in noise.classes])
    rho = np.array([c.outlier_rate for c in noise.classes])
    spread = np.array([c.outlier_spread for c in noise.classes])
    ref_chol = np.linalg.cholesky(noise.reference_covariance)
    frames = []
    for fid, (pose, odo) in enumerate(zip(poses, arc)):
        cw = pose.inverse()
        zhat, pc = project_points(cw.R, cw.t, intr, points)
        depth = pc[:, 2]
        vis = (depth > world.min_depth) & (depth < world.max_depth)
        vis &= (windows[:, 0] <= odo) & (odo <= windows[:, 1])
        vis &= (zhat[:, 0] >= 0) & (zhat[:, 0] < intr.image_width)
        vis &= (zhat[:, 2] >= 0) & (zhat[:, 1] >= 0) & (zhat[:, 1] < intr.image_height)
        ids = np.flatnonzero(vis)
        if ids.size == 0:
            raise DegenerateSessionError(fid)
        k = classes[ids]
        lv = levels_all[ids]
        scale = noise.level_scale_factor ** lv
        eps = rng_obs.normal(0.0, 1.0, (ids.size, 3)) * (sig[k] * scale)[:, None]
        out = rng_obs.random(ids.size) < rho[k]
        box = rng_obs.uniform(-1.0, 1.0, (ids.size, 3)) * spread[k][:, None]
        eps = np.where(out[:, None], box, eps)
        z = zhat[ids] + eps
        inside = (
            (z[:, 0] >= 0) & (z[:, 0] < intr.image_width)
            & (z[:, 2] >= 0) & (z[:, 2] < intr.image_width)
            & (z[:, 1] >= 0) & (z[:, 1] < intr.image_height)
        )
        ctx = context_grid(fid, zhat[ids, 0], zhat[ids, 1], k, world, rng_ctx)
        keep = np.flatnonzero(inside)
        order = keep[rng_order.permutation(keep.size)]
        cands = Candidates(
            landmark_id=ids[order].astype(np.int64),
            z=z[order],
            level=lv[order].astype(np.int64),
            context_class=k[order].astype(np.int64),
            is_outlier=out[order],
            true_eps=eps[order],
        )
        if noise.reference_noise:
            eta = ref_chol @ rng_ref.normal(0.0, 1.0, 6)
            ref_pose = exp_map(eta).compose(pose)
        else:
            rng_ref.normal(0.0, 1.0, 6)
            ref_pose = pose
        frames.append(
            FrameBundle(
                frame_id=fid,
                timestamp=float(odo),
                true_pose=pose,
                reference=ReferencePose(ref_pose, noise.reference_covariance),
                context=ctx,
                candidates=cands,
            )
        )
    return Session(intr, points, classes, frames, seed, CLASS_NAMES[: world.n_classes])
