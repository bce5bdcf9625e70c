"""Self-supervised costmap labels for training the introspection model.

For every frame of a prior tracking run:

1. compare the estimated camera pose with a loose reference pose and skip
   the frame when their Mahalanobis distance fails a chi-square test;
2. score each matched feature by its Mahalanobis reprojection error against
   the estimated map, squashed to [0, 1];
3. regress the sparse scores onto a regular grid with a Gaussian process and
   keep a mask of the cells whose posterior std is small enough to train on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .errors import ConfigurationError
from .geometry import CameraIntrinsics, Pose, log_map, project_points
from .robust_loss import DELTA_MAX, level_sigma2

CHI2_DOF = 6
COST_CAP = DELTA_MAX
DEFAULT_REF_COVARIANCE = np.diag([0.01, 0.01, 0.01, 0.0003, 0.0003, 0.0003])


@dataclass(frozen=True, eq=False)
class ReferencePose:
    pose: Pose  # camera-to-world
    covariance: np.ndarray = field(default_factory=lambda: DEFAULT_REF_COVARIANCE.copy())

    def __post_init__(self) -> None:
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (6, 6) or not np.allclose(cov, cov.T, atol=1e-15):
            raise ConfigurationError("reference covariance must be a symmetric 6x6 matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigurationError("reference covariance is not positive definite") from None
        object.__setattr__(self, "covariance", cov)


def gate_threshold(alpha: float = 0.05, dof: int = CHI2_DOF) -> float:
    return float(chi2.ppf(1.0 - alpha, dof))


def pose_mahalanobis(estimated: Pose, reference: ReferencePose) -> float:
    dT = log_map(estimated.compose(reference.pose.inverse()))
    cf = scipy.linalg.cho_factor(reference.covariance)
    return float(dT @ scipy.linalg.cho_solve(cf, dT))


def gate_frame(estimated: Pose, reference: ReferencePose, alpha: float = 0.05) -> tuple[bool, float]:
    """Chi-square test of the estimated pose against the reference.

    Returns ``(passed, d)`` where ``d`` is the squared Mahalanobis distance of
    ``log(estimated @ reference^-1)``.
    """
    d = pose_mahalanobis(estimated, reference)
    return d <= gate_threshold(alpha), d


def normalize_cost(raw, cost_cap: float = COST_CAP):
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise ValueError("raw cost must be non-negative")
    if cost_cap <= 0:
        raise ValueError("cost_cap must be positive")
    out = np.minimum(raw / cost_cap, 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CostSample:
    u: float
    v: float
    raw_cost: float
    normalized_cost: float


def _overlap_counts(n_pixels: int, cell: int, n_cells: int, block: int) -> np.ndarray:
    p = np.arange(n_pixels)
    k = np.minimum(p // cell, n_cells - 1)
    b = p // block
    A = np.zeros((math.ceil(n_pixels / block), n_cells))
    np.add.at(A, (b, k), 1.0)
    return A


@dataclass
class CostMap:
    """Grid of feature costs in [0, 1]; cell ``[r, c]`` covers pixels
    ``v in [r*l, (r+1)*l)``, ``u in [c*l, (c+1)*l)``."""

    width: int
    height: int
    cell_size: int
    values: np.ndarray
    uncertainty: np.ndarray
    mask: np.ndarray
    mask_threshold: float = float("inf")
    frame_id: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cell_index(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        rows, cols = self.values.shape
        r = np.clip(np.floor(np.asarray(v, dtype=float) / self.cell_size).astype(int), 0, rows - 1)
        c = np.clip(np.floor(np.asarray(u, dtype=float) / self.cell_size).astype(int), 0, cols - 1)
        return r, c

    def value_at(self, u, v):
        """Cost at pixel(s), matching the nearest-neighbour full-resolution image."""
        r, c = self.cell_index(u, v)
        return self.values[r, c]

    def full_resolution(self) -> np.ndarray:
        vv, uu = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return self.value_at(uu, vv)

    def pixel_sums(self, block: int) -> np.ndarray:
        """Sum of the full-resolution costmap over ``block x block`` pixel tiles.

        Computed as ``A_r @ values @ A_c.T`` where ``A[b, k]`` counts the
        pixels of tile ``b`` that fall in cell ``k`` (with edge clamping).
        """
        rows, cols = self.values.shape
        A_r = _overlap_counts(self.height, self.cell_size, rows, block)
        A_c = _overlap_counts(self.width, self.cell_size, cols, block)
        return A_r @ self.values @ A_c.T

    # -- persistence: flat little-endian binary + JSON sidecar ---------------
    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        bin_path = stem.with_suffix(".bin")
        meta_path = stem.with_suffix(".json")
        with bin_path.open("wb") as fh:
            fh.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.uncertainty, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.mask, dtype="u1").tobytes())
        meta = {
            "format": "ivba-costmap-v1",
            "frame_id": self.frame_id,
            "width": self.width,
            "height": self.height,
            "cell_size": self.cell_size,
            "rows": int(self.values.shape[0]),
            "cols": int(self.values.shape[1]),
            "mask_threshold": _json_float(self.mask_threshold),
            "layout": ["values:<f4", "uncertainty:<f4", "mask:u1"],
            "binary": bin_path.name,
        }
        meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return bin_path, meta_path

    @classmethod
    def load(cls, stem: str | Path) -> CostMap:
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        rows, cols = meta["rows"], meta["cols"]
        n = rows * cols
        raw = (stem.parent / meta["binary"]).read_bytes()
        if len(raw) != 9 * n:
            raise ValueError(f"{meta['binary']}: expected {9 * n} bytes, found {len(raw)}")
        vals = np.frombuffer(raw[: 4 * n], dtype="<f4").reshape(rows, cols).astype(float)
        unc = np.frombuffer(raw[4 * n : 8 * n], dtype="<f4").reshape(rows, cols).astype(float)
        mask = np.frombuffer(raw[8 * n :], dtype="u1").reshape(rows, cols).astype(bool)
        thr = meta["mask_threshold"]
        return cls(
            meta["width"], meta["height"], meta["cell_size"], vals, unc, mask,
            float("inf") if thr is None else float(thr), meta["frame_id"],
        )


def _json_float(x: float):
    return None if not math.isfinite(x) else float(x)


@dataclass
class GpParams:
    """Squared-exponential GP hyper-parameters; ``None`` length-scale means
    twice the grid cell size."""

    length_scale: float | None = None
    signal_var: float = 0.25
    noise_var: float = 0.01
    prior_mean: float = 0.5
    mask_factor: float = 0.3
    jitter: float = 1e-8

    @property
    def prior_std(self) -> float:
        return math.sqrt(self.signal_var)

    @property
    def mask_threshold(self) -> float:
        return self.mask_factor * self.prior_std


def _se_kernel(A: np.ndarray, B: np.ndarray, ell: float, s2: float) -> np.ndarray:
    d2 = (
        np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    )
    return s2 * np.exp(-0.5 * np.maximum(d2, 0.0) / (ell * ell))


def gp_posterior(
    X: np.ndarray, y: np.ndarray, Xs: np.ndarray, params: GpParams, ell: float
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and std at ``Xs`` given noisy observations ``(X, y)``."""
    m0 = params.prior_mean
    if X.shape[0] == 0:
        return np.full(Xs.shape[0], m0), np.full(Xs.shape[0], params.prior_std)
    K = _se_kernel(X, X, ell, params.signal_var)
    K[np.diag_indices_from(K)] += params.noise_var
    try:
        cf = scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        K[np.diag_indices_from(K)] += params.jitter
        try:
            cf = scipy.linalg.cho_factor(K, lower=True)
        except np.linalg.LinAlgError:
            raise ConfigurationError("GP kernel matrix is singular even with jitter") from None
    Ks = _se_kernel(X, Xs, ell, params.signal_var)
    alpha = scipy.linalg.cho_solve(cf, y - m0)
    mean = m0 + Ks.T @ alpha
    V = scipy.linalg.solve_triangular(cf[0], Ks, lower=True)
    var = params.signal_var - np.sum(V * V, axis=0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def grid_shape(image_size: tuple[int, int], cell: int) -> tuple[int, int]:
    width, height = image_size
    return max(1, height // cell), max(1, width // cell)


def cell_centers(image_size: tuple[int, int], cell: int) -> np.ndarray:
    """``(rows*cols, 2)`` array of ``(u, v)`` cell centres, row-major."""
    rows, cols = grid_shape(image_size, cell)
    vv, uu = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([uu.ravel() * cell + cell / 2.0, vv.ravel() * cell + cell / 2.0], axis=1)


def gp_regress_costmap(
    samples: Sequence[CostSample],
    grid_cell_size: int,
    image_size: tuple[int, int],
    params: GpParams | None = None,
    frame_id: int | None = None,
) -> CostMap:
    """Dense costmap from sparse normalized costs. ``image_size`` is (width, height)."""
    params = params or GpParams()
    width, height = image_size
    if width <= 0 or height <= 0 or grid_cell_size <= 0:
        raise ConfigurationError("image and cell sizes must be positive")
    ell = params.length_scale or 2.0 * grid_cell_size
    X = np.array([[s.u, s.v] for s in samples], dtype=float).reshape(-1, 2)
    y = np.array([s.normalized_cost for s in samples], dtype=float)
    centers = cell_centers(image_size, grid_cell_size)
    mean, std = gp_posterior(X, y, centers, params, ell)
    rows, cols = grid_shape(image_size, grid_cell_size)
    thr = params.mask_threshold
    std = std.reshape(rows, cols)
    return CostMap(
        width=width,
        height=height,
        cell_size=grid_cell_size,
        values=np.clip(mean.reshape(rows, cols), 0.0, 1.0),
        uncertainty=std,
        mask=std < thr,
        mask_threshold=thr,
        frame_id=frame_id,
    )


@dataclass
class LabelConfig:
    alpha: float = 0.05
    cost_cap: float = COST_CAP
    grid_cell_size: int = 16
    gp: GpParams = field(default_factory=GpParams)
    base_sigma: float = 1.0
    scale_factor: float = 1.2


@dataclass
class LabelFrame:
    """One frame's matched features against the estimated map."""

    frame_id: int
    estimated: Pose  # camera-to-world
    reference: ReferencePose
    z: np.ndarray  # (N, 3) stereo measurements
    points: np.ndarray  # (N, 3) estimated landmark positions, world frame
    levels: np.ndarray | None = None


@dataclass
class LabelResult:
    frame_id: int
    passed: bool
    mahalanobis: float
    costmap: CostMap | None
    samples: list[CostSample]

    @property
    def skipped(self) -> bool:
        return not self.passed


def feature_costs(
    frame: LabelFrame, intr: CameraIntrinsics, config: LabelConfig
) -> list[CostSample]:
    z = np.asarray(frame.z, dtype=float).reshape(-1, 3)
    if z.shape[0] == 0:
        return []
    cw = frame.estimated.inverse()
    zhat, pc = project_points(cw.R, cw.t, intr, frame.points)
    ok = pc[:, 2] > 1e-3
    levels = np.zeros(z.shape[0]) if frame.levels is None else np.asarray(frame.levels)
    sig2 = level_sigma2(levels, config.base_sigma, config.scale_factor)
    eps = z - zhat
    raw = np.einsum("ni,ni->n", eps, eps) / sig2
    out = []
    for i in np.flatnonzero(ok):
        r = float(raw[i])
        out.append(CostSample(float(z[i, 0]), float(z[i, 1]), r, float(normalize_cost(r, config.cost_cap))))
    return out


def label_frame(frame: LabelFrame, intr: CameraIntrinsics, config: LabelConfig) -> LabelResult:
    passed, d = gate_frame(frame.estimated, frame.reference, config.alpha)
    if not passed:
        return LabelResult(frame.frame_id, False, d, None, [])
    samples = feature_costs(frame, intr, config)
    cm = gp_regress_costmap(
        samples, config.grid_cell_size, (intr.image_width, intr.image_height), config.gp,
        frame_id=frame.frame_id,
    )
    return LabelResult(frame.frame_id, True, d, cm, samples)


def generate_labels(
    frames: Iterable[LabelFrame], intr: CameraIntrinsics, config: LabelConfig | None = None
) -> list[LabelResult]:
    config = config or LabelConfig()
    return [label_frame(f, intr, config) for f in frames]


def write_samples_csv(path: str | Path, results: Sequence[LabelResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "u", "v", "raw_cost", "normalized_cost"])
        for res in results:
            for s in res.samples:
                w.writerow([res.frame_id, repr(s.u), repr(s.v), repr(s.raw_cost), repr(s.normalized_cost)])


def read_samples_csv(path: str | Path) -> dict[int, list[CostSample]]:
    out: dict[int, list[CostSample]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["frame_id"]), []).append(
                CostSample(float(row["u"]), float(row["v"]), float(row["raw_cost"]), float(row["normalized_cost"]))
            )
    return out
