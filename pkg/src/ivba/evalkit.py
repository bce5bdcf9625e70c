"""Trajectory evaluation: relative pose error, failure statistics, and
feature-sorting curves."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientSpanError
from .geometry import Pose

log = logging.getLogger(__name__)

_ODO_TOL = 1e-9


@dataclass
class FeatureRecords:
    landmark_id: np.ndarray
    c_hat: np.ndarray  # NaN when no model was available
    gt_err2: np.ndarray  # squared ground-truth reprojection error, pixels^2


@dataclass
class TrajectoryLog:
    """Estimated and reference (ground-truth) poses of a tracking run.

    Poses are held as ``(N, 7)`` arrays ``(tx, ty, tz, qx, qy, qz, qw)``,
    camera-to-world, so that files round-trip exactly.
    """

    frame_ids: list[int]
    timestamps: list[float]
    estimated_tq: np.ndarray
    reference_tq: np.ndarray
    odometer: np.ndarray
    failures: list[tuple[int, str]] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    features: dict[int, FeatureRecords] = field(default_factory=dict)
    map_points: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.estimated_tq = np.asarray(self.estimated_tq, dtype=float).reshape(-1, 7)
        self.reference_tq = np.asarray(self.reference_tq, dtype=float).reshape(-1, 7)
        self.odometer = np.asarray(self.odometer, dtype=float).reshape(-1)
        n = len(self.frame_ids)
        if not (self.estimated_tq.shape[0] == self.reference_tq.shape[0] == self.odometer.shape[0] == n):
            raise ValueError("trajectory arrays disagree in length")
        if n > 1 and np.any(np.diff(self.frame_ids) <= 0):
            raise ValueError("frame ids must be strictly increasing")
        if n > 1 and np.any(np.diff(self.odometer) < 0):
            raise ValueError("odometer must be non-decreasing")
        if not self.epochs:
            self.epochs = [0] * n

    @property
    def estimated(self) -> list[Pose]:
        return [Pose.from_tq(r) for r in self.estimated_tq]

    @property
    def reference(self) -> list[Pose]:
        return [Pose.from_tq(r) for r in self.reference_tq]

    @property
    def total_distance(self) -> float:
        return float(self.odometer[-1] - self.odometer[0]) if len(self.odometer) else 0.0

    @property
    def failure_count(self) -> int:
        return len(self.failures)

    # -- persistence ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "ivba-trajectory-v1",
            "meta": self.meta,
            "frames": [
                {
                    "frame_id": int(fid),
                    "timestamp": float(ts),
                    "odometer": float(odo),
                    "epoch": int(ep),
                    "estimated": [float(x) for x in est],
                    "reference": [float(x) for x in ref],
                }
                for fid, ts, odo, ep, est, ref in zip(
                    self.frame_ids, self.timestamps, self.odometer, self.epochs,
                    self.estimated_tq, self.reference_tq,
                )
            ],
            "failures": [{"frame_id": int(f), "reason": r} for f, r in self.failures],
            "features": [
                {
                    "frame_id": int(fid),
                    "landmark_id": [int(x) for x in rec.landmark_id],
                    "c_hat": [_nan_to_none(x) for x in rec.c_hat],
                    "gt_err2": [float(x) for x in rec.gt_err2],
                }
                for fid, rec in sorted(self.features.items())
            ],
            "map": [
                {"epoch": int(ep), "id": int(lid), "xyz": [float(x) for x in xyz]}
                for (ep, lid), xyz in sorted(self.map_points.items())
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TrajectoryLog:
        if doc.get("format") != "ivba-trajectory-v1":
            raise ValueError("not a trajectory log")
        fr = doc["frames"]
        return cls(
            frame_ids=[f["frame_id"] for f in fr],
            timestamps=[f["timestamp"] for f in fr],
            estimated_tq=np.array([f["estimated"] for f in fr], dtype=float).reshape(-1, 7),
            reference_tq=np.array([f["reference"] for f in fr], dtype=float).reshape(-1, 7),
            odometer=np.array([f["odometer"] for f in fr], dtype=float),
            failures=[(f["frame_id"], f["reason"]) for f in doc["failures"]],
            epochs=[f["epoch"] for f in fr],
            features={
                r["frame_id"]: FeatureRecords(
                    np.array(r["landmark_id"], dtype=np.int64),
                    np.array([np.nan if x is None else x for x in r["c_hat"]], dtype=float),
                    np.array(r["gt_err2"], dtype=float),
                )
                for r in doc["features"]
            },
            map_points={(m["epoch"], m["id"]): np.array(m["xyz"], dtype=float) for m in doc["map"]},
            meta=doc.get("meta", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> TrajectoryLog:
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> TrajectoryLog:
        return cls.from_json(Path(path).read_text())


def _nan_to_none(x: float):
    return None if not math.isfinite(x) else float(x)


@dataclass
class RpePair:
    i: int
    j: int
    trans_err: float  # meters
    rot_err: float  # radians


@dataclass
class RpeResult:
    pairs: list[RpePair]
    excluded: int

    @property
    def trans(self) -> np.ndarray:
        return np.array([p.trans_err for p in self.pairs])

    @property
    def rot(self) -> np.ndarray:
        return np.array([p.rot_err for p in self.pairs])


def relative_pose_error(log_: TrajectoryLog, d: float) -> RpeResult:
    """Errors of relative motions over ``d`` meters of travel.

    For each start frame the partner is the first frame at or past the
    ``d``-meter mark, accepted only within one frame step of it.  Pairs that
    straddle a tracking failure are counted in ``excluded``.
    """
    odo = log_.odometer
    n = odo.shape[0]
    if n < 2 or odo[-1] - odo[0] < d - _ODO_TOL:
        log.warning("trajectory spans %.3f m, shorter than d=%.3f m", log_.total_distance, d)
        return RpeResult([], 0)
    slack = float(np.max(np.diff(odo))) + _ODO_TOL
    est = log_.estimated
    ref = log_.reference
    fail_idx = np.array(sorted({log_.frame_ids.index(f) for f, _ in log_.failures if f in log_.frame_ids}), dtype=int)
    pairs, excluded = [], 0
    for i in range(n):
        j = int(np.searchsorted(odo, odo[i] + d - _ODO_TOL, side="left"))
        if j >= n:
            break
        if odo[j] - odo[i] >= d + slack:
            continue
        if fail_idx.size and np.any((fail_idx > i) & (fail_idx <= j)):
            excluded += 1
            continue
        rel_est = est[i].inverse() @ est[j]
        rel_ref = ref[i].inverse() @ ref[j]
        E = rel_ref.inverse() @ rel_est
        pairs.append(RpePair(i, j, float(np.linalg.norm(E.t)), E.rotation_angle()))
    return RpeResult(pairs, excluded)


@dataclass
class SortingCurve:
    percentiles: np.ndarray
    introspection: np.ndarray
    ideal: np.ndarray
    random_mean: np.ndarray
    random_std: np.ndarray
    random_area_std: float

    @staticmethod
    def area(curve: np.ndarray) -> float:
        return float(np.mean(curve))

    @property
    def areas(self) -> dict[str, float]:
        return {
            "introspection": self.area(self.introspection),
            "ideal": self.area(self.ideal),
            "random": self.area(self.random_mean),
            "random_std": self.random_area_std,
        }

    def rows(self) -> list[dict]:
        return [
            {"percentile": float(x), "introspection": float(a), "ideal": float(b),
             "random_mean": float(c), "random_std": float(s)}
            for x, a, b, c, s in zip(self.percentiles, self.introspection, self.ideal,
                                     self.random_mean, self.random_std)
        ]


PERCENTILES = np.arange(5, 101, 5, dtype=float)


def _top_means(err_sorted: np.ndarray, ks: np.ndarray) -> np.ndarray:
    cs = np.cumsum(err_sorted)
    return cs[ks - 1] / ks


def sorting_curve(
    c_hat: Sequence[float],
    errors: Sequence[float],
    n_shuffles: int = 1000,
    seed: int = 0,
    percentiles: np.ndarray = PERCENTILES,
) -> SortingCurve:
    """Mean error of the top-x% features when ranked by ascending ``c_hat``,
    by ascending error (ideal), and in random order (mean/std over shuffles)."""
    c = np.asarray(c_hat, dtype=float)
    e = np.asarray(errors, dtype=float)
    if e.size == 0 or c.shape != e.shape:
        raise ValueError("need a non-empty set of (c_hat, error) records")
    n = e.size
    ks = np.maximum(1, np.ceil(percentiles / 100.0 * n).astype(int))
    intro = _top_means(e[np.argsort(c, kind="stable")], ks)
    ideal = _top_means(e[np.argsort(e, kind="stable")], ks)
    rng = np.random.default_rng(seed)
    samples = np.empty((n_shuffles, ks.size))
    for s in range(n_shuffles):
        samples[s] = _top_means(e[rng.permutation(n)], ks)
    areas = samples.mean(axis=1)
    return SortingCurve(
        percentiles=np.asarray(percentiles, dtype=float),
        introspection=intro,
        ideal=ideal,
        random_mean=samples.mean(axis=0),
        random_std=samples.std(axis=0),
        random_area_std=float(areas.std()),
    )


def feature_records(logs: Sequence[TrajectoryLog]) -> tuple[np.ndarray, np.ndarray]:
    cs, es = [], []
    for lg in logs:
        for rec in lg.features.values():
            ok = np.isfinite(rec.c_hat)
            cs.append(rec.c_hat[ok])
            es.append(rec.gt_err2[ok])
    if not cs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(cs), np.concatenate(es)


@dataclass
class EvalReport:
    d: float
    rpe_translation_percent: float
    rpe_rotation_deg_per_m: float
    mdbf_meters: float
    mdbf_lower_bound: bool
    failure_count: int
    total_distance: float
    n_pairs: int
    excluded_pairs: int
    sorting_curve: list[dict] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @property
    def mdbf_text(self) -> str:
        return f">= {self.mdbf_meters:.1f}" if self.mdbf_lower_bound else f"{self.mdbf_meters:.1f}"


def mdbf(total_distance: float, failures: int) -> tuple[float, bool]:
    """Mean distance between failures; ``(total, True)`` marks a lower bound."""
    if failures == 0:
        return total_distance, True
    return total_distance / failures, False


def summarize_pairs(rpe: RpeResult, d: float, total_distance: float, failures: int) -> EvalReport:
    if not rpe.pairs:
        raise InsufficientSpanError(f"no frame pairs {d} m apart; need a trajectory of at least {d} m")
    t = rpe.trans
    r = np.degrees(rpe.rot)
    m, lb = mdbf(total_distance, failures)
    return EvalReport(
        d=float(d),
        rpe_translation_percent=float(100.0 * math.sqrt(np.mean(t * t)) / d),
        rpe_rotation_deg_per_m=float(math.sqrt(np.mean(r * r)) / d),
        mdbf_meters=float(m),
        mdbf_lower_bound=lb,
        failure_count=int(failures),
        total_distance=float(total_distance),
        n_pairs=len(rpe.pairs),
        excluded_pairs=rpe.excluded,
    )


def summarize(log_: TrajectoryLog, d: float, with_curve: bool = True, n_shuffles: int = 1000) -> EvalReport:
    rpe = relative_pose_error(log_, d)
    rep = summarize_pairs(rpe, d, log_.total_distance, log_.failure_count)
    if with_curve:
        c, e = feature_records([log_])
        if c.size:
            rep.sorting_curve = sorting_curve(c, e, n_shuffles=n_shuffles).rows()
    return rep


def aggregate(logs: Sequence[TrajectoryLog], d: float) -> EvalReport:
    """RMSE over the pooled pairs of several trajectories, MDBF over their
    summed distance."""
    pairs, excl, dist, fails = [], 0, 0.0, 0
    for lg in logs:
        r = relative_pose_error(lg, d)
        pairs += r.pairs
        excl += r.excluded
        dist += lg.total_distance
        fails += lg.failure_count
    return summarize_pairs(RpeResult(pairs, excl), d, dist, fails)


def write_pairs_csv(path: str | Path, rpe: RpeResult, log_: TrajectoryLog) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_i", "frame_j", "trans_err_m", "rot_err_rad"])
        for p in rpe.pairs:
            w.writerow([log_.frame_ids[p.i], log_.frame_ids[p.j], repr(p.trans_err), repr(p.rot_err)])


def write_curve_csv(path: str | Path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["percentile", "introspection", "ideal", "random_mean", "random_std"]
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) for c in cols])


def compare_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text table: method, translation %, rotation deg/m, MDBF, failures."""
    head = ["Method", "Trans. Err. %", "Rot. Err. (deg/m)", "MDBF (m)", "Failures"]
    rows = [
        [name, f"{r.rpe_translation_percent:.3f}", f"{r.rpe_rotation_deg_per_m:.4f}", r.mdbf_text, str(r.failure_count)]
        for name, r in reports.items()
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    if len(reports) == 2:
        (na, a), (nb, b) = reports.items()
        lines.append(
            f"delta ({nb} - {na}): trans {b.rpe_translation_percent - a.rpe_translation_percent:+.3f} %, "
            f"rot {b.rpe_rotation_deg_per_m - a.rpe_rotation_deg_per_m:+.4f} deg/m, "
            f"failures {b.failure_count - a.failure_count:+d}"
        )
    return "\n".join(lines) + "\n"
