"""JSONL session files.

Line 1 is a header (intrinsics, landmarks, reference covariance); every
following line is one frame.  Poses are ``[tx, ty, tz, qx, qy, qz, qw]``
camera-to-world.  The context grid is zlib-compressed little-endian float32,
base64 encoded.
"""

from __future__ import annotations

import base64
import json
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError
from .frontend_sim.world import Candidates, FrameBundle, Session
from .geometry import CameraIntrinsics, Pose
from .introspection import ContextGrid
from .labelgen import ReferencePose

FORMAT = "ivba-session-v1"


def _enc_f32(a: np.ndarray) -> str:
    raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
    return base64.b64encode(zlib.compress(raw, 6)).decode("ascii")


def _dec_f32(s: str, shape) -> np.ndarray:
    raw = zlib.decompress(base64.b64decode(s))
    return np.frombuffer(raw, dtype="<f4").astype(float).reshape(shape)


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=float).reshape(-1)]


def _dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def session_header(session: Session) -> dict:
    intr = session.intrinsics
    cov = session.frames[0].reference.covariance if session.frames else np.eye(6)
    return {
        "format": FORMAT,
        "seed": session.seed,
        "n_frames": len(session.frames),
        "intrinsics": {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "baseline": intr.baseline, "image_width": intr.image_width, "image_height": intr.image_height,
        },
        "class_names": list(session.class_names),
        "landmark_positions": _floats(session.landmark_positions),
        "landmark_classes": [int(c) for c in session.landmark_classes],
        "reference_covariance": _floats(cov),
    }


def frame_record(f: FrameBundle) -> dict:
    c = f.candidates
    ctx = f.context
    return {
        "frame_id": f.frame_id,
        "timestamp": f.timestamp,
        "true_pose": f.true_pose.to_tq(),
        "reference_pose": f.reference.pose.to_tq(),
        "context": {
            "shape": list(ctx.descriptors.shape),
            "cell_size": ctx.cell_size,
            "data": _enc_f32(ctx.descriptors),
        },
        "observations": {
            "landmark_id": [int(x) for x in c.landmark_id],
            "z": _floats(c.z),
            "level": [int(x) for x in c.level],
            "context_class": [int(x) for x in c.context_class],
            "is_outlier": [bool(x) for x in c.is_outlier],
            "true_eps": _floats(c.true_eps),
        },
    }


def dumps_session(session: Session) -> str:
    lines = [_dumps(session_header(session))]
    lines += [_dumps(frame_record(f)) for f in session.frames]
    return "\n".join(lines) + "\n"


def save_session(session: Session, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_session(session))
    return path


def _frame_from_record(rec: dict, intr: CameraIntrinsics, cov: np.ndarray) -> FrameBundle:
    ctx = rec["context"]
    obs = rec["observations"]
    n = len(obs["landmark_id"])
    return FrameBundle(
        frame_id=int(rec["frame_id"]),
        timestamp=float(rec["timestamp"]),
        true_pose=Pose.from_tq(rec["true_pose"]),
        reference=ReferencePose(Pose.from_tq(rec["reference_pose"]), cov),
        context=ContextGrid(
            int(rec["frame_id"]), _dec_f32(ctx["data"], ctx["shape"]), int(ctx["cell_size"]),
            intr.image_width, intr.image_height,
        ),
        candidates=Candidates(
            landmark_id=np.array(obs["landmark_id"], dtype=np.int64),
            z=np.array(obs["z"], dtype=float).reshape(n, 3),
            level=np.array(obs["level"], dtype=np.int64),
            context_class=np.array(obs["context_class"], dtype=np.int64),
            is_outlier=np.array(obs["is_outlier"], dtype=bool),
            true_eps=np.array(obs["true_eps"], dtype=float).reshape(n, 3),
        ),
    )


def loads_session(text: str) -> Session:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("session file is empty (no header line)")
    try:
        head = json.loads(lines[0])
        if head.get("format") != FORMAT:
            raise DataError(f"not a session file (format {head.get('format')!r})")
        intr = CameraIntrinsics(**head["intrinsics"])
        cov = np.array(head["reference_covariance"], dtype=float).reshape(6, 6)
        frames = [_frame_from_record(json.loads(ln), intr, cov) for ln in lines[1:]]
        pts = np.array(head["landmark_positions"], dtype=float).reshape(-1, 3)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed session file: {exc}") from exc
    return Session(
        intrinsics=intr,
        landmark_positions=pts,
        landmark_classes=np.array(head["landmark_classes"], dtype=np.int64),
        frames=frames,
        seed=int(head["seed"]),
        class_names=tuple(head["class_names"]),
    )


def load_session(path: str | Path) -> Session:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"session file not found: {path}")
    return loads_session(path.read_text())
