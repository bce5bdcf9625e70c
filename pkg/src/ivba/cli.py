"""``ivba`` command-line pipeline: simulate, label, train, run, eval, compare.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import click
import numpy as np

from . import evalkit
from .config import RunConfig, load_config
from .errors import ConfigurationError, DataError, DegenerateSessionError, InsufficientSpanError
from .evalkit import TrajectoryLog
from .frontend_sim.tracking import run_tracking
from .frontend_sim.world import simulate_session
from .introspection import IntrospectionModel, train
from .labelgen import CostMap, write_samples_csv
from .pipeline import label_session
from .session_io import load_session, save_session

log = logging.getLogger("ivba")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Ctx:
    def __init__(self, cfg: RunConfig, out: Path, jobs: int):
        self.cfg = cfg
        self.out = out
        self.jobs = jobs


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map, optionally across processes; results do not depend on
    ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _common(f):
    f = click.option("--jobs", type=int, default=1, show_default=True, help="Parallel workers across sessions/logs.")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Output directory (overrides config).")(f)
    f = click.option("--seed", type=int, default=None, help="Seed (overrides config).")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML or JSON run config.")(f)
    return f


def _setup(config_path, seed, out, jobs) -> _Ctx:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    if jobs < 1:
        raise ConfigurationError("--jobs must be at least 1")
    out_dir = Path(out if out is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _Ctx(cfg, out_dir, jobs)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _stem(path: str) -> str:
    name = Path(path).name
    for suffix in (".jsonl", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


@click.group()
@click.option("-v", "--verbose", count=True, help="More log output.")
def cli(verbose: int) -> None:
    """Introspective robust bundle adjustment pipeline."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- simulate ---------------------------------------------------------------


def _simulate_one(args) -> tuple[int, str, int, int, float]:
    cfg, seed, out = args
    sess = simulate_session(cfg.world_config(), cfg.noise_model(), seed)
    path = save_session(sess, Path(out) / "sessions" / f"session_{seed}.jsonl")
    return seed, str(path), len(sess.frames), len(sess.landmark_positions), sess.length


@cli.command()
@_common
def simulate(config_path, seed, out, jobs):
    """Write one JSONL session per seed."""
    ctx = _setup(config_path, seed, out, jobs)
    seeds = [ctx.cfg.seed + i for i in range(ctx.cfg.sessions)]
    rows = _pmap(_simulate_one, [(ctx.cfg, s, str(ctx.out)) for s in seeds], ctx.jobs)
    for s, path, nf, nl, length in rows:
        click.echo(f"session seed={s}: {nf} frames, {nl} landmarks, {length:.2f} m -> {path}")


# -- label --------------------------------------------------------------------


def _label_one(args) -> dict:
    cfg, session_path, log_path, out = args
    sess = load_session(session_path)
    stem = _stem(session_path)
    dest = Path(out) / "labels" / stem
    dest.mkdir(parents=True, exist_ok=True)
    if not sess.frames:
        log.warning("%s: session has no frames; nothing to label", session_path)
    if log_path is not None:
        lg = TrajectoryLog.load(log_path)
    else:
        lg = run_tracking(sess, "baseline", None, cfg.tracking_config())
        lg.save(dest / "tracking.json")
    results = label_session(sess, lg, cfg.label_config())
    frames = []
    for r in results:
        entry = {"frame_id": r.frame_id, "passed": bool(r.passed), "mahalanobis": float(r.mahalanobis)}
        if r.costmap is not None:
            r.costmap.save(dest / "costmaps" / f"frame_{r.frame_id:06d}")
            entry["costmap"] = f"costmaps/frame_{r.frame_id:06d}"
        frames.append(entry)
    write_samples_csv(dest / "samples.csv", results)
    with (dest / "skipped.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "mahalanobis"])
        for r in results:
            if r.skipped:
                w.writerow([r.frame_id, repr(float(r.mahalanobis))])
    manifest = {
        "format": "ivba-labels-v1",
        "session": str(session_path),
        "tracking_log": str(log_path) if log_path is not None else "tracking.json",
        "n_frames": len(results),
        "n_skipped": sum(r.skipped for r in results),
        "frames": frames,
    }
    _write_json(dest / "manifest.json", manifest)
    return manifest


@cli.command()
@click.argument("sessions", nargs=-1, required=True)
@click.option("--log", "logs", multiple=True, help="Tracking log per session (default: run baseline tracking).")
@_common
def label(sessions, logs, config_path, seed, out, jobs):
    """Generate GP costmap labels from tracked sessions."""
    ctx = _setup(config_path, seed, out, jobs)
    if logs and len(logs) != len(sessions):
        raise click.UsageError("give either no --log or one --log per session")
    for p in list(sessions) + list(logs):
        if not Path(p).is_file():
            raise DataError(f"file not found: {p}")
    items = [(ctx.cfg, s, logs[i] if logs else None, str(ctx.out)) for i, s in enumerate(sessions)]
    for m in _pmap(_label_one, items, ctx.jobs):
        click.echo(f"{m['session']}: {m['n_frames']} frames, {m['n_skipped']} skipped")
        for f in m["frames"]:
            if not f["passed"]:
                click.echo(f"  skipped frame {f['frame_id']}: d={f['mahalanobis']:.3f}")


# -- train --------------------------------------------------------------------


def _training_pairs(label_dirs: Iterable[str]):
    pairs = []
    for d in label_dirs:
        d = Path(d)
        mpath = d / "manifest.json"
        if not mpath.is_file():
            raise DataError(f"no manifest.json in {d}")
        man = json.loads(mpath.read_text())
        sess = load_session(man["session"])
        ctx = {f.frame_id: f.context for f in sess.frames}
        for f in man["frames"]:
            if "costmap" not in f:
                continue
            cm = CostMap.load(d / f["costmap"])
            if f["frame_id"] not in ctx:
                raise DataError(f"{d}: frame {f['frame_id']} missing from session {man['session']}")
            pairs.append((ctx[f["frame_id"]], cm))
    return pairs


@cli.command("train")
@click.argument("label_dirs", nargs=-1, required=True)
@_common
def train_cmd(label_dirs, config_path, seed, out, jobs):
    """Fit the introspection model to costmap labels."""
    ctx = _setup(config_path, seed, out, jobs)
    pairs = _training_pairs(label_dirs)
    try:
        model = train(pairs, ctx.cfg.train_config())
    except ConfigurationError as exc:
        # dimension mismatches between inputs are a data problem here
        raise DataError(str(exc)) from exc
    curve = model.training.get("loss_curve", [])
    model.save(ctx.out / "model.json")
    with (ctx.out / "loss_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(v)])
    click.echo(f"trained on {model.training['n_cells']} cells from {len(pairs)} frames; "
               f"final loss {model.training['final_loss']:.6f} -> {ctx.out / 'model.json'}")


# -- run ----------------------------------------------------------------------


def _run_one(args) -> tuple[str, str, list]:
    cfg, session_path, mode, model_path, out = args
    sess = load_session(session_path)
    model = IntrospectionModel.load(model_path) if model_path else None
    lg = run_tracking(sess, mode, model, cfg.tracking_config())
    path = Path(out) / "runs" / f"{_stem(session_path)}_{mode}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    lg.save(path)
    return session_path, str(path), lg.failures


@cli.command()
@click.argument("sessions", nargs=-1, required=True)
@click.option("--mode", type=click.Choice(["baseline", "introspective"]), default="baseline", show_default=True)
@click.option("--model", "model_path", default=None, help="Introspection model JSON (required for introspective mode).")
@_common
def run(sessions, mode, model_path, config_path, seed, out, jobs):
    """Track sessions and write trajectory logs."""
    ctx = _setup(config_path, seed, out, jobs)
    if mode == "introspective" and model_path is None:
        raise ConfigurationError("introspective mode requires --model")
    for p in list(sessions) + ([model_path] if model_path else []):
        if not Path(p).is_file():
            raise DataError(f"file not found: {p}")
    items = [(ctx.cfg, s, mode, model_path, str(ctx.out)) for s in sessions]
    for sp, path, failures in _pmap(_run_one, items, ctx.jobs):
        click.echo(f"{sp}: {len(failures)} tracking failures -> {path}")
        for fid, reason in failures:
            click.echo(f"  failure at frame {fid}: {reason}")


# -- eval / compare ---------------------------------------------------------------


def _load_log(path: str) -> TrajectoryLog:
    if not Path(path).is_file():
        raise DataError(f"file not found: {path}")
    try:
        return TrajectoryLog.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: not a trajectory log ({exc})") from exc


def _evaluate(lg: TrajectoryLog, cfg: RunConfig) -> tuple[evalkit.EvalReport, evalkit.RpeResult]:
    d = cfg.eval.d
    if lg.total_distance < d:
        raise InsufficientSpanError(
            f"trajectory spans {lg.total_distance:.3f} m; evaluation needs at least d = {d} m"
        )
    rpe = evalkit.relative_pose_error(lg, d)
    rep = evalkit.summarize_pairs(rpe, d, lg.total_distance, lg.failure_count)
    c, e = evalkit.feature_records([lg])
    if c.size:
        rep.sorting_curve = evalkit.sorting_curve(c, e, n_shuffles=cfg.eval.n_shuffles, seed=cfg.seed).rows()
    return rep, rpe


def _eval_one(args):
    cfg, path, out = args
    lg = _load_log(path)
    rep, rpe = _evaluate(lg, cfg)
    stem = _stem(path)
    dest = Path(out) / "eval"
    dest.mkdir(parents=True, exist_ok=True)
    (dest / f"{stem}.json").write_text(rep.to_json())
    evalkit.write_pairs_csv(dest / f"{stem}_rpe.csv", rpe, lg)
    if rep.sorting_curve:
        evalkit.write_curve_csv(dest / f"{stem}_curve.csv", rep.sorting_curve)
    return path, rep


@cli.command("eval")
@click.argument("logs", nargs=-1, required=True)
@_common
def eval_cmd(logs, config_path, seed, out, jobs):
    """RPE, failures and MDBF per trajectory log."""
    ctx = _setup(config_path, seed, out, jobs)
    for path, rep in _pmap(_eval_one, [(ctx.cfg, p, str(ctx.out)) for p in logs], ctx.jobs):
        click.echo(f"{path}: trans {rep.rpe_translation_percent:.3f} %, rot {rep.rpe_rotation_deg_per_m:.4f} deg/m, "
                   f"MDBF {rep.mdbf_text} m, failures {rep.failure_count}")


@cli.command()
@click.argument("logs", nargs=-1, required=True)
@click.option("--name", "names", multiple=True, help="Row label per log (default: file stem).")
@_common
def compare(logs, names, config_path, seed, out, jobs):
    """Side-by-side table of several logs."""
    ctx = _setup(config_path, seed, out, jobs)
    if names and len(names) != len(logs):
        raise click.UsageError("give either no --name or one --name per log")
    labels = list(names) if names else [_stem(p) for p in logs]
    seen: dict[str, int] = {}
    for i, lab in enumerate(labels):
        if lab in seen:
            seen[lab] += 1
            labels[i] = f"{lab}#{seen[lab]}"
        else:
            seen[lab] = 0
    reports = {}
    dest = ctx.out / "compare"
    dest.mkdir(parents=True, exist_ok=True)
    for lab, path in zip(labels, logs):
        rep, _ = _evaluate(_load_log(path), ctx.cfg)
        reports[lab] = rep
        (dest / f"{lab}.json").write_text(rep.to_json())
    table = evalkit.compare_table(reports)
    (dest / "comparison.txt").write_text(table)
    click.echo(table, nl=False)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="ivba", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:
        return int(exc.exit_code or 0)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigurationError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CONFIG
    except (DataError, DegenerateSessionError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
