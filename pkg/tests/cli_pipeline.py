"""Runs every ``ivba`` command once in a directory and hashes the outputs."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from ivba.cli import main

SMALL_CONFIG = """\
seed: 3
sessions: 2
world:
  length: 12.0
introspection:
  epochs: 300
eval:
  n_shuffles: 50
"""


def invoke(workdir: Path, *argv: str) -> int:
    old = os.getcwd()
    os.chdir(workdir)
    try:
        return main(list(argv))
    finally:
        os.chdir(old)


def run_pipeline(workdir: Path, config: str = SMALL_CONFIG) -> dict[str, int]:
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "run.yaml").write_text(config)
    c = ("--config", "run.yaml", "--out", "out")
    s = ["out/sessions/session_3.jsonl", "out/sessions/session_4.jsonl"]
    codes = {
        "simulate": invoke(workdir, "simulate", *c),
        "label": invoke(workdir, "label", *s, *c),
        "train": invoke(workdir, "train", "out/labels/session_3", "out/labels/session_4", *c),
        "run": invoke(workdir, "run", *s, *c),
    }
    codes["run_introspective"] = invoke(workdir, "run", *s, "--mode", "introspective", "--model", "out/model.json", *c)
    logs = [f"out/runs/session_{k}_{m}.json" for k in (3, 4) for m in ("baseline", "introspective")]
    codes["eval"] = invoke(workdir, "eval", *logs, *c)
    codes["compare"] = invoke(workdir, "compare", *logs[:2], *c)
    return codes


def tree_digest(root: Path) -> dict[str, str]:
    """Relative path -> sha256 for every file under ``root``."""
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def outputs_by_command(root: Path) -> dict[str, dict[str, str]]:
    """Group output digests by the command that wrote them."""
    prefixes = {"simulate": "sessions/", "label": "labels/", "train": ("model.json", "loss_curve.csv"),
                "run": "runs/", "eval": "eval/", "compare": "compare/"}
    digest = tree_digest(root)
    return {cmd: {k: v for k, v in digest.items() if k.startswith(pre)} for cmd, pre in prefixes.items()}
