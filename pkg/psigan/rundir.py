"""Run directory layout, provenance files and the single-writer lock."""

from __future__ import annotations

import json
import logging
import os
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .config import SCHEMA_VERSION, save_json

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
RUN_FILE = "run.json"
HISTORY_FILE = "history.jsonl"
SUMMARY_FILE = "summary.json"
LOCK_FILE = ".lock"
FINAL_CHECKPOINT = "final.pt"


class RunLockedError(RuntimeError):
    """Another process holds the run directory."""


def package_versions() -> dict[str, str]:
    try:
        psigan_version = metadata.version("psigan")
    except metadata.PackageNotFoundError:
        psigan_version = "unknown"
    return {"psigan": psigan_version, "torch": torch.__version__, "numpy": np.__version__}


class RunDirectory:
    """Paths inside one run directory.

    Layout::

        config.json        copy of the RunConfig that produced the run
        run.json           config hash, manifest digest and path, package versions, status
        history.jsonl      one LossReport record per iteration
        summary.json       final counters and diagnostics
        checkpoints/       epoch-NNNN.pt, final.pt
        snapshots/         epoch-NNNN.npz fixed-sample maps and translations
        plots/             PNG panels (the only folder written after completion)
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    @property
    def config_path(self) -> Path:
        return self.root / CONFIG_FILE

    @property
    def run_path(self) -> Path:
        return self.root / RUN_FILE

    @property
    def history_path(self) -> Path:
        return self.root / HISTORY_FILE

    @property
    def summary_path(self) -> Path:
        return self.root / SUMMARY_FILE

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def snapshots(self) -> Path:
        return self.root / "snapshots"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints / FINAL_CHECKPOINT

    def checkpoint_for(self, epoch: int) -> Path:
        return self.checkpoints / f"epoch-{epoch:04d}.pt"

    def snapshot_for(self, epoch: int) -> Path:
        return self.snapshots / f"epoch-{epoch:04d}.npz"

    def latest_checkpoint(self) -> Path | None:
        found = sorted(self.checkpoints.glob("epoch-*.pt"))
        return found[-1] if found else None

    def snapshot_files(self) -> list[Path]:
        return sorted(self.snapshots.glob("epoch-*.npz"))

    def create(self) -> None:
        for d in (self.root, self.checkpoints, self.snapshots):
            d.mkdir(parents=True, exist_ok=True)

    def write_provenance(
        self,
        config: dict,
        config_hash: str,
        manifest_digest: str | None,
        manifest_path: str | None,
    ) -> None:
        save_json(self.config_path, config)
        save_json(
            self.run_path,
            {
                "schema_version": SCHEMA_VERSION,
                "config_hash": config_hash,
                "manifest_digest": manifest_digest,
                "manifest_path": manifest_path,
                "versions": package_versions(),
                "status": "running",
            },
        )

    def read_run_info(self) -> dict:
        if not self.run_path.exists():
            raise FileNotFoundError(f"not a run directory (no {RUN_FILE}): {self.root}")
        return json.loads(self.run_path.read_text())

    def mark(self, status: str) -> None:
        info = self.read_run_info()
        info["status"] = status
        save_json(self.run_path, info)

    @property
    def completed(self) -> bool:
        try:
            return self.read_run_info().get("status") == "completed"
        except FileNotFoundError:
            return False

    def append_history(self, record: dict) -> None:
        with open(self.history_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read_history(self) -> list[dict]:
        if not self.history_path.exists():
            return []
        with open(self.history_path) as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_history(self, global_step: int) -> None:
        """Drop records past ``global_step`` so a resumed run does not duplicate rows."""
        kept = [r for r in self.read_history() if r["step"] < global_step]
        tmp = self.history_path.with_suffix(".jsonl.tmp")
        with open(tmp, "w") as f:
            for record in kept:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        os.replace(tmp, self.history_path)

    def lock(self) -> RunLock:
        return RunLock(self.root / LOCK_FILE)


class RunLock:
    """Exclusive lock file; use as a context manager."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self._held = False

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = self.path.read_text().strip() or "unknown"
            raise RunLockedError(
                f"{self.path.parent} is locked by pid {holder}; remove {self.path} if that process is gone"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> RunLock:
        self.acquire()
        return self

    def __exit__(self, *exc: object) -> None:
        self.release()
