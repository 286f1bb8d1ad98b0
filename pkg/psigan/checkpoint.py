"""Atomic, versioned checkpoints of the full training state."""

from __future__ import annotations

import logging
import os
import random
import tempfile
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, config_hash, from_dict, to_dict
from .state import TrainState, build_state

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint could not be written, read or accepted."""


def _rng_state() -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def _restore_rng(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(state: TrainState, path: Path) -> Path:
    """Write ``state`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": to_dict(state.config),
        "config_hash": state.config_hash,
        "manifest_digest": state.manifest_digest,
        "num_labels": state.num_labels,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "global_step": state.global_step,
        "model": state.bundle.state_dict(),
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "pools": {name: pool.state_dict() for name, pool in state.pools.items()},
        "history": state.history.state_dict(),
        "rng": _rng_state(),
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("Saved checkpoint %s (epoch %d, step %d)", path, state.epoch, state.global_step)
    return path


def read_checkpoint(path: Path) -> dict:
    """Read and validate a checkpoint payload without building any state.

    Raises:
        CheckpointError: On a missing, truncated or foreign file, or a schema mismatch
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path} is not a psigan checkpoint")
    version = payload["schema_version"]
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint schema {version}, expected {CHECKPOINT_SCHEMA_VERSION}; "
            "re-train or convert it with the psigan release that wrote it"
        )
    return payload


def load_checkpoint(
    path: Path,
    expected_hash: str | None = None,
    force: bool = False,
    restore_rng: bool = True,
) -> TrainState:
    """Rebuild a TrainState from ``path``.

    The state is assembled completely before it is returned, so a failure
    leaves nothing half-loaded.

    Raises:
        CheckpointError: On a bad file, or a config-hash mismatch without ``force``
    """
    payload = read_checkpoint(path)
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        if not force:
            raise CheckpointError(
                f"config hash mismatch: checkpoint {payload['config_hash']}, "
                f"run {expected_hash}; pass --force to resume anyway"
            )
        logger.warning(
            "Resuming %s under a different config (%s != %s)",
            path, payload["config_hash"], expected_hash,
        )
    try:
        config = from_dict(TrainConfig, payload["config"])
        if config_hash(config) != payload["config_hash"]:
            raise CheckpointError(f"{path}: stored config does not match its hash")
        state = build_state(config, payload["num_labels"], payload["manifest_digest"])
        state.bundle.load_state_dict(payload["model"])
        for name, opt in state.optimizers.items():
            opt.load_state_dict(payload["optimizers"][name])
        for name, pool in state.pools.items():
            pool.load_state_dict(payload["pools"][name])
        state.history.load_state_dict(payload["history"])
    except CheckpointError:
        raise
    except (KeyError, RuntimeError, ValueError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    state.epoch = payload["epoch"]
    state.iteration = payload["iteration"]
    state.global_step = payload["global_step"]
    if restore_rng:
        _restore_rng(payload["rng"])
    return state
