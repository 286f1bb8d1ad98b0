"""PNG panels from a run directory: psi evolution, translation triplets, loss curves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .rundir import RunDirectory  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("adv_cm", "adv_mc", "cyc", "struct_g", "struct_d", "seg_m", "seg_bar")


@dataclass
class Snapshot:
    epoch: int
    psi: np.ndarray
    source: np.ndarray
    pseudo: np.ndarray
    target: np.ndarray


@dataclass
class PlotResult:
    files: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def load_snapshots(run_dir: RunDirectory) -> list[Snapshot]:
    snaps = []
    for path in run_dir.snapshot_files():
        with np.load(path) as data:
            snaps.append(
                Snapshot(
                    epoch=int(data["epoch"]),
                    psi=data["psi"],
                    source=data["source"],
                    pseudo=data["pseudo"],
                    target=data["target"],
                )
            )
    return snaps


def evolution_figure(snapshots: list[Snapshot], max_samples: int = 4) -> Figure:
    """Rows are fixed target samples, columns logged epochs; color scale fixed to [0, 1]."""
    rows = min(max_samples, min(len(s.psi) for s in snapshots))
    cols = len(snapshots)
    fig, axs = plt.subplots(rows, cols, figsize=(2 * cols + 1, 2 * rows), squeeze=False)
    image = None
    for c, snap in enumerate(snapshots):
        axs[0, c].set_title(f"epoch {snap.epoch}")
        for r in range(rows):
            image = axs[r, c].imshow(snap.psi[r], vmin=0.0, vmax=1.0, cmap="viridis")
            axs[r, c].axis("off")
    bar = fig.colorbar(image, ax=axs, fraction=0.03)
    bar.set_ticks([0.0, 1.0])
    bar.set_label("P(SOI)")
    return fig


def triplet_figure(snapshot: Snapshot, max_samples: int = 4) -> Figure:
    rows = min(max_samples, len(snapshot.source), len(snapshot.target))
    fig, axs = plt.subplots(rows, 3, figsize=(6, 2 * rows), squeeze=False)
    for r in range(rows):
        for c, (title, img) in enumerate(
            (("source", snapshot.source[r]), ("pseudo-target", snapshot.pseudo[r]), ("target", snapshot.target[r]))
        ):
            axs[r, c].imshow(img, vmin=-1.0, vmax=1.0, cmap="gray")
            axs[r, c].axis("off")
            if r == 0:
                axs[r, c].set_title(title)
    fig.suptitle(f"epoch {snapshot.epoch}")
    return fig


def loss_figure(history: list[dict]) -> Figure:
    steps = [record["step"] for record in history]
    fig, ax = plt.subplots(figsize=(8, 4))
    for name in LOSS_COMPONENTS:
        ax.plot(steps, [record[name] for record in history], label=name, linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize="small", ncol=4)
    return fig


def _save(fig: Figure, path: Path, result: PlotResult) -> None:
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    result.files.append(path)


def emit_plots(run_dir: Path, max_samples: int = 4) -> PlotResult:
    """Write every panel the run directory has inputs for into ``plots/``.

    Missing inputs skip their panel and add a warning instead of failing.
    """
    rd = RunDirectory(run_dir)
    if not rd.run_path.exists():
        raise FileNotFoundError(f"not a run directory (no run.json): {run_dir}")
    result = PlotResult()
    rd.plots.mkdir(parents=True, exist_ok=True)

    snapshots = load_snapshots(rd)
    if snapshots:
        _save(evolution_figure(snapshots, max_samples), rd.plots / "psi_evolution.png", result)
        _save(triplet_figure(snapshots[-1], max_samples), rd.plots / "translation.png", result)
    else:
        result.warnings.append("no snapshots: skipped psi_evolution.png and translation.png")

    history = rd.read_history()
    if history:
        _save(loss_figure(history), rd.plots / "losses.png", result)
    else:
        result.warnings.append("empty history: skipped losses.png")

    for warning in result.warnings:
        logger.warning(warning)
    return result
