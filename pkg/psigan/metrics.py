"""Segmentation and translation quality measures, and their report files."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.distance import cdist
from scipy.special import rel_entr

from .config import save_json
from .data import DomainDataset
from .models import Branch, SplitSegmentor

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
HD_SENTINEL = math.inf
KL_EPS = 1e-8
MIN_BINS = 8

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_pair(pred_mask: np.ndarray, gt_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2 TP / (FP + 2 TP + FN); 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    denom = fp + 2 * tp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (or the canvas)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def hd95(
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0),
) -> float:
    """Symmetric 95th-percentile boundary distance in spacing units.

    Returns 0 if both masks are empty and ``HD_SENTINEL`` (inf) if exactly one is.

    Raises:
        ValueError: On a shape mismatch or non-positive spacing
    """
    pred, gt = _check_pair(pred_mask, gt_mask)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,) or np.any(spacing <= 0):
        raise ValueError(f"Invalid spacing: {tuple(spacing)}. Need {pred.ndim} positive values.")
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return HD_SENTINEL
    a = np.argwhere(boundary(pred)) * spacing
    b = np.argwhere(boundary(gt)) * spacing
    d = cdist(a, b)
    return float(max(np.percentile(d.min(axis=1), 95), np.percentile(d.min(axis=0), 95)))


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> float:
    """KL(p || q) of two histograms after additive smoothing and renormalization."""
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    if p.shape != q.shape:
        raise ValueError(f"Histogram shapes differ: {p.shape} vs {q.shape}")
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(rel_entr(p, q)))


def intensity_histogram(images: np.ndarray, masks: np.ndarray, bins: int = 64) -> np.ndarray:
    """Normalized histogram over [-1, 1] of the in-mask pixels.

    Raises:
        ValueError: If the mask selects no pixels or bins < 8
    """
    if bins < MIN_BINS:
        raise ValueError(f"Invalid bins: {bins}. Must be >= {MIN_BINS}.")
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if images.shape != masks.shape:
        raise ValueError(f"Images {images.shape} and masks {masks.shape} differ in shape")
    values = images[masks]
    if values.size == 0:
        raise ValueError("Mask selects no pixels")
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    return counts / counts.sum()


def kl_intensity_divergence(
    pseudo_images: np.ndarray,
    real_images: np.ndarray,
    masks: np.ndarray | tuple[np.ndarray, np.ndarray],
    bins: int = 64,
) -> float:
    """KL(P_pseudo || P_real) of in-mask intensity histograms.

    ``masks`` is either one mask array shared by both image sets or a
    (pseudo_masks, real_masks) pair when the sets come from different scenes.
    """
    pseudo_masks, real_masks = masks if isinstance(masks, tuple) else (masks, masks)
    return kl_divergence(
        intensity_histogram(pseudo_images, pseudo_masks, bins),
        intensity_histogram(real_images, real_masks, bins),
    )


def per_label_kl(
    pseudo_images: np.ndarray,
    pseudo_labels: np.ndarray,
    real_images: np.ndarray,
    real_labels: np.ndarray,
    num_labels: int,
    bins: int = 64,
) -> dict[int, float | None]:
    """KL per foreground label; None where either side has no pixels of that label."""
    out: dict[int, float | None] = {}
    for label in range(1, num_labels):
        pm, rm = pseudo_labels == label, real_labels == label
        if not pm.any() or not rm.any():
            logger.warning("Label %d absent on one side; KL not computed", label)
            out[label] = None
            continue
        out[label] = kl_intensity_divergence(pseudo_images, real_images, (pm, rm), bins)
    return out


@dataclass
class MetricRecord:
    """Per-sample, per-label scores; labels are 1..K-1."""

    sample: str
    dice: dict[int, float]
    hd95: dict[int, float]
    kl: dict[int, float | None] | None = None

    @property
    def overall_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))


@dataclass
class LabelSummary:
    dice_mean: float
    dice_std: float
    hd95_mean: float | None
    hd95_std: float | None
    hd95_inf_count: int


@dataclass
class EvaluationReport:
    num_labels: int
    branch: str
    records: list[MetricRecord]
    labels: dict[int, LabelSummary] = field(default_factory=dict)
    overall_mean: float = 0.0
    overall_std: float = 0.0

    def summarize(self) -> EvaluationReport:
        """Mean and std over samples; inf HD95 values are excluded and counted."""
        for label in range(1, self.num_labels):
            d = np.array([r.dice[label] for r in self.records])
            h = np.array([r.hd95[label] for r in self.records])
            finite = h[np.isfinite(h)]
            self.labels[label] = LabelSummary(
                dice_mean=float(d.mean()),
                dice_std=float(d.std()),
                hd95_mean=float(finite.mean()) if finite.size else None,
                hd95_std=float(finite.std()) if finite.size else None,
                hd95_inf_count=int(h.size - finite.size),
            )
        overall = np.array([r.overall_dice for r in self.records])
        self.overall_mean = float(overall.mean())
        self.overall_std = float(overall.std())
        return self


def evaluate_predictions(
    pred_masks: np.ndarray,
    gt_masks: np.ndarray,
    num_labels: int,
    samples: Sequence[str] | None = None,
    spacing: Sequence[float] = (1.0, 1.0),
    branch: str = Branch.S_M.value,
) -> EvaluationReport:
    """Score label masks (N, H, W) against ground truth."""
    pred_masks = np.asarray(pred_masks)
    gt_masks = np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"Prediction {pred_masks.shape} and ground truth {gt_masks.shape} differ")
    if len(pred_masks) == 0:
        raise ValueError("Nothing to evaluate")
    samples = list(samples) if samples is not None else [str(i) for i in range(len(pred_masks))]
    records = []
    for name, pred, gt in zip(samples, pred_masks, gt_masks):
        records.append(
            MetricRecord(
                sample=name,
                dice={k: dice(pred == k, gt == k) for k in range(1, num_labels)},
                hd95={k: hd95(pred == k, gt == k, spacing) for k in range(1, num_labels)},
            )
        )
    return EvaluationReport(num_labels, branch, records).summarize()


def predict_masks(
    segmentor: SplitSegmentor,
    images: torch.Tensor,
    branch: Branch = Branch.S_M,
    batch_size: int = 8,
) -> np.ndarray:
    """Argmax label masks (N, H, W) from a segmentor in inference mode."""
    segmentor.eval()
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start : start + batch_size].to(next(segmentor.parameters()).device)
            out.append(segmentor(batch, branch).argmax(dim=1).cpu())
    return torch.cat(out).numpy()


def evaluate_run(
    segmentor: SplitSegmentor,
    dataset: DomainDataset,
    num_labels: int,
    branch: Branch = Branch.S_M,
    spacing: Sequence[float] = (1.0, 1.0),
) -> EvaluationReport:
    """Segment a split with one branch and score it against its masks.

    Raises:
        ValueError: If the split carries no ground-truth masks
    """
    if dataset.masks is None:
        raise ValueError("Split has no ground-truth masks to evaluate against")
    pred = predict_masks(segmentor, dataset.images, branch)
    return evaluate_predictions(
        pred,
        dataset.masks.numpy(),
        num_labels,
        samples=[str(s) for s in dataset.scene_ids],
        spacing=spacing,
        branch=branch.value,
    )


def report_columns(num_labels: int) -> list[str]:
    """Fixed wide-table columns; ablation tables prepend ``entry``."""
    labels = range(1, num_labels)
    return (
        ["schema_version", "sample"]
        + [f"dice_{k}" for k in labels]
        + [f"hd95_{k}" for k in labels]
        + ["overall_dice"]
        + [f"kl_{k}" for k in labels]
    )


def _cell(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6g}"


def record_row(record: MetricRecord, num_labels: int) -> dict[str, str]:
    row = {"schema_version": str(REPORT_SCHEMA_VERSION), "sample": record.sample}
    for k in range(1, num_labels):
        row[f"dice_{k}"] = _cell(record.dice[k])
        row[f"hd95_{k}"] = _cell(record.hd95[k])
        row[f"kl_{k}"] = _cell(record.kl.get(k) if record.kl else None)
    row["overall_dice"] = _cell(record.overall_dice)
    return row


def write_table(path: Path, columns: list[str], rows: list[dict[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)


def _json_float(value: float | None) -> float | None:
    return None if value is None or math.isinf(value) else value


def report_dict(report: EvaluationReport) -> dict:
    """Machine-readable form; inf HD95 becomes null and is counted per label."""
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "branch": report.branch,
        "num_labels": report.num_labels,
        "overall_dice": {"mean": report.overall_mean, "std": report.overall_std},
        "labels": {
            str(k): {
                "dice_mean": s.dice_mean,
                "dice_std": s.dice_std,
                "hd95_mean": s.hd95_mean,
                "hd95_std": s.hd95_std,
                "hd95_inf_count": s.hd95_inf_count,
            }
            for k, s in report.labels.items()
        },
        "samples": [
            {
                "sample": r.sample,
                "dice": {str(k): v for k, v in r.dice.items()},
                "hd95": {str(k): _json_float(v) for k, v in r.hd95.items()},
                "overall_dice": r.overall_dice,
            }
            for r in report.records
        ],
    }


def write_report(report: EvaluationReport, out_dir: Path, stem: str = "metrics") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    write_table(
        csv_path,
        report_columns(report.num_labels),
        [record_row(r, report.num_labels) for r in report.records],
    )
    save_json(json_path, report_dict(report))
    logger.info(
        "Overall DSC %.4f +/- %.4f over %d samples (%s)",
        report.overall_mean, report.overall_std, len(report.records), report.branch,
    )
    return csv_path, json_path
