"""Apply trained generators to a split and score the result against the other domain."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .config import SCHEMA_VERSION, save_json
from .data import DomainDataset
from .metrics import per_label_kl
from .models import ModelBundle, forward_generator

logger = logging.getLogger(__name__)


class Direction(Enum):
    C2M = "C2M"
    M2C = "M2C"

    @classmethod
    def parse(cls, value: str) -> Direction:
        normalized = value.upper().replace("→", "2").replace("->", "2")
        for member in cls:
            if member.value == normalized:
                return member
        raise ValueError(f"Invalid direction: {value}. Must be C2M or M2C.")


def translate_images(
    bundle: ModelBundle, images: torch.Tensor, direction: Direction, batch_size: int = 8
) -> torch.Tensor:
    """Pseudo-domain images with the same shape as ``images``."""
    generator = bundle.g_cm if direction is Direction.C2M else bundle.g_mc
    generator.eval()
    device = next(generator.parameters()).device
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out.append(forward_generator(generator, images[start : start + batch_size].to(device)).cpu())
    return torch.cat(out)


@dataclass
class TranslationReport:
    direction: Direction
    count: int
    kl: dict[int, float | None]

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "direction": self.direction.value,
            "count": self.count,
            "kl": {str(k): v for k, v in self.kl.items()},
        }


def translate_split(
    bundle: ModelBundle,
    inputs: DomainDataset,
    real: DomainDataset,
    direction: Direction,
    out_dir: Path,
    bins: int = 64,
) -> TranslationReport:
    """Write ``pseudo.npz`` and ``kl.json`` (per-label KL(pseudo || real)) into ``out_dir``.

    Raises:
        ValueError: If either split has no masks to select label pixels with
    """
    if inputs.masks is None or real.masks is None:
        raise ValueError("KL report needs masks on both the input and the real split")
    pseudo = translate_images(bundle, inputs.images, direction)
    kl = per_label_kl(
        pseudo[:, 0].numpy(),
        inputs.masks.numpy(),
        real.images[:, 0].numpy(),
        real.masks.numpy(),
        bundle.num_labels,
        bins,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out_dir / "pseudo.npz",
        images=pseudo[:, 0].numpy(),
        scene_ids=np.asarray(inputs.scene_ids),
    )
    report = TranslationReport(direction, len(inputs), kl)
    save_json(out_dir / "kl.json", report.as_dict())
    for label, value in kl.items():
        if value is not None:
            logger.info("KL(pseudo || real) label %d: %.4f", label, value)
    return report
