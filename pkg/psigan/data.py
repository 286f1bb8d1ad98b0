"""In-memory datasets, deterministic batch order and the historical fake pool."""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np
import torch

from .synthdata import DatasetManifest, Domain, load_image, load_mask

SOURCE_STREAM = 0
TARGET_STREAM = 1


@dataclass
class DomainDataset:
    """Preprocessed images (N, 1, H, W) in [-1, 1] with optional masks (N, H, W)."""

    images: torch.Tensor
    masks: torch.Tensor | None
    scene_ids: list[int]
    domain: Domain

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, indices: np.ndarray) -> tuple[torch.Tensor, torch.Tensor | None]:
        idx = torch.as_tensor(indices, dtype=torch.long)
        masks = self.masks[idx] if self.masks is not None else None
        return self.images[idx], masks

    def subset(self, count: int) -> DomainDataset:
        count = min(count, len(self))
        return DomainDataset(
            self.images[:count],
            self.masks[:count] if self.masks is not None else None,
            self.scene_ids[:count],
            self.domain,
        )


def load_split(
    manifest: DatasetManifest,
    split: str,
    dtype: torch.dtype = torch.float32,
    eval_masks: bool = False,
) -> DomainDataset:
    """Load and preprocess one split.

    Target-train masks are only attached when ``eval_masks`` is set; the
    trainer never asks for them.
    """
    if split not in manifest.splits:
        raise ValueError(f"Unknown split: {split}. Must be one of {', '.join(manifest.splits)}.")
    entries = manifest.splits[split]
    pipeline = manifest.preprocessing
    images = [pipeline.apply(load_image(manifest.resolve(e.image))) for e in entries]
    mask_paths: list[str | None] = [e.mask for e in entries]
    if split == "target_train" and eval_masks:
        extra = manifest.eval_masks()
        mask_paths = [extra[e.scene_id] for e in entries]
    masks = None
    if all(p is not None for p in mask_paths):
        masks = torch.as_tensor(
            np.stack([load_mask(manifest.resolve(p)) for p in mask_paths]), dtype=torch.long
        )
    domain = Domain.A if split == "source_train" else Domain.B
    return DomainDataset(
        images=torch.as_tensor(np.stack(images)[:, None], dtype=dtype),
        masks=masks,
        scene_ids=[e.scene_id for e in entries],
        domain=domain,
    )


def batch_indices(
    size: int, batch_size: int, seed: int, stream: int, epoch: int, iteration: int
) -> np.ndarray:
    """Indices of one batch; a pure function of its coordinates, so resume needs no RNG state."""
    order = np.random.default_rng([seed, stream, epoch]).permutation(size)
    positions = (np.arange(batch_size) + iteration * batch_size) % size
    return order[positions]


class ImagePool:
    """Buffer of previously generated images mixed into discriminator updates."""

    def __init__(self, size: int, seed: int = 0) -> None:
        self.size = size
        self._images: list[torch.Tensor] = []
        self._rng = random.Random(seed)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return images
        out = []
        for image in images.detach():
            image = image.unsqueeze(0)
            if len(self._images) < self.size:
                self._images.append(image.clone())
                out.append(image)
            elif self._rng.random() > 0.5:
                slot = self._rng.randrange(self.size)
                out.append(self._images[slot].clone())
                self._images[slot] = image.clone()
            else:
                out.append(image)
        return torch.cat(out, dim=0)

    def state_dict(self) -> dict:
        return {"images": [t.clone() for t in self._images], "rng": self._rng.getstate()}

    def load_state_dict(self, state: dict) -> None:
        self._images = [t.clone() for t in state["images"]]
        self._rng.setstate(state["rng"])
