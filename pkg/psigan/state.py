"""Training state: model bundle, optimizers, counters and loss history."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import torch

from .config import TrainConfig, config_hash
from .data import ImagePool
from .losses import LossReport
from .models import ModelBundle, build_bundle

GAP_WINDOW = 200


class LossHistory:
    """Rolling statistics over recent iterations."""

    def __init__(self, window: int = GAP_WINDOW) -> None:
        self.window = window
        self.total = 0
        self.non_finite = 0
        self._gaps: deque[float] = deque(maxlen=window)
        self._seg: deque[float] = deque(maxlen=window)

    def record(self, report: LossReport) -> None:
        """Record a detached report."""
        self.total += 1
        self._gaps.append(abs(float(report.struct_g) - float(report.struct_d)))
        self._seg.append(float(report.seg_m))

    @property
    def struct_gap(self) -> float | None:
        """Rolling mean of |L_struct^G - L_struct^D|."""
        if not self._gaps:
            return None
        return sum(self._gaps) / len(self._gaps)

    @property
    def seg_mean(self) -> float | None:
        if not self._seg:
            return None
        return sum(self._seg) / len(self._seg)

    def state_dict(self) -> dict:
        return {
            "window": self.window,
            "total": self.total,
            "non_finite": self.non_finite,
            "gaps": list(self._gaps),
            "seg": list(self._seg),
        }

    def load_state_dict(self, state: dict) -> None:
        self.window = state["window"]
        self.total = state["total"]
        self.non_finite = state["non_finite"]
        self._gaps = deque(state["gaps"], maxlen=self.window)
        self._seg = deque(state["seg"], maxlen=self.window)

    def __str__(self) -> str:
        s = f"{self.total} iterations"
        if self.seg_mean is not None:
            s += f"  seg: {self.seg_mean:.4f}"
        if self.struct_gap is not None:
            s += f"  struct gap: {self.struct_gap:.4f}"
        return s


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizers: dict[str, torch.optim.Optimizer]
    config: TrainConfig
    num_labels: int
    epoch: int = 0
    iteration: int = 0
    global_step: int = 0
    pools: dict[str, ImagePool] = field(default_factory=dict)
    history: LossHistory = field(default_factory=LossHistory)
    manifest_digest: str | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def build_optimizers(bundle: ModelBundle, config: TrainConfig) -> dict[str, torch.optim.Optimizer]:
    """One Adam per update phase; the shared decoder sits once in the segmentor group."""
    betas = (config.beta1, config.beta2)
    return {
        "G": torch.optim.Adam(bundle.generator_parameters(), lr=config.lr, betas=betas),
        "D": torch.optim.Adam(bundle.discriminator_parameters(), lr=config.lr, betas=betas),
        "S": torch.optim.Adam(bundle.segmentor_parameters(), lr=config.lr, betas=betas),
    }


def build_state(config: TrainConfig, num_labels: int, manifest_digest: str | None = None) -> TrainState:
    bundle = build_bundle(
        config.preset, num_labels, config.pair_variant, config.segmentor_mode, config.seed
    )
    pools = {
        "fake_m": ImagePool(config.pool_size, seed=config.seed),
        "fake_c": ImagePool(config.pool_size, seed=config.seed + 1),
    }
    return TrainState(
        bundle=bundle,
        optimizers=build_optimizers(bundle, config),
        config=config,
        num_labels=num_labels,
        pools=pools,
        manifest_digest=manifest_digest,
    )
