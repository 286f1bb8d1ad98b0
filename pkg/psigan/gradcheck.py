"""Central finite-difference checks of autograd parameter gradients."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class GradientCheckResult:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        """|a - n| / max(|a|, |n|, 1e-3); the floor keeps near-zero gradients meaningful."""
        scale = max(abs(self.analytic), abs(self.numeric), 1e-3)
        return abs(self.analytic - self.numeric) / scale


def check_parameter_gradients(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    num_params: int = 10,
    step: float = 1e-6,
    seed: int = 0,
) -> list[GradientCheckResult]:
    """Compare analytic and central-difference gradients of ``loss_fn``.

    ``num_params`` scalar entries are drawn at random (uniformly over all
    trainable scalars) from ``module``. The module should be float64 and
    ``loss_fn`` a deterministic function of its parameters. Batch norm in train
    mode qualifies: it normalizes with the statistics of the current batch.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not named:
        raise ValueError("Module has no trainable parameters")
    sizes = torch.tensor([p.numel() for _, p in named])
    offsets = torch.cumsum(sizes, 0) - sizes
    generator = torch.Generator().manual_seed(seed)
    flat = torch.randperm(int(sizes.sum()), generator=generator)[:num_params]

    module.zero_grad(set_to_none=True)
    loss_fn().backward()

    results = []
    for flat_index in flat.tolist():
        which = int(torch.searchsorted(offsets, torch.tensor(flat_index), right=True)) - 1
        name, param = named[which]
        index = flat_index - int(offsets[which])
        analytic = 0.0 if param.grad is None else float(param.grad.view(-1)[index])
        with torch.no_grad():
            view = param.view(-1)
            original = float(view[index])
            view[index] = original + step
            plus = float(loss_fn())
            view[index] = original - step
            minus = float(loss_fn())
            view[index] = original
        results.append(
            GradientCheckResult(name, index, analytic, (plus - minus) / (2 * step))
        )
    return results
