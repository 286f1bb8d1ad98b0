"""Loss components and joint (image, probability-map) pair construction."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, fields
from enum import Enum

import torch
import torch.nn.functional as F

from .settings import AblationMask

PROB_EPS = 1e-7
SUM_TOLERANCE = 1e-3


class LossForm(Enum):
    """Adversarial objective family.

    ``log`` uses the non-saturating generator objective -log D(fake);
    ``log_saturating`` minimizes log(1 - D(fake)). Discriminators are identical
    for both log forms.
    """

    LEAST_SQUARES = "least_squares"
    LOG = "log"
    LOG_SATURATING = "log_saturating"


class Role(Enum):
    DISCRIMINATOR = "discriminator"
    GENERATOR = "generator"


class PairVariant(Enum):
    """What the structure discriminator sees."""

    SEG_MULTI = "seg_multi"  # i: foreground probability channels only
    SEG_AGG = "seg_agg"  # ii: aggregated SOI map only
    IMG_SEG_MULTI = "img_seg_multi"  # iii: image + foreground channels
    IMG_SEG_PER_SOI = "img_seg_per_soi"  # iv: one (image, channel) pair per SOI
    IMG_SEG_AGG = "img_seg_agg"  # v: image + aggregated SOI map (default)

    def input_channels(self, num_labels: int) -> int:
        """Input channels of each structure discriminator for this variant."""
        return {
            PairVariant.SEG_MULTI: num_labels - 1,
            PairVariant.SEG_AGG: 1,
            PairVariant.IMG_SEG_MULTI: num_labels,
            PairVariant.IMG_SEG_PER_SOI: 2,
            PairVariant.IMG_SEG_AGG: 2,
        }[self]

    def num_discriminators(self, num_labels: int) -> int:
        return num_labels - 1 if self is PairVariant.IMG_SEG_PER_SOI else 1


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_struct: float = 0.5
    lambda_seg: float = 5.0

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"Invalid {f.name}: {getattr(self, f.name)}. Must be >= 0.")


@dataclass
class ProbabilityMap:
    """Per-pixel K-channel softmax output (N, K, H, W)."""

    full: torch.Tensor

    @property
    def num_labels(self) -> int:
        return self.full.shape[1]

    @property
    def aggregated(self) -> torch.Tensor:
        return aggregate_soi_probability(self.full)

    def argmax(self) -> torch.Tensor:
        return self.full.argmax(dim=1)


@dataclass
class LossReport:
    """Loss components of one iteration.

    Fields hold tensors while the step is running and floats once detached.
    """

    adv_cm: float | torch.Tensor = 0.0
    adv_mc: float | torch.Tensor = 0.0
    cyc: float | torch.Tensor = 0.0
    struct_g: float | torch.Tensor = 0.0
    seg_bar_g: float | torch.Tensor = 0.0
    disc_m: float | torch.Tensor = 0.0
    disc_c: float | torch.Tensor = 0.0
    struct_d: float | torch.Tensor = 0.0
    seg_m: float | torch.Tensor = 0.0
    seg_bar: float | torch.Tensor = 0.0
    total_g: float | torch.Tensor = 0.0
    total_d: float | torch.Tensor = 0.0
    total_s: float | torch.Tensor = 0.0

    def detached(self) -> LossReport:
        values = {}
        for f in fields(self):
            v = getattr(self, f.name)
            values[f.name] = float(v.detach().item()) if isinstance(v, torch.Tensor) else float(v)
        return LossReport(**values)

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self.detached(), f.name)) for f in fields(self)}

    def non_finite(self) -> list[str]:
        return [name for name, v in self.as_dict().items() if not math.isfinite(v)]


class NonFiniteLogitsError(ValueError):
    """A discriminator produced NaN or infinite logits."""


def _check_logits(*tensors: torch.Tensor | None) -> None:
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise NonFiniteLogitsError("Non-finite logits")


def adversarial_loss(
    real_logits: torch.Tensor | None,
    fake_logits: torch.Tensor,
    role: Role,
    form: LossForm = LossForm.LEAST_SQUARES,
) -> torch.Tensor:
    """Objective to minimize for a discriminator or a generator.

    Discriminator role scores real logits against fake logits; generator role
    only needs the fake logits.

    Raises:
        ValueError: On non-finite logits, a missing or mis-shaped real batch
    """
    _check_logits(real_logits, fake_logits)
    if role is Role.GENERATOR:
        if form is LossForm.LEAST_SQUARES:
            return ((fake_logits - 1.0) ** 2).mean()
        if form is LossForm.LOG:
            return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
        # log(1 - sigmoid(x)) = -softplus(x)
        return (-F.softplus(fake_logits)).mean()

    if real_logits is None:
        raise ValueError("Discriminator role needs real logits")
    if real_logits.shape != fake_logits.shape:
        raise ValueError(
            f"Real and fake logit maps differ: {tuple(real_logits.shape)} vs "
            f"{tuple(fake_logits.shape)}"
        )
    if form is LossForm.LEAST_SQUARES:
        return ((real_logits - 1.0) ** 2).mean() + (fake_logits**2).mean()
    return F.binary_cross_entropy_with_logits(
        real_logits, torch.ones_like(real_logits)
    ) + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its round trip."""
    if original.shape != reconstructed.shape:
        raise ValueError(
            f"Shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}"
        )
    return F.l1_loss(reconstructed, original)


def aggregate_soi_probability(full_map: torch.Tensor) -> torch.Tensor:
    """Sum the foreground channels into one SOI map psi (N, 1, H, W).

    Channel 0 is background, so psi = 1 - background up to float error.

    Raises:
        ValueError: If per-pixel channel sums deviate from 1 by more than 1e-3
    """
    if full_map.dim() != 4 or full_map.shape[1] < 2:
        raise ValueError(f"Expected an (N, K>=2, H, W) map, got {tuple(full_map.shape)}")
    deviation = (full_map.detach().sum(dim=1) - 1.0).abs().max()
    if deviation > SUM_TOLERANCE:
        raise ValueError(f"Channel sums deviate from 1 by {float(deviation):.3g}")
    return full_map[:, 1:].sum(dim=1, keepdim=True).clamp(0.0, 1.0)


def _cross_entropy(prob: torch.Tensor, label_mask: torch.Tensor) -> torch.Tensor:
    log_prob = torch.log(prob.clamp(min=PROB_EPS))
    return F.nll_loss(log_prob, label_mask.long())


def segmentation_loss(
    pred_sm: torch.Tensor | ProbabilityMap,
    pred_scm: torch.Tensor | ProbabilityMap,
    label_mask: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel cross-entropy of both segmentor branches against source labels.

    Returns:
        Tuple of (L_seg^M, L_seg^M-bar); L_seg is their sum.

    Raises:
        ValueError: If a label value is >= K
    """
    if isinstance(pred_sm, ProbabilityMap):
        pred_sm = pred_sm.full
    if isinstance(pred_scm, ProbabilityMap):
        pred_scm = pred_scm.full
    num_labels = pred_sm.shape[1]
    if int(label_mask.max()) >= num_labels or int(label_mask.min()) < 0:
        raise ValueError(f"Label values must be in [0, {num_labels - 1}]")
    return _cross_entropy(pred_sm, label_mask), _cross_entropy(pred_scm, label_mask)


def make_joint_pair(
    image: torch.Tensor,
    prob_map: torch.Tensor | ProbabilityMap,
    variant: PairVariant = PairVariant.IMG_SEG_AGG,
) -> torch.Tensor | list[torch.Tensor]:
    """Build structure-discriminator input(s) from an image and its probability map.

    Variant iv returns a list of K-1 two-channel stacks; every other variant a
    single stack.

    Raises:
        ValueError: If image and map are not spatially aligned
    """
    full = prob_map.full if isinstance(prob_map, ProbabilityMap) else prob_map
    if image.dim() != 4 or image.shape[1] != 1:
        raise ValueError(f"Expected a (N, 1, H, W) image, got {tuple(image.shape)}")
    if full.shape[0] != image.shape[0] or full.shape[2:] != image.shape[2:]:
        raise ValueError(
            f"Image {tuple(image.shape)} and probability map {tuple(full.shape)} are not aligned"
        )
    foreground = full[:, 1:]
    if variant is PairVariant.SEG_MULTI:
        return foreground
    if variant is PairVariant.SEG_AGG:
        return aggregate_soi_probability(full)
    if variant is PairVariant.IMG_SEG_MULTI:
        return torch.cat([image, foreground], dim=1)
    if variant is PairVariant.IMG_SEG_PER_SOI:
        return [torch.cat([image, foreground[:, k : k + 1]], dim=1) for k in range(foreground.shape[1])]
    return torch.cat([image, aggregate_soi_probability(full)], dim=1)


def _as_list(logits: torch.Tensor | Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [logits] if isinstance(logits, torch.Tensor) else list(logits)


def structure_discriminator_loss(
    logits_real_pair: torch.Tensor | Sequence[torch.Tensor],
    logits_fake_pair: torch.Tensor | Sequence[torch.Tensor],
    form: LossForm = LossForm.LEAST_SQUARES,
) -> torch.Tensor:
    """Discriminator objective over joint pairs, averaged over per-SOI discriminators."""
    reals, fakes = _as_list(logits_real_pair), _as_list(logits_fake_pair)
    if len(reals) != len(fakes):
        raise ValueError(f"Got {len(reals)} real and {len(fakes)} fake pair logits")
    losses = [adversarial_loss(r, f, Role.DISCRIMINATOR, form) for r, f in zip(reals, fakes)]
    return torch.stack(losses).mean()


def structure_generator_loss(
    logits_fake_pair: torch.Tensor | Sequence[torch.Tensor],
    form: LossForm = LossForm.LEAST_SQUARES,
) -> torch.Tensor:
    """Fooling objective for pairs built with the S_C^M branch."""
    losses = [adversarial_loss(None, f, Role.GENERATOR, form) for f in _as_list(logits_fake_pair)]
    return torch.stack(losses).mean()


def total_generator_objective(
    report: LossReport, weights: LossWeights, mask: AblationMask | None = None
) -> torch.Tensor | float:
    """L_adv + l_cyc L_cyc + l_struct L_struct^G + l_seg L_seg^M-bar, masked per setting."""
    mask = mask or AblationMask()
    total = 0.0
    if mask.adv_cm:
        total = total + report.adv_cm
    if mask.adv_mc:
        total = total + report.adv_mc
    if mask.cyc:
        total = total + weights.lambda_cyc * report.cyc
    if mask.struct:
        total = total + weights.lambda_struct * report.struct_g
    if mask.seg_coupled:
        total = total + weights.lambda_seg * report.seg_bar_g
    return total


def total_discriminator_objective(
    report: LossReport, weights: LossWeights, mask: AblationMask | None = None
) -> torch.Tensor | float:
    """L_adv (both discriminators) + l_struct L_struct^D, masked per setting."""
    mask = mask or AblationMask()
    total = 0.0
    if mask.adv_cm:
        total = total + report.disc_m
    if mask.adv_mc:
        total = total + report.disc_c
    if mask.struct:
        total = total + weights.lambda_struct * report.struct_d
    return total
