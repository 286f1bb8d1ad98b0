"""Intensity standardization, percentile clipping and signed-unit normalization.

The pipeline order is fixed: standardize -> clip -> normalize. Both domains go
through the same fitted pipeline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DECILES: tuple[float, ...] = (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0)


@dataclass
class IntensityPipelineConfig:
    """How the pipeline is fitted from a reference image."""

    clip_percentile: float = 95.0
    landmark_percentiles: tuple[float, ...] = DECILES
    target_lo: float = -1.0
    target_hi: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.clip_percentile <= 100:
            raise ValueError(
                f"Invalid clip_percentile: {self.clip_percentile}. Must be in (0, 100]."
            )
        if not self.target_lo < self.target_hi:
            raise ValueError(
                f"Invalid target range: [{self.target_lo}, {self.target_hi}]. lo must be < hi."
            )
        inner = list(self.landmark_percentiles)
        if any(not 0 < p < 100 for p in inner) or inner != sorted(set(inner)):
            raise ValueError("landmark_percentiles must be strictly increasing within (0, 100)")


@dataclass
class IntensityPipeline:
    """A fitted pipeline; serialized into the dataset manifest.

    ``reference_landmarks`` is None for the identity standardization.
    """

    reference_landmarks: list[float] | None = None
    landmark_percentiles: list[float] = field(default_factory=lambda: list(DECILES))
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    target_lo: float = -1.0
    target_hi: float = 1.0

    @classmethod
    def identity(cls, lo: float = -1.0, hi: float = 1.0) -> IntensityPipeline:
        """A pipeline that leaves images already in [lo, hi] untouched."""
        return cls(reference_landmarks=None, clip_lo=lo, clip_hi=hi, target_lo=lo, target_hi=hi)

    def apply(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if self.reference_landmarks is not None:
            image, _ = landmark_standardize(
                image, self.reference_landmarks, self.landmark_percentiles
            )
        image = percentile_clip(image, reference_hi=self.clip_hi, lo=self.clip_lo)
        unit = normalize_signed_unit(image, (self.clip_lo, self.clip_hi))
        if (self.target_lo, self.target_hi) == (-1.0, 1.0):
            return unit
        return self.target_lo + (unit + 1.0) * 0.5 * (self.target_hi - self.target_lo)

    def invert(self, image: np.ndarray) -> np.ndarray:
        """Map pipeline output back to the clipped, standardized intensity scale."""
        unit = -1.0 + 2.0 * (np.asarray(image, dtype=np.float64) - self.target_lo) / (
            self.target_hi - self.target_lo
        )
        return denormalize_signed_unit(unit, (self.clip_lo, self.clip_hi))


def _check_finite(image: np.ndarray) -> None:
    bad = ~np.isfinite(image)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"Non-finite pixel at {idx}")


def image_landmarks(
    image: np.ndarray, percentiles: tuple[float, ...] | list[float] = DECILES
) -> np.ndarray:
    """Landmarks of an image: its minimum, the given percentiles, its maximum."""
    image = np.asarray(image, dtype=np.float64)
    inner = np.percentile(image, list(percentiles))
    return np.concatenate([[image.min()], inner, [image.max()]])


def percentile_clip(
    image: np.ndarray,
    percentile: float = 95.0,
    reference_hi: float | None = None,
    lo: float = 0.0,
) -> np.ndarray:
    """Clip an image to [lo, reference_hi].

    ``reference_hi`` is the given percentile of the reference image; when it is
    None the percentile is taken from ``image`` itself.

    Raises:
        ValueError: On a percentile outside (0, 100], a bound not above ``lo`` or
            non-finite pixels
    """
    if not 0 < percentile <= 100:
        raise ValueError(f"Invalid percentile: {percentile}. Must be in (0, 100].")
    image = np.asarray(image, dtype=np.float64)
    _check_finite(image)
    if reference_hi is None:
        reference_hi = float(np.percentile(image, percentile))
    if reference_hi <= lo:
        raise ValueError(f"Invalid reference_hi: {reference_hi}. Must be > {lo}.")
    return np.clip(image, lo, reference_hi)


def landmark_standardize(
    image: np.ndarray,
    reference_landmarks: np.ndarray | list[float],
    percentiles: tuple[float, ...] | list[float] = DECILES,
) -> tuple[np.ndarray, bool]:
    """Piecewise-linearly map the image's own landmarks onto the reference ones.

    Returns:
        Tuple of (standardized image, degenerate flag). A degenerate image
        (zero intensity spread) is returned unchanged with the flag set.

    Raises:
        ValueError: If the reference landmarks are not strictly increasing or
            do not match the number of percentiles
    """
    reference = np.asarray(reference_landmarks, dtype=np.float64)
    if reference.shape != (len(percentiles) + 2,):
        raise ValueError(
            f"Expected {len(percentiles) + 2} reference landmarks, got {reference.shape[0]}"
        )
    if np.any(np.diff(reference) <= 0):
        raise ValueError("reference_landmarks must be strictly increasing")
    image = np.asarray(image, dtype=np.float64)
    _check_finite(image)
    own = image_landmarks(image, percentiles)
    if own[-1] - own[0] <= 0:
        logger.warning("Degenerate image (zero intensity spread); left unchanged")
        return image.copy(), True
    # Tied landmarks (flat histogram regions) keep their first mapping.
    xp, first = np.unique(own, return_index=True)
    fp = reference[first]
    return np.interp(image, xp, fp), False


def normalize_signed_unit(image: np.ndarray, known_range: tuple[float, float]) -> np.ndarray:
    """Affinely map [lo, hi] onto [-1, 1].

    Raises:
        ValueError: If hi <= lo, or a pixel lies outside known_range (the message
            names the pixel and the violated bound)
    """
    lo, hi = float(known_range[0]), float(known_range[1])
    if not hi > lo:
        raise ValueError(f"Invalid known_range: [{lo}, {hi}]. hi must be > lo.")
    image = np.asarray(image, dtype=np.float64)
    _check_finite(image)
    below = image < lo
    if below.any():
        idx = tuple(int(i) for i in np.argwhere(below)[0])
        raise ValueError(f"Pixel {idx} value {image[idx]} is below lower bound {lo}")
    above = image > hi
    if above.any():
        idx = tuple(int(i) for i in np.argwhere(above)[0])
        raise ValueError(f"Pixel {idx} value {image[idx]} is above upper bound {hi}")
    return 2.0 * (image - lo) / (hi - lo) - 1.0


def denormalize_signed_unit(image: np.ndarray, known_range: tuple[float, float]) -> np.ndarray:
    lo, hi = float(known_range[0]), float(known_range[1])
    return lo + (np.asarray(image, dtype=np.float64) + 1.0) * 0.5 * (hi - lo)


def fit_pipeline(
    reference_image: np.ndarray, config: IntensityPipelineConfig | None = None
) -> IntensityPipeline:
    """Fit landmarks and the clip bound from a single reference image.

    Raises:
        ValueError: If the reference image is degenerate
    """
    config = config or IntensityPipelineConfig()
    reference_image = np.asarray(reference_image, dtype=np.float64)
    _check_finite(reference_image)
    landmarks = image_landmarks(reference_image, config.landmark_percentiles)
    if np.any(np.diff(landmarks) <= 0):
        raise ValueError("Reference image landmarks are not strictly increasing")
    # The reference standardized onto its own landmarks is itself.
    clip_hi = float(np.percentile(reference_image, config.clip_percentile))
    return IntensityPipeline(
        reference_landmarks=[float(v) for v in landmarks],
        landmark_percentiles=list(config.landmark_percentiles),
        clip_lo=0.0,
        clip_hi=clip_hi,
        target_lo=config.target_lo,
        target_hi=config.target_hi,
    )
