"""Synthetic two-domain anatomy: scenes, domain styles, rendering and datasets.

Every scene is a set of rotated ellipses (optionally with a low-frequency
boundary wobble) on a body-shaped background. The same scene rendered under
the source style (A, "CT-like") and the target style (B, "MRI-like") yields
identical masks and different intensities.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .preprocess import IntensityPipeline, IntensityPipelineConfig, fit_pipeline

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILE = "manifest.json"
EVAL_MASKS_FILE = "eval_masks.json"
MIN_CANVAS = 32
MIN_AXIS = 3.0
RAW_RANGE: tuple[float, float] = (0.0, 4095.0)

SPLITS = ("source_train", "target_train", "target_val", "target_test")


class Domain(Enum):
    """Imaging domain: A is the labeled source, B the unlabeled target."""

    A = "A"
    B = "B"


class ManifestExistsError(FileExistsError):
    """Raised when a dataset would overwrite an existing manifest."""


@dataclass(frozen=True)
class Organ:
    """One foreground structure: a rotated ellipse with a boundary wobble."""

    label: int
    center: tuple[float, float]  # (row, col) in pixels
    axes: tuple[float, float]  # semi-axes (along, across) in pixels
    rotation: float  # radians
    texture_seed: int
    wobble: float = 0.0
    wobble_lobes: int = 3
    wobble_phase: float = 0.0

    @property
    def bounding_radius(self) -> float:
        return max(self.axes) * (1.0 + self.wobble)

    def contains(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Analytic membership test for pixel centers."""
        dy = rows - self.center[0]
        dx = cols - self.center[1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = (dx * c + dy * s) / self.axes[0]
        v = (-dx * s + dy * c) / self.axes[1]
        radius = 1.0
        if self.wobble:
            theta = np.arctan2(v, u)
            radius = 1.0 + self.wobble * np.cos(self.wobble_lobes * theta + self.wobble_phase)
        return u * u + v * v <= radius * radius

    def area(self) -> float:
        """Analytic area of the wobble-free ellipse."""
        return math.pi * self.axes[0] * self.axes[1]

    def perimeter(self) -> float:
        """Ramanujan's approximation of the ellipse perimeter."""
        a, b = self.axes
        return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))


@dataclass(frozen=True)
class AnatomyScene:
    """Latent anatomy shared by both domains."""

    scene_id: int
    canvas_size: int
    num_labels: int
    organs: tuple[Organ, ...]
    body_axes: tuple[float, float]

    def rasterize(self) -> np.ndarray:
        """Integer label mask (0 = background); no anti-aliasing."""
        rows, cols = np.mgrid[0 : self.canvas_size, 0 : self.canvas_size].astype(np.float64)
        mask = np.zeros((self.canvas_size, self.canvas_size), dtype=np.uint8)
        for organ in self.organs:
            mask[organ.contains(rows, cols)] = organ.label
        return mask

    def body_mask(self) -> np.ndarray:
        rows, cols = np.mgrid[0 : self.canvas_size, 0 : self.canvas_size].astype(np.float64)
        center = (self.canvas_size - 1) / 2.0
        u = (cols - center) / self.body_axes[1]
        v = (rows - center) / self.body_axes[0]
        return u * u + v * v <= 1.0


@dataclass
class DomainStyle:
    """Per-domain appearance. Index 0 of the label arrays is the body background."""

    domain: Domain
    label_means: tuple[float, ...]
    label_stds: tuple[float, ...]
    air_level: float = 0.0
    noise_amplitude: float = 30.0
    bias_amplitude: float = 0.0
    texture_frequency: float = 0.15
    raw_range: tuple[float, float] = RAW_RANGE

    def validate(self, num_labels: int) -> None:
        if len(self.label_means) != num_labels or len(self.label_stds) != num_labels:
            raise ValueError(
                f"Style {self.domain.value} needs {num_labels} label means/stds, "
                f"got {len(self.label_means)}/{len(self.label_stds)}"
            )
        lo, hi = self.raw_range
        if not lo < hi:
            raise ValueError(f"Invalid raw_range: {self.raw_range}")
        if any(not lo <= m <= hi for m in self.label_means):
            raise ValueError(f"Style {self.domain.value} label means fall outside raw_range")
        if self.noise_amplitude < 0 or self.bias_amplitude < 0 or min(self.label_stds) < 0:
            raise ValueError("Noise, bias and std amplitudes must be >= 0")
        if not 0 <= self.bias_amplitude < 1:
            raise ValueError("bias_amplitude must be in [0, 1)")


def default_style(domain: Domain, num_labels: int) -> DomainStyle:
    """Default appearance for a domain.

    Domain B reverses the organ intensity ordering of domain A and adds a
    multiplicative bias field, so an identity mapping between domains fails.
    """
    organs = num_labels - 1
    # Organs stay below the body background so a 95th-percentile clip only
    # touches background pixels.
    ladder = [700.0 + 1200.0 * i / max(organs - 1, 1) for i in range(organs)]
    if domain is Domain.A:
        return DomainStyle(
            domain=Domain.A,
            label_means=(2500.0, *ladder),
            label_stds=(60.0,) + (50.0,) * organs,
            air_level=0.0,
            noise_amplitude=25.0,
            bias_amplitude=0.0,
            texture_frequency=0.12,
        )
    return DomainStyle(
        domain=Domain.B,
        label_means=(2600.0, *reversed(ladder)),
        label_stds=(80.0,) + (70.0,) * organs,
        air_level=50.0,
        noise_amplitude=40.0,
        bias_amplitude=0.25,
        texture_frequency=0.2,
    )


@dataclass
class DomainSample:
    """One rendered image (raw intensities, or preprocessed to [-1, 1]) and its mask."""

    image: np.ndarray
    mask: np.ndarray | None
    domain: Domain
    scene_id: int

    def __post_init__(self) -> None:
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ValueError(
                f"Image shape {self.image.shape} does not match mask shape {self.mask.shape}"
            )


@dataclass
class SynthConfig:
    """Dataset generation parameters. Styles default to ``default_style``."""

    seed: int = 0
    num_labels: int = 4
    canvas: int = 64
    source_train: int = 200
    target_train: int = 200
    target_val: int = 20
    target_test: int = 50
    wobble: float = 0.08
    style_a: DomainStyle | None = None
    style_b: DomainStyle | None = None

    def __post_init__(self) -> None:
        for split in SPLITS:
            if getattr(self, split) <= 0:
                raise ValueError(f"Split {split} needs a positive sample count")

    def styles(self) -> tuple[DomainStyle, DomainStyle]:
        style_a = self.style_a or default_style(Domain.A, self.num_labels)
        style_b = self.style_b or default_style(Domain.B, self.num_labels)
        style_a.validate(self.num_labels)
        style_b.validate(self.num_labels)
        return style_a, style_b

    def split_ranges(self) -> dict[str, range]:
        """Disjoint scene-id ranges per split; source and target never share a scene."""
        ranges: dict[str, range] = {}
        start = 0
        for split in SPLITS:
            count = getattr(self, split)
            ranges[split] = range(start, start + count)
            start += count
        return ranges


SYNTH_PRESETS: dict[str, SynthConfig] = {
    "desk": SynthConfig(),
    "smoke": SynthConfig(
        canvas=32, source_train=8, target_train=8, target_val=4, target_test=4
    ),
}


def get_synth_preset(name: str, seed: int = 0) -> SynthConfig:
    if name not in SYNTH_PRESETS:
        raise ValueError(f"Unknown preset: {name}. Must be one of {', '.join(SYNTH_PRESETS)}.")
    return dataclasses.replace(SYNTH_PRESETS[name], seed=seed)


@dataclass
class SampleEntry:
    scene_id: int
    image: str
    mask: str | None = None


@dataclass
class DatasetManifest:
    """Index of a generated dataset; paths are relative to the dataset root."""

    seed: int
    num_labels: int
    canvas: int
    splits: dict[str, list[SampleEntry]]
    styles: dict[str, DomainStyle]
    preprocessing: IntensityPipeline
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path | None = field(default=None, compare=False)

    def to_json(self) -> str:
        from .config import to_dict

        data = to_dict(self)
        data.pop("root")
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root: Path | None = None) -> DatasetManifest:
        from .config import from_dict

        data = json.loads(text)
        version = data.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ValueError(
                f"Manifest schema_version {version} is not supported "
                f"(expected {MANIFEST_SCHEMA_VERSION}); rebuild the dataset with `synth`"
            )
        manifest = from_dict(cls, data)
        manifest.root = root
        return manifest

    @classmethod
    def load(cls, path: Path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        return cls.from_json(path.read_text(), root=path.parent)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    def scene_ids(self, split: str) -> set[int]:
        return {entry.scene_id for entry in self.splits[split]}

    def resolve(self, relative: str) -> Path:
        if self.root is None:
            raise ValueError("Manifest has no root directory; load it from disk first")
        return self.root / relative

    def eval_masks(self) -> dict[int, str]:
        """Eval-only masks for target-train scenes (never given to the trainer)."""
        path = self.resolve(EVAL_MASKS_FILE)
        with open(path) as f:
            return {int(k): v for k, v in json.load(f).items()}


def _stream_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _organ_profile(label: int, num_labels: int, canvas: int) -> tuple[tuple[float, float], float]:
    """Major-axis range and aspect ratio for a label.

    Labels differ in size and elongation, so the correspondence between
    source and target organs is identifiable from shape alone.
    """
    step = (label - 1) / max(num_labels - 2, 1)
    scale = 1.0 - 0.5 * step
    top = max(MIN_AXIS + 1.0, canvas * 0.17 * scale)
    aspect = (0.9, 0.5, 0.8, 0.6)[(label - 1) % 4]
    return (max(MIN_AXIS, 0.8 * top), top), aspect


def sample_anatomy(
    seed: int, num_labels: int, canvas: int, wobble: float = 0.0, scene_id: int = 0
) -> AnatomyScene:
    """Sample K-1 non-overlapping organs fully inside the canvas.

    Raises:
        ValueError: If K < 2, the canvas is smaller than 32 px, or the organs
            cannot be placed
    """
    if num_labels < 2:
        raise ValueError("K must be ≥ 2")
    if canvas < MIN_CANVAS:
        raise ValueError(f"canvas must be ≥ {MIN_CANVAS}, got {canvas}")
    if not 0 <= wobble < 0.5:
        raise ValueError(f"Invalid wobble: {wobble}. Must be in [0, 0.5).")

    rng = np.random.default_rng(seed)
    body_axes = (canvas * 0.45, canvas * 0.47)
    body_center = (canvas - 1) / 2.0

    organs: list[Organ] = []
    for label in range(1, num_labels):
        major_range, aspect = _organ_profile(label, num_labels, canvas)
        for _ in range(200):
            major = float(rng.uniform(*major_range))
            axes = (major, max(MIN_AXIS, major * aspect))
            radius = max(axes) * (1.0 + wobble)
            lo, hi = radius + 1.0, canvas - 2.0 - radius
            if lo >= hi:
                continue
            center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
            inside_body = (
                ((center[0] - body_center) / (body_axes[0] - radius)) ** 2
                + ((center[1] - body_center) / (body_axes[1] - radius)) ** 2
                <= 1.0
            )
            overlaps = any(
                math.dist(center, other.center) < radius + other.bounding_radius + 1.0
                for other in organs
            )
            if not inside_body or overlaps:
                continue
            organs.append(
                Organ(
                    label=label,
                    center=center,
                    axes=axes,
                    rotation=float(rng.uniform(0.0, math.pi)),
                    texture_seed=int(rng.integers(0, 2**31 - 1)),
                    wobble=wobble,
                    wobble_lobes=int(rng.integers(2, 5)),
                    wobble_phase=float(rng.uniform(0.0, 2 * math.pi)),
                )
            )
            break
        else:
            raise ValueError(
                f"canvas {canvas} is too small to place {num_labels - 1} non-degenerate shapes"
            )
    return AnatomyScene(
        scene_id=scene_id,
        canvas_size=canvas,
        num_labels=num_labels,
        organs=tuple(organs),
        body_axes=body_axes,
    )


def _bias_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth field in [-1, 1] built from a few low-frequency cosines."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) / size
    field_ = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += np.cos(2 * math.pi * (fy * rows + fx * cols) + phase)
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def render(scene: AnatomyScene, style: DomainStyle, seed: int) -> DomainSample:
    """Render a scene under a domain style; the mask depends on the scene only."""
    style.validate(scene.num_labels)
    rng = np.random.default_rng(seed)
    size = scene.canvas_size
    mask = scene.rasterize()
    body = scene.body_mask() | (mask > 0)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)

    image = np.full((size, size), style.air_level, dtype=np.float64)
    regions = [(0, body & (mask == 0), _stream_seed(scene.scene_id, 0))]
    regions += [(o.label, mask == o.label, o.texture_seed) for o in scene.organs]
    for label, region, texture_seed in regions:
        texture_rng = np.random.default_rng(texture_seed)
        angle = texture_rng.uniform(0, math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(
            2 * math.pi * style.texture_frequency * (cols * math.cos(angle) + rows * math.sin(angle))
            + phase
        )
        # sqrt(2) * sin has unit variance over a random phase.
        values = style.label_means[label] + style.label_stds[label] * math.sqrt(2.0) * wave
        image[region] = values[region]

    if style.bias_amplitude > 0:
        image *= 1.0 + style.bias_amplitude * _bias_field(rng, size)
    if style.noise_amplitude > 0:
        image += style.noise_amplitude * rng.standard_normal((size, size))
    image = np.clip(image, *style.raw_range)
    return DomainSample(image=image, mask=mask, domain=style.domain, scene_id=scene.scene_id)


def save_image(path: Path, image: np.ndarray) -> None:
    """Lossless 16-bit grayscale PNG of raw intensities."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(image).astype(np.uint16)).save(path, format="PNG")


def save_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8)).save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64)


def _render_entry(config: SynthConfig, scene_id: int, style: DomainStyle) -> DomainSample:
    scene = sample_anatomy(
        _stream_seed(config.seed, scene_id, 0),
        config.num_labels,
        config.canvas,
        wobble=config.wobble,
        scene_id=scene_id,
    )
    domain_code = 1 if style.domain is Domain.A else 2
    return render(scene, style, _stream_seed(config.seed, scene_id, domain_code))


def build_dataset(
    config: SynthConfig,
    out_dir: Path,
    pipeline_config: IntensityPipelineConfig | None = None,
    force: bool = False,
) -> DatasetManifest:
    """Generate every split, write PNG samples and the manifest.

    Target-train masks go to ``eval_masks/`` and are indexed only by the
    eval-only file, never by the training manifest.

    Raises:
        ManifestExistsError: If a manifest already exists and ``force`` is False
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_FILE
    if manifest_path.exists() and not force:
        raise ManifestExistsError(
            f"manifest already exists: {manifest_path} (use --force to overwrite)"
        )
    style_a, style_b = config.styles()
    splits: dict[str, list[SampleEntry]] = {}
    eval_masks: dict[str, str] = {}
    reference: np.ndarray | None = None

    for split, ids in config.split_ranges().items():
        style = style_a if split == "source_train" else style_b
        entries = []
        for scene_id in ids:
            sample = _render_entry(config, scene_id, style)
            image_rel = f"samples/{split}/{scene_id:05d}_image.png"
            save_image(out_dir / image_rel, sample.image)
            mask_rel = f"samples/{split}/{scene_id:05d}_mask.png"
            if split == "target_train":
                mask_rel = f"eval_masks/{scene_id:05d}_mask.png"
                eval_masks[str(scene_id)] = mask_rel
                save_mask(out_dir / mask_rel, sample.mask)
                entries.append(SampleEntry(scene_id=scene_id, image=image_rel))
                if reference is None:
                    reference = load_image(out_dir / image_rel)
            else:
                save_mask(out_dir / mask_rel, sample.mask)
                entries.append(SampleEntry(scene_id=scene_id, image=image_rel, mask=mask_rel))
        splits[split] = entries
        logger.info("Rendered %d %s samples", len(entries), split)

    assert reference is not None
    manifest = DatasetManifest(
        seed=config.seed,
        num_labels=config.num_labels,
        canvas=config.canvas,
        splits=splits,
        styles={"A": style_a, "B": style_b},
        preprocessing=fit_pipeline(reference, pipeline_config),
        root=out_dir,
    )
    with open(out_dir / EVAL_MASKS_FILE, "w") as f:
        json.dump(eval_masks, f, indent=2, sort_keys=True)
        f.write("\n")
    tmp = manifest_path.with_name(MANIFEST_FILE + ".tmp")
    tmp.write_text(manifest.to_json())
    tmp.replace(manifest_path)
    logger.info("Wrote manifest %s (digest %s)", manifest_path, manifest.digest())
    return manifest
