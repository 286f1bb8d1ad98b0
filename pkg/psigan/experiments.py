"""Ablation suites over loss settings, pair variants and segmentor modes."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import TrainConfig, config_hash, from_dict, save_json, to_dict
from .data import SOURCE_STREAM, TARGET_STREAM, DomainDataset, load_split
from .losses import LossForm, structure_discriminator_loss
from .metrics import (
    REPORT_SCHEMA_VERSION,
    EvaluationReport,
    evaluate_run,
    per_label_kl,
    report_columns,
    write_report,
    write_table,
)
from .models import Branch, PatchDiscriminator, PatchDiscriminatorSpec, forward_discriminator
from .synthdata import DatasetManifest
from .telemetry import NoOpMetricsClient
from .trainer import fit_segmentor, iterations_per_epoch, train
from .translation import Direction, translate_images

logger = logging.getLogger(__name__)

SUITE_SCHEMA_VERSION = 1
NO_ADAPTATION = "no_adaptation"
SUPERVISED = "supervised"


@dataclass
class AblationEntry:
    name: str
    delta: dict[str, Any] = field(default_factory=dict)


@dataclass
class AblationSuite:
    """Named TrainConfig deltas over a shared base, each run once per seed."""

    name: str
    base: dict[str, Any] = field(default_factory=dict)
    entries: list[AblationEntry] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    metric: str = "overall_dice"
    baselines: bool = True
    kl_samples: int = 16
    kl_bins: int = 64
    schema_version: int = SUITE_SCHEMA_VERSION

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"Duplicate entry names: {', '.join(dupes)}")
        reserved = {NO_ADAPTATION, SUPERVISED} & set(names)
        if reserved:
            raise ValueError(f"Reserved entry names: {', '.join(sorted(reserved))}")
        if not self.seeds:
            raise ValueError("A suite needs at least one seed")
        if self.metric != "overall_dice":
            raise ValueError(f"Invalid metric: {self.metric}. Must be overall_dice.")


@dataclass
class ResolvedEntry:
    name: str
    seed: int
    config: TrainConfig

    @property
    def run_name(self) -> str:
        return f"{self.name}-s{self.seed}-{config_hash(self.config)}"


def load_suite(path: Path) -> AblationSuite:
    """Read a suite file.

    Raises:
        FileNotFoundError: If the file does not exist (the message names the path)
        ValueError: On unknown keys, a schema mismatch or invalid entries
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"suite file not found: {path}")
    with open(path) as f:
        data = json.load(f)
    version = data.get("schema_version", SUITE_SCHEMA_VERSION)
    if version != SUITE_SCHEMA_VERSION:
        raise ValueError(f"Suite schema_version {version} is not supported (expected {SUITE_SCHEMA_VERSION})")
    return from_dict(AblationSuite, data)


def resolve_config(base: dict[str, Any], delta: dict[str, Any], seed: int) -> TrainConfig:
    merged = dict(to_dict(TrainConfig()))
    merged.update(base)
    merged.update(delta)
    merged["seed"] = seed
    return from_dict(TrainConfig, merged)


def expand_suite(suite: AblationSuite) -> list[ResolvedEntry]:
    """One fully resolved TrainConfig per (entry, seed).

    Raises:
        ValueError: On an unknown setting id or config key (names the entry)
    """
    resolved = []
    for entry in suite.entries:
        for seed in suite.seeds:
            try:
                config = resolve_config(suite.base, entry.delta, seed)
            except ValueError as e:
                raise ValueError(f"Entry {entry.name}: {e}") from None
            resolved.append(ResolvedEntry(entry.name, seed, config))
    return resolved


@dataclass
class EntryResult:
    """Outcome of one (entry, seed) run, reduced to the scores the table needs."""

    name: str
    seed: int
    status: str
    overall: float | None = None
    label_dice: dict[int, float] = field(default_factory=dict)
    label_hd95: dict[int, float | None] = field(default_factory=dict)
    kl: dict[int, float | None] = field(default_factory=dict)
    error: str | None = None

    @classmethod
    def from_report(
        cls, name: str, seed: int, report: EvaluationReport, kl: dict[int, float | None]
    ) -> EntryResult:
        return cls(
            name,
            seed,
            "completed",
            overall=report.overall_mean,
            label_dice={k: s.dice_mean for k, s in report.labels.items()},
            label_hd95={k: s.hd95_mean for k, s in report.labels.items()},
            kl=kl,
        )

    @property
    def ok(self) -> bool:
        return self.overall is not None


@dataclass
class SuiteResult:
    suite: str
    num_labels: int
    results: list[EntryResult]
    rows: list[dict[str, str]] = field(default_factory=list)

    def median(self, name: str) -> float | None:
        scores = [r.overall for r in self.results if r.name == name and r.ok]
        return float(np.median(scores)) if scores else None


def _entry_kl(
    pseudo: np.ndarray, pseudo_masks: np.ndarray, test: DomainDataset, num_labels: int, bins: int
) -> dict[int, float | None]:
    return per_label_kl(
        pseudo, pseudo_masks, test.images[:, 0].numpy(), test.masks.numpy(), num_labels, bins
    )


def _entry_file(out_dir: Path, run_name: str) -> Path:
    return out_dir / "entries" / run_name / "result.json"


def _keyed(mapping: dict[str, Any]) -> dict[int, Any]:
    return {int(k): v for k, v in mapping.items()}


def _load_cached(path: Path, digest: str) -> EntryResult | None:
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if data.get("manifest_digest") != digest or data.get("status") != "completed":
        return None
    return EntryResult(
        data["name"],
        data["seed"],
        "skipped",
        overall=data["overall_dice"],
        label_dice=_keyed(data["label_dice"]),
        label_hd95=_keyed(data["label_hd95"]),
        kl=_keyed(data["kl"]),
    )


def _save_entry(path: Path, result: EntryResult, digest: str, run_name: str, branch: str) -> None:
    save_json(
        path,
        {
            "schema_version": SUITE_SCHEMA_VERSION,
            "name": result.name,
            "seed": result.seed,
            "run": run_name,
            "status": result.status,
            "manifest_digest": digest,
            "branch": branch,
            "overall_dice": result.overall,
            "label_dice": {str(k): v for k, v in result.label_dice.items()},
            "label_hd95": {str(k): v for k, v in result.label_hd95.items()},
            "kl": {str(k): v for k, v in result.kl.items()},
        },
    )


def _median_row(name: str, results: list[EntryResult], num_labels: int) -> dict[str, str]:
    """Median over seeds; the ``sample`` column reads ``median``."""
    row = {col: "" for col in report_columns(num_labels)}
    row.update(entry=name, schema_version=str(REPORT_SCHEMA_VERSION), sample="median")
    ok = [r for r in results if r.ok]
    if not ok:
        return row
    for k in range(1, num_labels):
        row[f"dice_{k}"] = f"{np.median([r.label_dice[k] for r in ok]):.6g}"
        hd = [r.label_hd95[k] for r in ok if r.label_hd95.get(k) is not None]
        row[f"hd95_{k}"] = f"{np.median(hd):.6g}" if hd else "inf"
        kl = [r.kl[k] for r in ok if r.kl.get(k) is not None]
        row[f"kl_{k}"] = f"{np.median(kl):.6g}" if kl else ""
    row["overall_dice"] = f"{np.median([r.overall for r in ok]):.6g}"
    return row


def run_suite(
    suite: AblationSuite,
    manifest: DatasetManifest,
    out_dir: Path,
    metrics=None,
    device: str = "cpu",
) -> SuiteResult:
    """Train and evaluate every (entry, seed), plus the two reference baselines.

    Completed entries whose recorded manifest digest matches are reused. A
    failing entry is recorded and the suite moves on.
    """
    metrics = metrics or NoOpMetricsClient()
    out_dir = Path(out_dir)
    digest = manifest.digest()
    num_labels = manifest.num_labels
    test = load_split(manifest, "target_test")
    source = load_split(manifest, "source_train")
    kl_source = source.subset(suite.kl_samples)
    results: list[EntryResult] = []

    for entry in expand_suite(suite):
        cache = _entry_file(out_dir, entry.run_name)
        cached = _load_cached(cache, digest)
        if cached is not None:
            logger.info("Skipping %s (already completed)", entry.run_name)
            metrics.suite_entry("skipped")
            results.append(cached)
            continue
        try:
            rd = train(entry.config, manifest, out_dir / "runs" / entry.run_name, force=True, metrics=metrics, device=device)
            state = load_checkpoint(rd.final_checkpoint, restore_rng=False)
            segmentor = state.bundle.segmentor.to(device)
            report = evaluate_run(segmentor, test, num_labels, entry.config.eval_branch)
            write_report(report, cache.parent)
            pseudo = translate_images(state.bundle, kl_source.images, Direction.C2M)[:, 0].numpy()
            kl = _entry_kl(pseudo, kl_source.masks.numpy(), test, num_labels, suite.kl_bins)
            result = EntryResult.from_report(entry.name, entry.seed, report, kl)
            _save_entry(cache, result, digest, entry.run_name, report.branch)
            metrics.suite_entry("completed")
        except Exception as e:
            logger.error("Entry %s failed: %s", entry.run_name, e)
            logger.debug("Traceback for %s", entry.run_name, exc_info=True)
            result = EntryResult(entry.name, entry.seed, "failed", error=f"{type(e).__name__}: {e}")
            metrics.suite_entry("failed")
        results.append(result)

    names = [e.name for e in suite.entries]
    if suite.baselines:
        results.extend(_run_baselines(suite, manifest, out_dir, test, source, kl_source, metrics))
        names += [NO_ADAPTATION, SUPERVISED]

    table = SuiteResult(suite.name, num_labels, results)
    table.rows = [_median_row(n, [r for r in results if r.name == n], num_labels) for n in names]
    write_table(out_dir / "suite.csv", ["entry"] + report_columns(num_labels), table.rows)
    save_json(
        out_dir / "suite.json",
        {
            "schema_version": SUITE_SCHEMA_VERSION,
            "suite": suite.name,
            "manifest_digest": digest,
            "rows": table.rows,
            "runs": [
                {"name": r.name, "seed": r.seed, "status": r.status, "error": r.error}
                for r in results
            ],
        },
    )
    for name in names:
        median = table.median(name)
        if median is not None:
            logger.info("%-24s median overall DSC %.4f", name, median)
    return table


def _run_baselines(
    suite: AblationSuite,
    manifest: DatasetManifest,
    out_dir: Path,
    test: DomainDataset,
    source: DomainDataset,
    kl_source: DomainDataset,
    metrics,
) -> list[EntryResult]:
    """No-adaptation (trained on source) and supervised (trained on target-val) segmentors."""
    digest = manifest.digest()
    num_labels = manifest.num_labels
    val = load_split(manifest, "target_val")
    out = []
    for seed in suite.seeds:
        config = resolve_config(suite.base, {}, seed)
        iters = iterations_per_epoch(config, source, source)
        for name, data, stream in (
            (NO_ADAPTATION, source, SOURCE_STREAM),
            (SUPERVISED, val, TARGET_STREAM),
        ):
            run_name = ResolvedEntry(name, seed, config).run_name
            cache = _entry_file(out_dir, run_name)
            cached = _load_cached(cache, digest)
            if cached is not None:
                metrics.suite_entry("skipped")
                out.append(cached)
                continue
            try:
                segmentor = fit_segmentor(data.images, data.masks, config, num_labels, iters, stream)
                report = evaluate_run(segmentor, test, num_labels, Branch.S_M)
                write_report(report, cache.parent)
                kl = {}
                if name == NO_ADAPTATION:
                    raw = kl_source.images[:, 0].numpy()
                    kl = _entry_kl(raw, kl_source.masks.numpy(), test, num_labels, suite.kl_bins)
                result = EntryResult.from_report(name, seed, report, kl)
                _save_entry(cache, result, digest, run_name, report.branch)
                metrics.suite_entry("completed")
            except Exception as e:
                logger.error("Baseline %s (seed %d) failed: %s", name, seed, e)
                result = EntryResult(name, seed, "failed", error=f"{type(e).__name__}: {e}")
                metrics.suite_entry("failed")
            out.append(result)
    return out


@dataclass
class EquilibriumPoint:
    index: int
    p_real: float
    p_fake: float
    output: float

    @property
    def optimum(self) -> float:
        return self.p_real / (self.p_real + self.p_fake)

    @property
    def error(self) -> float:
        return abs(self.output - self.optimum)


def toy_pair_population(
    num_points: int = 6, channels: int = 2, size: int = 8, seed: int = 0
) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Distinct (image, psi) support points and two distributions over them."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(-1.0, 1.0, (num_points, 1, size, size))
    psi = rng.uniform(0.0, 1.0, (num_points, channels - 1, size, size))
    support = torch.as_tensor(np.concatenate([image, psi], axis=1), dtype=torch.float64)
    p_real = rng.dirichlet(np.ones(num_points))
    p_fake = rng.dirichlet(np.ones(num_points))
    return support, p_real, p_fake


def _repeat_counts(p: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder integer counts summing to ``total``."""
    scaled = p * total
    counts = np.floor(scaled).astype(np.int64)
    short = total - int(counts.sum())
    counts[np.argsort(counts - scaled, kind="stable")[:short]] += 1
    return counts


def fit_equilibrium(
    support: torch.Tensor,
    p_real: np.ndarray,
    p_fake: np.ndarray,
    form: LossForm = LossForm.LEAST_SQUARES,
    steps: int = 3000,
    lr: float = 2e-3,
    resolution: int = 100,
    width: int = 16,
    seed: int = 0,
) -> list[EquilibriumPoint]:
    """Train a structure discriminator on fixed pair populations and read off its outputs.

    Each population becomes one batch of ``resolution`` pairs in which every
    support point appears in proportion to its probability, so the batch means inside
    structure_discriminator_loss are the expectations over the populations.
    A point's output is the mean over its patch logits: a sigmoid probability
    for the log forms and the raw score for least squares. Probabilities are
    reported as the repeated proportions actually trained on.
    """
    p_real = np.asarray(p_real, dtype=np.float64)
    p_fake = np.asarray(p_fake, dtype=np.float64)
    if p_real.shape != (support.shape[0],) or p_fake.shape != p_real.shape:
        raise ValueError("Need one real and one fake probability per support point")
    if not np.isclose(p_real.sum(), 1.0) or not np.isclose(p_fake.sum(), 1.0):
        raise ValueError("Populations must each sum to 1")
    real_counts = _repeat_counts(p_real, resolution)
    fake_counts = _repeat_counts(p_fake, resolution)
    real_batch = support.repeat_interleave(torch.as_tensor(real_counts), dim=0)
    fake_batch = support.repeat_interleave(torch.as_tensor(fake_counts), dim=0)

    torch.manual_seed(seed)
    spec = PatchDiscriminatorSpec(in_channels=support.shape[1], base_width=width, num_layers=3, norm="none")
    disc = PatchDiscriminator(spec).double()
    opt = torch.optim.Adam(disc.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = structure_discriminator_loss(
            forward_discriminator(disc, real_batch), forward_discriminator(disc, fake_batch), form
        )
        loss.backward()
        opt.step()

    keep = (real_counts + fake_counts) > 0
    with torch.no_grad():
        logits = forward_discriminator(disc, support[torch.as_tensor(keep)])
        scores = logits if form is LossForm.LEAST_SQUARES else torch.sigmoid(logits)
        out = scores.mean(dim=(1, 2, 3))
    share_real = real_counts / real_counts.sum()
    share_fake = fake_counts / fake_counts.sum()
    return [
        EquilibriumPoint(int(i), float(share_real[i]), float(share_fake[i]), float(o))
        for i, o in zip(np.flatnonzero(keep), out.tolist())
    ]
