"""Command-line entry point: synth, train, eval, translate, ablate, plot."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig, config_hash, load_run_config
from .data import load_split
from .experiments import load_suite, run_suite
from .metrics import evaluate_run, write_report
from .models import Branch
from .plots import emit_plots
from .rundir import RunDirectory
from .synthdata import SPLITS, DatasetManifest, build_dataset, get_synth_preset
from .telemetry import create_metrics_client
from .trainer import train
from .translation import Direction, translate_split

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

SPLIT_ALIASES = {"train": "source_train", "val": "target_val", "test": "target_test"}


class UsageError(Exception):
    """Bad command-line usage: unknown flags, missing inputs, invalid values."""


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs) -> None:
        self.option_names: set[str] = set()
        self.commands: dict[str, _Parser] = {}
        super().__init__(*args, **kwargs)

    def add_argument(self, *args, **kwargs) -> argparse.Action:
        action = super().add_argument(*args, **kwargs)
        self.option_names.update(action.option_strings)
        return action

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)

    def unknown_options(self, argv: list[str]) -> list[str]:
        """Flags after the subcommand that it does not define."""
        for i, token in enumerate(argv):
            if token in self.commands:
                known = self.commands[token].option_names
                return [
                    t for t in argv[i + 1 :]
                    if t.startswith("--") and t.split("=", 1)[0] not in known
                ]
        return []


def _add_statsd(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--statsd-host", metavar="HOST", help="Enable StatsD metrics and send to HOST")
    parser.add_argument(
        "--statsd-port", type=int, default=8125, metavar="PORT", help="StatsD port (default: 8125)"
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="psigan", description="Unpaired segmentation domain adaptation (desk scale)")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="Generate a synthetic two-domain dataset")
    p.add_argument("--preset", default="desk", help="Dataset preset: desk or smoke (default: desk)")
    p.add_argument("--config", type=Path, metavar="FILE", help="Run config whose synth/preprocess sections are used")
    p.add_argument("--seed", type=int, help="Generation seed (overrides preset and config)")
    p.add_argument("--out", type=Path, required=True, metavar="DIR", help="Dataset directory")
    p.add_argument("--force", action="store_true", help="Overwrite an existing manifest")

    p = sub.add_parser("train", help="Train one configuration")
    p.add_argument("--config", type=Path, required=True, metavar="FILE", help="Run config JSON")
    p.add_argument("--manifest", type=Path, metavar="PATH", help="Dataset directory or manifest.json")
    p.add_argument("--resume", type=Path, metavar="CKPT", help="Continue from a checkpoint")
    p.add_argument("--force", action="store_true", help="Resume despite a config-hash mismatch, or restart a run")
    p.add_argument("--run-dir", type=Path, metavar="DIR", help="Run directory (default: <output_root>/run-<hash>)")
    p.add_argument("--device", default="cpu", help="Torch device (default: cpu)")
    _add_statsd(p)

    p = sub.add_parser("eval", help="Score a checkpoint's segmentor on a split")
    p.add_argument("--ckpt", type=Path, required=True, metavar="CKPT", help="Checkpoint file")
    p.add_argument("--config", type=Path, metavar="FILE", help="Run config whose eval section sets defaults")
    p.add_argument("--manifest", type=Path, metavar="PATH", help="Dataset (default: the one recorded by the run)")
    p.add_argument("--split", help="target_test, target_val, target_train, source_train (or test/val/train)")
    p.add_argument("--branch", help="Segmentor branch: S_M or S_CM")
    p.add_argument("--spacing", type=float, nargs=2, metavar=("ROW", "COL"), help="Pixel spacing for HD95")
    p.add_argument("--out", type=Path, metavar="DIR", help="Report directory")

    p = sub.add_parser("translate", help="Translate a split and report per-label KL")
    p.add_argument("--ckpt", type=Path, required=True, metavar="CKPT", help="Checkpoint file")
    p.add_argument("--direction", required=True, help="C2M (source to target) or M2C")
    p.add_argument("--config", type=Path, metavar="FILE", help="Run config whose translate section sets defaults")
    p.add_argument("--manifest", type=Path, metavar="PATH", help="Dataset (default: the one recorded by the run)")
    p.add_argument("--split", help="Split to translate (default: source_train for C2M, target_test for M2C)")
    p.add_argument("--limit", type=int, metavar="N", help="Translate only the first N images")
    p.add_argument("--bins", type=int, metavar="N", help="Histogram bins for KL (default: 64)")
    p.add_argument("--out", type=Path, metavar="DIR", help="Output directory")

    p = sub.add_parser("ablate", help="Run an ablation suite")
    p.add_argument("--suite", type=Path, required=True, metavar="FILE", help="Suite JSON")
    p.add_argument("--manifest", type=Path, required=True, metavar="PATH", help="Dataset directory or manifest.json")
    p.add_argument("--out", type=Path, metavar="DIR", help="Suite directory (default: <output_root>/suite-<name>)")
    p.add_argument("--device", default="cpu", help="Torch device (default: cpu)")
    _add_statsd(p)

    p = sub.add_parser("plot", help="Emit PNG panels for a run directory")
    p.add_argument("--run", type=Path, required=True, metavar="DIR", help="Run directory")
    p.add_argument("--max-samples", type=int, metavar="N", help="Rows per panel (default: 4)")
    parser.commands = dict(sub.choices)
    return parser


def _run_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_run_config(path)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from None


def _manifest(path: Path | None, fallback: str | None = None) -> DatasetManifest:
    target = path or (Path(fallback) if fallback else None)
    if target is None:
        raise UsageError("no dataset: pass --manifest or set manifest in the config")
    try:
        return DatasetManifest.load(target)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


def _split(name: str) -> str:
    split = SPLIT_ALIASES.get(name, name)
    if split not in SPLITS:
        raise UsageError(f"unknown split: {name}")
    return split


def _run_of(ckpt: Path) -> RunDirectory:
    return RunDirectory(Path(ckpt).resolve().parent.parent)


def _recorded_manifest(ckpt: Path) -> str | None:
    try:
        return _run_of(ckpt).read_run_info().get("manifest_path")
    except FileNotFoundError:
        return None


def _load_state(ckpt: Path):
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    return load_checkpoint(ckpt, restore_rng=False)


def cmd_synth(args: argparse.Namespace) -> int:
    run_config = _run_config(args.config)
    try:
        synth = run_config.synth if args.config else get_synth_preset(args.preset)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    manifest = build_dataset(synth, args.out, run_config.preprocess, force=args.force)
    print(f"{args.out / 'manifest.json'} {manifest.digest()}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run_config = _run_config(args.config)
    manifest = _manifest(args.manifest, run_config.manifest)
    if args.resume is not None:
        if not args.resume.exists():
            raise UsageError(f"checkpoint not found: {args.resume}")
        run_dir = args.run_dir or _run_of(args.resume).root
    else:
        run_dir = args.run_dir or run_config.resolved_output_root() / f"run-{config_hash(run_config)}"
    metrics = create_metrics_client(args.statsd_host, args.statsd_port)
    rd = train(
        run_config.resolved_train(),
        manifest,
        run_dir,
        resume=args.resume,
        force=args.force,
        metrics=metrics,
        run_config=run_config,
        device=args.device,
    )
    print(rd.final_checkpoint)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run_config = _run_config(args.config)
    options = run_config.eval
    split = _split(args.split or options.split)
    try:
        branch = Branch.parse(args.branch) if args.branch else options.branch
    except ValueError as e:
        raise UsageError(str(e)) from None
    spacing = tuple(args.spacing) if args.spacing else options.spacing
    state = _load_state(args.ckpt)
    manifest = _manifest(args.manifest, _recorded_manifest(args.ckpt))
    dataset = load_split(manifest, split, eval_masks=split == "target_train")
    report = evaluate_run(state.bundle.segmentor, dataset, manifest.num_labels, branch, spacing)
    out = args.out or run_config.resolved_output_root() / "reports" / f"{_run_of(args.ckpt).root.name}-{split}-{branch.value}"
    csv_path, _ = write_report(report, out)
    print(csv_path)
    return EXIT_OK


def cmd_translate(args: argparse.Namespace) -> int:
    run_config = _run_config(args.config)
    options = run_config.translate
    try:
        direction = Direction.parse(args.direction)
    except ValueError as e:
        raise UsageError(str(e)) from None
    default_split = options.split if direction is Direction.C2M else "target_test"
    split = _split(args.split or default_split)
    real_split = "target_test" if direction is Direction.C2M else "source_train"
    state = _load_state(args.ckpt)
    manifest = _manifest(args.manifest, _recorded_manifest(args.ckpt))
    inputs = load_split(manifest, split, eval_masks=split == "target_train")
    limit = args.limit if args.limit is not None else options.limit
    if limit is not None:
        inputs = inputs.subset(limit)
    real = load_split(manifest, real_split)
    out = args.out or run_config.resolved_output_root() / "translations" / f"{_run_of(args.ckpt).root.name}-{direction.value}-{split}"
    translate_split(state.bundle, inputs, real, direction, out, args.bins or options.bins)
    print(out / "pseudo.npz")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    try:
        suite = load_suite(args.suite)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise UsageError(f"{args.suite}: {e}") from None
    manifest = _manifest(args.manifest)
    out = args.out or RunConfig().resolved_output_root() / f"suite-{suite.name}"
    metrics = create_metrics_client(args.statsd_host, args.statsd_port)
    run_suite(suite, manifest, out, metrics=metrics, device=args.device)
    print(out / "suite.csv")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    if not (args.run / "run.json").exists():
        raise UsageError(f"not a run directory: {args.run}")
    result = emit_plots(args.run, args.max_samples or RunConfig().plot.max_samples)
    for path in result.files:
        print(path)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "translate": cmd_translate,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def _fail(kind: str, message: str) -> None:
    print(f"error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)


def run_cli(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on failure, 2 on usage errors.

    Failures print one line, ``error: <Kind>: <message>``, to stderr.
    """
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        unknown = parser.unknown_options(argv)
        if unknown:
            raise UsageError(f"unrecognized arguments: {' '.join(unknown)}")
        args = parser.parse_args(argv)
    except UsageError as e:
        _fail("UsageError", str(e))
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        _fail("UsageError", str(e))
        return EXIT_USAGE
    except Exception as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        _fail(type(e).__name__, str(e))
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
