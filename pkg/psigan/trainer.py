"""Adversarial training loop: update order, gradient routing and run bookkeeping."""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .config import SCHEMA_VERSION, RunConfig, TrainConfig, config_hash, save_json, to_dict
from .data import SOURCE_STREAM, TARGET_STREAM, DomainDataset, batch_indices, load_split
from .losses import (
    LossReport,
    NonFiniteLogitsError,
    Role,
    adversarial_loss,
    cycle_loss,
    make_joint_pair,
    segmentation_loss,
    structure_discriminator_loss,
    structure_generator_loss,
    total_discriminator_objective,
    total_generator_objective,
)
from .models import (
    Branch,
    SegmentorMode,
    SplitSegmentor,
    SplitSegmentorSpec,
    forward_discriminator,
    get_preset,
    set_requires_grad,
)
from .rundir import RunDirectory
from .settings import get_mask_for_setting
from .state import TrainState, build_state
from .synthdata import DatasetManifest
from .telemetry import NoOpMetricsClient

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """A loss went NaN or infinite; carries the partial report of the aborted step."""

    def __init__(self, message: str, report: LossReport) -> None:
        super().__init__(message)
        self.report = report


class RoutingViolation(AssertionError):
    """A parameter group received gradients or updates outside its phase."""

    def __init__(self, phase: str, groups: list[str]) -> None:
        super().__init__(f"{phase} phase leaked into {', '.join(groups)}")
        self.phase = phase
        self.groups = groups


class Phase(Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"
    SEGMENTOR = "segmentor"


ALL_GROUPS = frozenset({"G_CM", "G_MC", "D_M", "D_C", "D_struct", "E_M", "E_CM", "DE"})
SEGMENTOR_GROUPS = frozenset({"E_M", "E_CM", "DE"})

# Groups allowed to receive gradients or change in each phase.
PHASE_CONTRACT: dict[Phase, frozenset[str]] = {
    Phase.GENERATOR: frozenset({"G_CM", "G_MC"}),
    Phase.DISCRIMINATOR: frozenset({"D_M", "D_C", "D_struct"}),
    Phase.SEGMENTOR: SEGMENTOR_GROUPS,
}

# Groups whose requires_grad is switched off while a phase runs.
FREEZE_POLICY: dict[Phase, frozenset[str]] = {
    phase: ALL_GROUPS - allowed for phase, allowed in PHASE_CONTRACT.items()
}


def frozen_groups(phase: Phase, mode: SegmentorMode) -> frozenset[str]:
    frozen = FREEZE_POLICY[phase]
    if mode is SegmentorMode.SINGLE and phase is Phase.GENERATOR:
        # one segmentor serves both paths and learns from the generator loss too
        frozen = frozen - SEGMENTOR_GROUPS
    return frozen


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for ``epoch``: constant, then linear decay to 0.

    ``epoch == total_epochs`` is the closing boundary and returns exactly 0.

    Raises:
        ValueError: If epoch is negative or past the final boundary
    """
    total = config.total_epochs
    if epoch < 0 or epoch > total:
        raise ValueError(f"Invalid epoch: {epoch}. Must be 0-{total}.")
    if epoch == total:
        return 0.0
    if epoch < config.epochs_constant:
        return config.lr
    return config.lr * (1.0 - (epoch - config.epochs_constant) / config.epochs_decay)


def set_lr(state: TrainState, lr: float) -> None:
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


def configure_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled


@dataclass
class PhaseAudit:
    """Groups with nonzero gradient and groups whose parameters moved in one phase."""

    phase: Phase
    touched: set[str] = field(default_factory=set)
    changed: set[str] = field(default_factory=set)


@dataclass
class RoutingReport:
    mode: SegmentorMode
    phases: list[PhaseAudit]
    mode_consistent: dict[str, list[str]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "phases": {
                a.phase.value: {"touched": sorted(a.touched), "changed": sorted(a.changed)}
                for a in self.phases
            },
            "mode_consistent": self.mode_consistent,
        }


class PhaseRecorder:
    """Collects per-phase gradient and checksum observations during one train_step."""

    def __init__(self) -> None:
        self.phases: list[PhaseAudit] = []
        self._before: dict[str, list[torch.Tensor]] = {}

    def begin(self, groups: dict[str, list[nn.Parameter]]) -> None:
        self._before = {name: [p.detach().clone() for p in ps] for name, ps in groups.items()}

    def end(self, phase: Phase, groups: dict[str, list[nn.Parameter]], touched: set[str]) -> None:
        changed = {
            name
            for name, ps in groups.items()
            if any(not torch.equal(p.detach(), b) for p, b in zip(ps, self._before[name]))
        }
        self.phases.append(PhaseAudit(phase, touched, changed))


def _touched(groups: dict[str, list[nn.Parameter]]) -> set[str]:
    return {
        name
        for name, ps in groups.items()
        if any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in ps)
    }


def routing_audit(recorder: PhaseRecorder, mode: SegmentorMode) -> RoutingReport:
    """Check recorded phases against the per-phase contract.

    In single-segmentor mode, segmentor gradients in the generator phase are
    expected and listed under ``mode_consistent``.

    Raises:
        RoutingViolation: Naming the first phase that leaked and its groups
    """
    report = RoutingReport(mode=mode, phases=recorder.phases)
    for audit in recorder.phases:
        allowed = set(PHASE_CONTRACT[audit.phase])
        if mode is SegmentorMode.SINGLE and audit.phase is Phase.GENERATOR:
            extra = sorted(audit.touched & SEGMENTOR_GROUPS)
            if extra:
                report.mode_consistent[audit.phase.value] = extra
            allowed |= SEGMENTOR_GROUPS - audit.changed
        leaks = sorted((audit.touched | audit.changed) - allowed)
        if leaks:
            raise RoutingViolation(audit.phase.value, leaks)
    return report


def _apply_freeze(groups: dict[str, list[nn.Parameter]], frozen: frozenset[str]) -> None:
    for name, ps in groups.items():
        flag = name not in frozen
        for p in ps:
            p.requires_grad_(flag)


def _clear_grads(params: list[nn.Parameter]) -> None:
    for p in params:
        p.grad = None


def _clip(params: list[nn.Parameter], max_norm: float | None) -> None:
    if max_norm is not None:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _check_finite(report: LossReport, total: torch.Tensor | float, phase: Phase) -> None:
    bad = report.non_finite()
    if isinstance(total, torch.Tensor) and not bool(torch.isfinite(total)):
        bad.append(f"total_{phase.value[0]}")
    if bad:
        raise NonFiniteLossError(
            f"non-finite loss in {phase.value} phase: {', '.join(bad)}", report.detached()
        )


def train_step(
    state: TrainState,
    batch_source: tuple[torch.Tensor, torch.Tensor],
    batch_target: torch.Tensor,
    recorder: PhaseRecorder | None = None,
) -> tuple[TrainState, LossReport]:
    """Run one iteration: generator update, discriminator update, segmentor update.

    Args:
        state: Training state, updated in place
        batch_source: (x_c, y_c) preprocessed source images and masks
        batch_target: x_m preprocessed target images (never masks)
        recorder: Optional PhaseRecorder for routing_audit

    Returns:
        (state, detached LossReport)

    Raises:
        NonFiniteLossError: Before any update that would consume a non-finite loss
    """
    config = state.config
    bundle = state.bundle
    seg = bundle.segmentor
    mask = get_mask_for_setting(config.setting)
    reverse = mask.uses_reverse_generator
    form = config.loss_form
    variant = config.pair_variant
    mode = bundle.mode
    groups = bundle.parameter_groups()
    x_c, y_c = batch_source
    x_m = batch_target
    report = LossReport()

    try:
        # generator phase: D_* and S_C^M frozen, S_C^M path differentiable into G
        _apply_freeze(groups, frozen_groups(Phase.GENERATOR, mode))
        _clear_grads(list(bundle.parameters()))
        if recorder:
            recorder.begin(groups)
        bundle.g_cm.train()
        bundle.g_mc.train()
        seg.eval()
        x_cm = bundle.g_cm(x_c)
        report.adv_cm = adversarial_loss(
            None, forward_discriminator(bundle.d_m, x_cm), Role.GENERATOR, form
        )
        x_mc = None
        if reverse:
            x_mc = bundle.g_mc(x_m)
            rec_c = bundle.g_mc(x_cm)
            rec_m = bundle.g_cm(x_mc)
            report.adv_mc = adversarial_loss(
                None, forward_discriminator(bundle.d_c, x_mc), Role.GENERATOR, form
            )
            report.cyc = 0.5 * (cycle_loss(x_c, rec_c) + cycle_loss(x_m, rec_m))
        psi_bar = seg(x_cm, Branch.S_CM)
        report.struct_g = structure_generator_loss(
            bundle.structure_logits(make_joint_pair(x_cm, psi_bar, variant)), form
        )
        _, report.seg_bar_g = segmentation_loss(psi_bar, psi_bar, y_c)
        report.total_g = total_generator_objective(report, config.weights, mask)
        _check_finite(report, report.total_g, Phase.GENERATOR)
        report.total_g.backward()
        if recorder:
            touched = _touched(groups)
        _clip(bundle.generator_parameters(), config.clip_grad_norm)
        state.optimizers["G"].step()
        carried = {}
        if mode is SegmentorMode.SINGLE:
            carried = {id(p): p.grad for p in bundle.segmentor_parameters() if p.grad is not None}
        if recorder:
            recorder.end(Phase.GENERATOR, groups, touched)

        # discriminator phase: psi maps from S_M are constants
        _apply_freeze(groups, frozen_groups(Phase.DISCRIMINATOR, mode))
        _clear_grads(list(bundle.parameters()))
        if recorder:
            recorder.begin(groups)
        x_cm_d = x_cm.detach()
        fake_m = state.pools["fake_m"].query(x_cm_d)
        report.disc_m = adversarial_loss(
            forward_discriminator(bundle.d_m, x_m),
            forward_discriminator(bundle.d_m, fake_m),
            Role.DISCRIMINATOR,
            form,
        )
        if reverse:
            fake_c = state.pools["fake_c"].query(x_mc.detach())
            report.disc_c = adversarial_loss(
                forward_discriminator(bundle.d_c, x_c),
                forward_discriminator(bundle.d_c, fake_c),
                Role.DISCRIMINATOR,
                form,
            )
        with torch.no_grad():
            psi_m = seg(x_m, Branch.S_M)
            psi_cm = seg(x_cm_d, Branch.S_M)
        report.struct_d = structure_discriminator_loss(
            bundle.structure_logits(make_joint_pair(x_m, psi_m, variant)),
            bundle.structure_logits(make_joint_pair(x_cm_d, psi_cm, variant)),
            form,
        )
        report.total_d = total_discriminator_objective(report, config.weights, mask)
        _check_finite(report, report.total_d, Phase.DISCRIMINATOR)
        report.total_d.backward()
        if recorder:
            touched = _touched(groups)
        _clip(bundle.discriminator_parameters(), config.clip_grad_norm)
        state.optimizers["D"].step()
        if recorder:
            recorder.end(Phase.DISCRIMINATOR, groups, touched)

        # segmentor phase: both branches on detached x_c^m, shared DE updated once
        _apply_freeze(groups, frozen_groups(Phase.SEGMENTOR, mode))
        _clear_grads(list(bundle.parameters()))
        if recorder:
            recorder.begin(groups)
        seg.train()
        p_m = seg(x_cm_d, Branch.S_M)
        if mode is SegmentorMode.SPLIT:
            p_bar = seg(x_cm_d, Branch.S_CM)
            report.seg_m, report.seg_bar = segmentation_loss(p_m, p_bar, y_c)
            report.total_s = report.seg_m + report.seg_bar
        else:
            report.seg_m, _ = segmentation_loss(p_m, p_m, y_c)
            report.seg_bar = report.seg_m
            report.total_s = report.seg_m
        _check_finite(report, report.total_s, Phase.SEGMENTOR)
        report.total_s.backward()
        for p in bundle.segmentor_parameters():
            if id(p) in carried:
                p.grad = carried[id(p)] if p.grad is None else p.grad + carried[id(p)]
        if recorder:
            touched = _touched(groups)
        _clip(bundle.segmentor_parameters(), config.clip_grad_norm)
        state.optimizers["S"].step()
        if recorder:
            recorder.end(Phase.SEGMENTOR, groups, touched)
    except NonFiniteLogitsError as e:
        raise NonFiniteLossError(f"non-finite discriminator logits: {e}", report.detached()) from e
    finally:
        set_requires_grad([bundle], True)

    report = report.detached()
    state.history.record(report)
    state.iteration += 1
    state.global_step += 1
    return state, report


def iterations_per_epoch(config: TrainConfig, source: DomainDataset, target: DomainDataset) -> int:
    if config.iterations_per_epoch is not None:
        return config.iterations_per_epoch
    return math.ceil(max(len(source), len(target)) / config.batch_size)


def write_snapshot(
    state: TrainState,
    path: Path,
    source: DomainDataset,
    target: DomainDataset,
) -> None:
    """Fixed-sample maps and translations for the evolution and triplet panels."""
    bundle = state.bundle
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        psi = bundle.segmentor(target.images, Branch.S_M)[:, 1:].sum(dim=1)
        pseudo = bundle.g_cm(source.images)
    bundle.train(was_training)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(
        tmp,
        epoch=np.int64(state.epoch),
        psi=psi.clamp(0, 1).cpu().numpy(),
        target=target.images[:, 0].cpu().numpy(),
        source=source.images[:, 0].cpu().numpy(),
        pseudo=pseudo[:, 0].cpu().numpy(),
    )
    tmp.replace(path)


def _prepare_run_dir(run_dir: RunDirectory, resume: Path | None, force: bool) -> None:
    if resume is None and run_dir.run_path.exists():
        if not force:
            state = "completed" if run_dir.completed else "interrupted"
            raise FileExistsError(
                f"run directory {run_dir.root} already holds a run ({state}); use --resume or --force"
            )
        for sub in (run_dir.checkpoints, run_dir.snapshots, run_dir.plots):
            shutil.rmtree(sub, ignore_errors=True)
        run_dir.history_path.unlink(missing_ok=True)
        run_dir.summary_path.unlink(missing_ok=True)
    run_dir.create()


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    run_dir: Path,
    resume: Path | None = None,
    force: bool = False,
    metrics=None,
    run_config: RunConfig | None = None,
    device: str = "cpu",
) -> RunDirectory:
    """Train one configuration, writing checkpoints, history and snapshots to ``run_dir``.

    Raises:
        NonFiniteLossError: The run stops; resume from its last checkpoint
        CheckpointError: On an unreadable or mismatched resume checkpoint
        RunLockedError: If another process is writing to ``run_dir``
    """
    metrics = metrics or NoOpMetricsClient()
    rd = RunDirectory(run_dir)
    configure_determinism(config.deterministic)
    with rd.lock():
        _prepare_run_dir(rd, resume, force)
        if resume is not None:
            state = load_checkpoint(resume, expected_hash=config_hash(config), force=force)
            rd.truncate_history(state.global_step)
            logger.info("Resuming at epoch %d (step %d)", state.epoch, state.global_step)
        else:
            state = build_state(config, manifest.num_labels, manifest.digest())
            rd.write_provenance(
                to_dict(run_config if run_config is not None else config),
                config_hash(run_config if run_config is not None else config),
                manifest.digest(),
                str(manifest.root.resolve()) if manifest.root else None,
            )
        config = state.config
        state.bundle.to(device)

        source = load_split(manifest, "source_train")
        target = load_split(manifest, "target_train")
        val = load_split(manifest, "target_val").subset(config.snapshot_samples)
        snap_source = source.subset(config.snapshot_samples)
        val.images = val.images.to(device)
        snap_source.images = snap_source.images.to(device)
        iters = iterations_per_epoch(config, source, target)
        logger.info(
            "Training setting %d (%s, %s) for %d epochs x %d iterations",
            config.setting, config.pair_variant.value, config.segmentor_mode.value,
            config.total_epochs, iters,
        )

        try:
            for epoch in range(state.epoch, config.total_epochs):
                lr = lr_at(config, epoch)
                set_lr(state, lr)
                for it in range(state.iteration, iters):
                    src_idx = batch_indices(len(source), config.batch_size, config.seed, SOURCE_STREAM, epoch, it)
                    tgt_idx = batch_indices(len(target), config.batch_size, config.seed, TARGET_STREAM, epoch, it)
                    x_c, y_c = source.batch(src_idx)
                    x_m, _ = target.batch(tgt_idx)
                    step = state.global_step
                    _, report = train_step(state, (x_c.to(device), y_c.to(device)), x_m.to(device))
                    rd.append_history(
                        {
                            "schema_version": SCHEMA_VERSION,
                            "step": step,
                            "epoch": epoch,
                            "iteration": it,
                            "lr": lr,
                            **report.as_dict(),
                        }
                    )
                    metrics.iteration(report, lr)
                state.epoch = epoch + 1
                state.iteration = 0
                logger.info("Epoch %d/%d: %s", state.epoch, config.total_epochs, state.history)
                if state.epoch % config.checkpoint_every == 0:
                    save_checkpoint(state, rd.checkpoint_for(state.epoch))
                    metrics.checkpoint_saved()
                if state.epoch % config.snapshot_every == 0:
                    write_snapshot(state, rd.snapshot_for(state.epoch), snap_source, val)
        except NonFiniteLossError as e:
            state.history.non_finite += 1
            metrics.non_finite(e.report.non_finite())
            last = rd.latest_checkpoint()
            logger.error("Aborted at step %d: %s; resume from %s", state.global_step, e, last)
            rd.mark("failed")
            raise

        save_checkpoint(state, rd.final_checkpoint)
        metrics.checkpoint_saved()
        gap = state.history.struct_gap
        summary = {
            "schema_version": SCHEMA_VERSION,
            "iterations": state.global_step,
            "epochs": state.epoch,
            "setting": config.setting,
            "segmentor_mode": config.segmentor_mode.value,
            "struct_gap": gap,
            "gap_window": state.history.window,
            "final_checkpoint": str(rd.final_checkpoint.relative_to(rd.root)),
        }
        save_json(rd.summary_path, summary)
        rd.mark("completed")
        metrics.end_run(state.global_step)
        if gap is not None:
            logger.info("Structure loss gap over last %d iterations: %.4f", state.history.window, gap)
    return rd


def fit_segmentor(
    images: torch.Tensor,
    masks: torch.Tensor,
    config: TrainConfig,
    num_labels: int,
    iterations: int,
    stream: int = SOURCE_STREAM,
) -> SplitSegmentor:
    """Train a plain segmentor (E_M + DE) on labeled images, for the reference baselines.

    Uses the same optimizer, schedule and batch order rules as ``train``,
    with ``iterations`` steps per epoch.
    """
    torch.manual_seed(config.seed)
    spec = SplitSegmentorSpec(
        num_labels=num_labels,
        widths=get_preset(config.preset).segmentor_widths,
        mode=SegmentorMode.SINGLE,
    )
    segmentor = SplitSegmentor(spec)
    opt = torch.optim.Adam(segmentor.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    segmentor.train()
    for epoch in range(config.total_epochs):
        for group in opt.param_groups:
            group["lr"] = lr_at(config, epoch)
        for it in range(iterations):
            idx = torch.as_tensor(
                batch_indices(images.shape[0], config.batch_size, config.seed, stream, epoch, it)
            )
            opt.zero_grad(set_to_none=True)
            pred = segmentor(images[idx])
            loss, _ = segmentation_loss(pred, pred, masks[idx])
            loss.backward()
            opt.step()
    segmentor.eval()
    return segmentor
