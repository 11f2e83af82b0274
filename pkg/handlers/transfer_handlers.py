"""
Transfer handlers module.
Handles transfer: a frozen diffusion detector guides a ResNet student,
source-only (dg) or with pseudo-labeled target images (da).
"""
import argparse
import contextlib
import logging
from dataclasses import asdict
from pathlib import Path

from bench.datasets import DataAccessGuard, batch_sampler, pad_batch
from core import CheckpointError, ConfigError, DataAccessError, FrozenWeightsError, TransferModeError
from detector.dual_branch import DiffusionDetector
from detector.transfer import TeacherBundle, TransferTrainer, build_student
from handlers import CommandRouter
from handlers.common import (
    add_config_arguments,
    forbidden_roots,
    load_experiment,
    restore_model,
    source_dataset,
    target_dataset,
    training_batches,
)
from storage import Checkpoint, save_checkpoint
from utils import seeded_rng

# Configure logging
logger = logging.getLogger(__name__)

# Create router for transfer handlers
transfer_router = CommandRouter("transfer")


def transfer_arguments(parser: argparse.ArgumentParser) -> None:
    add_config_arguments(parser)
    parser.add_argument("--mode", choices=["dg", "da"], default=None)
    parser.add_argument("--teacher", type=Path, default=None, help="diffusion detector checkpoint")
    parser.add_argument("--target-domain", default=None, help="synthetic target used as the unlabeled DA domain")
    parser.add_argument("--no-feature-align", action="store_true")
    parser.add_argument("--no-object-align", action="store_true")
    parser.add_argument("--no-domain-aug", action="store_true")


def transfer_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.mode is not None:
        overrides["transfer.mode"] = args.mode
    if args.teacher is not None:
        overrides["transfer.teacher_checkpoint"] = str(args.teacher)
    if args.no_feature_align:
        overrides["transfer.feature_align"] = False
    if args.no_object_align:
        overrides["transfer.object_align"] = False
    if args.no_domain_aug:
        overrides["ablation.domain_aug"] = False
    if args.steps is not None:
        overrides["transfer.steps"] = args.steps
    return overrides


def check_mode(config, target_domain: str | None) -> None:
    """dg may not see any target domain; da needs exactly one."""
    mode = config.transfer.mode
    if mode == "dg" and config.data.target is not None:
        raise DataAccessError(f"dg transfer must not be configured with a target domain (data.target = {config.data.target.images})")
    if mode == "dg" and target_domain is not None:
        raise DataAccessError("dg transfer must not be given --target-domain")
    if mode == "da" and config.data.target is None and target_domain is None:
        raise TransferModeError("da transfer needs a target domain: set data.target or pass --target-domain")


@transfer_router.command("transfer", help="distill a diffusion detector into a ResNet student", arguments=transfer_arguments)
def cmd_transfer(args: argparse.Namespace, data: dict):
    context = data["context"]
    config = load_experiment(args, context, transfer_overrides(args))
    check_mode(config, args.target_domain)
    teacher_path = config.transfer.teacher_checkpoint
    if teacher_path is None:
        raise ConfigError("transfer needs a teacher checkpoint (--teacher or transfer.teacher_checkpoint)")

    teacher_model, teacher_config, _ = restore_model(Path(teacher_path), context)
    if not isinstance(teacher_model, DiffusionDetector):
        raise CheckpointError(f"{teacher_path} is not a diffusion detector checkpoint")
    if teacher_config.detector != config.detector:
        logger.warning("Using the teacher's detector settings so student heads match its pyramid")
        config = config.with_overrides({"detector": teacher_config.snapshot()["detector"]})
        context.config = config

    mode = config.transfer.mode
    guard = DataAccessGuard(forbidden_roots(config)) if mode == "dg" else contextlib.nullcontext()
    with guard:
        source = source_dataset(config, context, "train")
        teacher = TeacherBundle(
            teacher_model,
            threshold=config.transfer.pseudo_label_threshold,
            nms_iou=config.transfer.pseudo_label_nms_iou,
        )
        teacher_hash = teacher.parameter_hash()
        student = build_student(config, len(source.categories))
        trainer = TransferTrainer(teacher, student, config)
        next_batch = _transfer_batches(config, context, source, args.target_domain)
        history = trainer.fit(next_batch, config.transfer.steps)

    final_hash = teacher.parameter_hash()
    if final_hash != teacher_hash:
        context.metrics.update(mode=mode, steps=len(history), teacher_unchanged=False)
        raise FrozenWeightsError(
            f"teacher parameters changed during transfer: {teacher_hash[:12]} -> {final_hash[:12]}"
        )

    path = context.output(context.run_dir / "student.pt")
    save_checkpoint(
        path,
        Checkpoint(
            kind="student",
            state=student.state_dict(),
            backbone_hash=teacher_model.backbone.weights_hash(),
            categories=tuple(source.categories),
            config=config.snapshot(),
            extra={"mode": mode, "teacher": str(teacher_path), "teacher_hash": teacher_hash},
        ),
    )
    context.metrics.update(
        mode=mode,
        steps=len(history),
        final_loss=asdict(history[-1]) if history else None,
        teacher_unchanged=True,
    )
    return path


def _transfer_batches(config, context, source, target_domain):
    """(source_x, source_targets, target_x or None); in da the target batch doubles as the augmentation pool."""
    if config.transfer.mode == "dg":
        source_batches = training_batches(source, config, "transfer")

        def next_dg_batch():
            x, targets = source_batches()
            return x, targets, None

        return next_dg_batch

    target = target_dataset(config, context, target_domain, "train")
    sample_target = batch_sampler(target, config.training.batch_size, seeded_rng(config.seed, "target-order"))
    pending = []

    def references():
        images, _ = sample_target()
        pending.append(images)
        return images

    source_batches = training_batches(source, config, "transfer", references=references)

    def next_da_batch():
        x, targets = source_batches()
        images = pending.pop() if pending else sample_target()[0]
        pending.clear()
        return x, targets, pad_batch(images)

    return next_da_batch
