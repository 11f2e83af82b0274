"""
Training handlers module.
Handles train-diff: dual-branch training with ablation flags and the
loss-weight sweep.
"""
import argparse
import itertools
import logging
from dataclasses import asdict

from bench.datasets import DataAccessGuard, DetectionDataset, pad_batch
from bench.evaluation import evaluate_ap
from config import ExperimentConfig
from core import ConfigError
from detector.dual_branch import DiffusionDetector, DualBranchTrainer, LossBreakdown, build_detector
from handlers import CommandRouter
from handlers.common import (
    add_config_arguments,
    dataset_by_name,
    evaluation_targets,
    forbidden_roots,
    load_experiment,
    predict_dataset,
    source_dataset,
    training_batches,
)
from storage import Checkpoint, save_checkpoint, write_rows_csv

# Configure logging
logger = logging.getLogger(__name__)

# Create router for training handlers
train_router = CommandRouter("train")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def train_arguments(parser: argparse.ArgumentParser) -> None:
    add_config_arguments(parser)
    parser.add_argument("--no-aux", action="store_true", help="train the ordinary branch only")
    parser.add_argument("--no-consistency", action="store_true", help="drop the consistency losses")
    parser.add_argument("--no-fusion-skips", action="store_true", help="fuse without top-down skip connections")
    parser.add_argument("--no-domain-aug", action="store_true", help="disable FDA / histogram / moment matching")
    parser.add_argument("--collection", choices=["full", "res_last"], default=None, help="feature taps to fuse")
    parser.add_argument("--no-noise", action="store_true", help="feed the clean latent to the denoiser")
    parser.add_argument("--multistep", type=int, default=None, metavar="T", help="average taps over T timesteps")
    parser.add_argument("--gamma", type=float, default=None)
    parser.add_argument("--lambda", dest="lam", type=float, default=None)
    parser.add_argument("--sweep-gamma", type=_float_list, default=None, metavar="G1,G2,...")
    parser.add_argument("--sweep-lambda", type=_float_list, default=None, metavar="L1,L2,...")


def ablation_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.no_aux:
        overrides["ablation.aux_branch"] = False
    if args.no_consistency:
        overrides["ablation.consistency"] = False
    if args.no_fusion_skips:
        overrides["ablation.fusion_skips"] = False
    if args.no_domain_aug:
        overrides["ablation.domain_aug"] = False
    if args.collection is not None:
        overrides["ablation.feature_collection"] = args.collection
    if args.no_noise:
        overrides["diffusion.add_noise"] = False
    if args.multistep is not None:
        overrides["diffusion.multistep_baseline"] = args.multistep
    if args.gamma is not None:
        overrides["loss.gamma"] = args.gamma
    if args.lam is not None:
        overrides["loss.lambda"] = args.lam
    if args.steps is not None:
        overrides["training.steps"] = args.steps
    return overrides


def train_detector(config: ExperimentConfig, dataset: DetectionDataset) -> tuple[DiffusionDetector, list[LossBreakdown]]:
    detector = build_detector(config, dataset.categories)
    trainer = DualBranchTrainer(detector, config)
    history = trainer.fit(training_batches(dataset, config, "train"), config.training.steps)
    return detector, history


def detector_checkpoint(detector: DiffusionDetector, config: ExperimentConfig, history: list[LossBreakdown]) -> Checkpoint:
    return Checkpoint(
        kind="diffusion",
        state=detector.trainable_state_dict(),
        backbone_hash=detector.backbone.weights_hash(),
        categories=tuple(detector.categories),
        config=config.snapshot(),
        extra={"steps": len(history), "final_loss": asdict(history[-1]) if history else None},
    )


@train_router.command("train-diff", help="train the dual-branch diffusion detector", arguments=train_arguments)
def cmd_train_diff(args: argparse.Namespace, data: dict):
    context = data["context"]
    config = load_experiment(args, context, ablation_overrides(args))
    if args.sweep_gamma or args.sweep_lambda:
        return _run_sweep(args, config, context)

    # Training sees the source domain only
    with DataAccessGuard(forbidden_roots(config)):
        dataset = source_dataset(config, context, "train")
        detector, history = train_detector(config, dataset)

    path = context.output(context.run_dir / "detector.pt")
    save_checkpoint(path, detector_checkpoint(detector, config, history))
    context.metrics.update(
        gamma=config.loss.gamma,
        lam=config.loss.lam,
        steps=len(history),
        final_loss=asdict(history[-1]) if history else None,
    )
    logger.info("train-diff finished: %s", history[-1] if history else "no steps")
    return path


def _run_sweep(args: argparse.Namespace, config: ExperimentConfig, context) -> object:
    """One training per (gamma, lambda) grid point with the same seed; mAP per domain to sweep.csv."""
    gammas = args.sweep_gamma or [config.loss.gamma]
    lambdas = args.sweep_lambda or [config.loss.lam]
    if any(v < 0 for v in (*gammas, *lambdas)):
        raise ConfigError("sweep values must be non-negative")
    targets = evaluation_targets(config)
    rows = []
    for gamma, lam in itertools.product(gammas, lambdas):
        point = config.with_overrides({"loss.gamma": gamma, "loss.lambda": lam})
        with DataAccessGuard(forbidden_roots(point)):
            dataset = source_dataset(point, context, "train")
            detector, history = train_detector(point, dataset)

        def predictor(images, ids, detector=detector, seed=point.seed):
            return detector.predict(pad_batch(images), ids, seed)

        row = {"gamma": gamma, "lambda": lam, "final_loss": history[-1].total if history else None}
        source_test = dataset_by_name(point, context, "source", "test")
        row["source_map"] = evaluate_ap(predict_dataset(predictor, source_test), source_test).map50
        for name in targets:
            target_test = dataset_by_name(point, context, name, "test")
            row[f"{name}_map"] = evaluate_ap(predict_dataset(predictor, target_test), target_test).map50
        logger.info("sweep gamma=%s lambda=%s: %s", gamma, lam, row)
        rows.append(row)

    path = write_rows_csv(rows, context.output(context.run_dir / "sweep.csv"))
    context.metrics["sweep"] = rows
    return path
