"""
Evaluation handlers module.
Handles evaluate (AP report, inference timing, optional corruption sweep)
and corrupt-bench (the 15 x 5 sweep with mPC).
"""
import argparse
import logging
import time
from pathlib import Path

from bench.evaluation import EvalReport, evaluate_ap, evaluate_mpc, run_corruption_benchmark
from detector.dual_branch import DiffusionDetector
from handlers import CommandRouter
from handlers.common import dataset_by_name, predict_dataset, restore_model
from storage import write_corruption_csv, write_detections_jsonl, write_report
from utils import seeded_rng

# Configure logging
logger = logging.getLogger(__name__)

# Create router for evaluation handlers
eval_router = CommandRouter("eval")


def dataset_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--dataset", default="source", help="source, a target domain name, or a COCO name with --annotations")
    parser.add_argument("--split", choices=["train", "test"], default="test")
    parser.add_argument("--annotations", type=Path, default=None)
    parser.add_argument("--images", type=Path, default=None)
    parser.add_argument("--max-images", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=4)


def evaluate_arguments(parser: argparse.ArgumentParser) -> None:
    dataset_arguments(parser)
    parser.add_argument("--corruptions", action="store_true", help="also run the 15 x 5 corruption sweep")
    parser.add_argument("--multistep", type=int, default=None, metavar="T", help="time the T-step baseline too")


def _load(args, context):
    model, config, predictor = restore_model(args.checkpoint, context)
    dataset = dataset_by_name(config, context, args.dataset, args.split, args.annotations, args.images)
    if args.max_images is not None:
        dataset = dataset.subset(args.max_images)
    return model, config, predictor, dataset


def timed_predictions(model, predictor, dataset, batch_size: int) -> tuple[dict, dict]:
    """Detections plus seconds and denoiser calls per image."""
    counts = isinstance(model, DiffusionDetector)
    if counts:
        model.backbone.reset_counter()
    started = time.perf_counter()
    detections = predict_dataset(predictor, dataset, batch_size)
    elapsed = time.perf_counter() - started
    n = max(len(dataset), 1)
    timing = {"seconds_per_image": elapsed / n}
    if counts:
        timing["denoiser_calls_per_image"] = model.backbone.denoiser_calls / n
    return detections, timing


def _corruption_sweep(report: EvalReport, predictor, dataset, config, context, batch_size: int) -> None:
    table = run_corruption_benchmark(predictor, dataset, seeded_rng(config.seed, "corruptions"), batch_size=batch_size)
    report.corruption_table = table
    report.mpc = evaluate_mpc(table)
    report.clean_ap50_95 = report.ap50_95
    write_corruption_csv(table, context.output(context.run_dir / "corruption.csv"))
    context.metrics.update(mpc=report.mpc, clean_ap50_95=report.clean_ap50_95)
    logger.info("mPC %.4f (clean AP50:95 %.4f)", report.mpc, report.clean_ap50_95)


@eval_router.command("evaluate", help="AP50 per class, mAP, AP50:95 of a checkpoint", arguments=evaluate_arguments)
def cmd_evaluate(args: argparse.Namespace, data: dict):
    context = data["context"]
    model, config, predictor, dataset = _load(args, context)
    detections, timing = timed_predictions(model, predictor, dataset, args.batch_size)
    logger.info("Inference: %s", ", ".join(f"{k}={v:.4g}" for k, v in timing.items()))
    context.metrics["timing"] = timing

    if args.multistep is not None and isinstance(model, DiffusionDetector):
        single = model.config
        model.config = single.with_overrides({"diffusion.multistep_baseline": args.multistep})
        try:
            _, multi_timing = timed_predictions(model, predictor, dataset, args.batch_size)
        finally:
            model.config = single
        logger.info("Inference with %d-step baseline: %s", args.multistep, multi_timing)
        context.metrics["timing_multistep"] = {"steps": args.multistep, **multi_timing}

    report = evaluate_ap(detections, dataset)
    if args.corruptions:
        _corruption_sweep(report, predictor, dataset, config, context, args.batch_size)

    write_detections_jsonl(detections, context.output(context.run_dir / "detections.jsonl"))
    for path in write_report(report, context.run_dir):
        context.output(path)
    context.metrics.update(dataset=dataset.domain_tag, map50=report.map50, ap50_95=report.ap50_95)
    logger.info("Evaluation on %s:\n%s", dataset.domain_tag, report.format_table())
    return report


@eval_router.command("corrupt-bench", help="15 corruptions x 5 severities and mPC", arguments=dataset_arguments)
def cmd_corrupt_bench(args: argparse.Namespace, data: dict):
    context = data["context"]
    model, config, predictor, dataset = _load(args, context)
    report = evaluate_ap(predict_dataset(predictor, dataset, args.batch_size), dataset)
    _corruption_sweep(report, predictor, dataset, config, context, args.batch_size)
    for path in write_report(report, context.run_dir, stem="corruption_report"):
        context.output(path)
    logger.info("Corruption benchmark on %s:\n%s", dataset.domain_tag, report.format_table())
    return report
