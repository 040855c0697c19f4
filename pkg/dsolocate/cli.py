"""
dsolocate command line: generate, train, detect, evaluate, bench.

Exit codes: 0 success, 2 configuration or annotation schema error,
3 file I/O error, 4 runtime (domain or training) error.
"""
import argparse
import logging
import sys
import time
import numpy as np

from pathlib import Path
from typing import Dict, List, Optional, Sequence
from dsolocate import io
from dsolocate.config import RunConfig, load_config_file, resolve
from dsolocate.evaluation import evaluate, load_annotations, save_annotation
from dsolocate.exceptions import ArtifactIOError, ConfigurationError, DsolocateError, SchemaError
from dsolocate.model import classification_report, load_checkpoint, save_checkpoint, train
from dsolocate.pipeline import detect, detect_baseline, write_artifacts
from dsolocate.synthgen import PATCH_SIZE, build_dataset, get_profile, load_dataset, random_scene_specs, render_scene, write_dataset
from dsolocate.utils import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

LOGGER_NAME = "dsolocate"

def configure_logging(verbosity: int) -> logging.Logger:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logger = logging.getLogger(LOGGER_NAME)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s", datefmt="%H:%M:%S"))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger

def cmd_generate(config: RunConfig, logger: logging.Logger) -> dict:

    """
        Writes the patch dataset (patches, masks, manifest.json) under
        <out>/dataset and `scenes` annotated full frames under <out>/scenes.
    """

    out = Path(config.out)
    profile = get_profile(config.profile)
    config.echo()

    split = build_dataset(config.n, profile, config.seed, logger=logger)
    manifest = write_dataset(split, out / "dataset")
    logger.info(f"Wrote {config.n} patches to {manifest}")

    scenes = []
    for i in range(config.scenes):
        image_id = f"scene_{i:03d}"
        rng = np.random.default_rng(derive_seed(config.seed, "scene", i))
        image, annotation = render_scene(
            profile=profile,
            dso_specs=random_scene_specs(rng, profile),
            seed=derive_seed(config.seed, "scene-render", i),
            label_mode=config.label_mode,
            image_id=image_id,
        )
        io.save_image(out / "scenes" / f"{image_id}.png", image.pixels)
        save_annotation(out / "scenes" / f"{image_id}.json", annotation)
        scenes.append(image_id)
    logger.info(f"Wrote {len(scenes)} scenes to {out / 'scenes'}")

    return {"manifest": str(manifest), "counts": split.counts(), "scenes": scenes}

def cmd_train(config: RunConfig, logger: logging.Logger) -> dict:

    """
        Trains on <manifest> and writes checkpoint.json, history.jsonl and
        the test-split classification report.
    """

    out = Path(config.out)
    training = config.training_config()
    config.echo(training=training.to_dict())

    split = load_dataset(config.manifest)
    params, history = train(split, training, logger=logger)
    checkpoint = out / "checkpoint.json"
    save_checkpoint(params, checkpoint, history)
    try:
        (out / "history.jsonl").write_text(history.to_jsonl(), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(out / "history.jsonl", f"could not be written: {e}")

    report = classification_report(params, split.test) if split.test else None
    summary = {
        "checkpoint": str(checkpoint),
        "digest": params.digest(),
        "epochs": len(history),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "test_report": report,
    }
    io.write_json(out / "train.json", summary)
    logger.info(f"Checkpoint {checkpoint} (sha256 {summary['digest']})")
    return summary

def _check_patch_size(path: Path, image: np.ndarray, scale: float):
    height, width = image.shape[:2]
    scaled = (int(round(height * scale)), int(round(width * scale)))
    if min(scaled) < PATCH_SIZE:
        raise ConfigurationError(
            f"{path}: {height}x{width} scaled by {scale} is {scaled[0]}x{scaled[1]}, smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch"
        )

def cmd_detect(config: RunConfig, logger: logging.Logger) -> dict:

    """
        Runs detection (or the starless baseline with --baseline) on every
        input image and writes the annotated image, heatmap, contours and
        statistics per image.
    """

    out = Path(config.out)
    config.echo()
    params = None if config.baseline else load_checkpoint(config.checkpoint)
    starless = io.load_image(config.starless) if config.starless is not None else None
    if starless is not None and len(config.images) != 1:
        raise ConfigurationError("--starless applies to a single input image")

    results = {}
    for image_path in map(Path, config.images):
        image = io.load_image(image_path)
        stem = image_path.stem
        if config.baseline:
            contours, stats = detect_baseline(image, starless=starless, min_area=config.min_area, logger=logger)
            contours.image = stem
            write_artifacts(out, stem, image, contours, stats)
        else:
            _check_patch_size(image_path, image, config.scale)
            heatmap, contours, stats = detect(image, params, config.detect_config(), logger=logger)
            contours.image = stem
            write_artifacts(out, stem, image, contours, stats, heatmap=heatmap)
        results[stem] = dict(stats.to_dict(), contours=len(contours))
        logger.info(f"{image_path}: {len(contours)} contours ({stats.mode})")

    summary = {"seed": config.seed, "images": results}
    io.write_json(out / "detect.json", summary)
    return summary

def cmd_evaluate(config: RunConfig, logger: logging.Logger) -> dict:

    """
        Scores prediction annotations against ground truth and writes
        report.json and report.txt.
    """

    out = Path(config.out)
    config.echo()
    predictions = load_annotations(config.predictions)
    truths = load_annotations(config.truths)
    report = evaluate(predictions, truths, config.iou_threshold)

    io.write_json(out / "report.json", dict(report.to_dict(), seed=config.seed))
    table = report.to_table()
    try:
        (out / "report.txt").write_text(table, encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(out / "report.txt", f"could not be written: {e}")
    print(table, end="")
    return report.to_dict()

def _bench_table(rows: List[dict]) -> str:
    header = f"{'threshold':>10}{'scale':>8}{'slots':>8}{'attrib':>8}{'wall[s]':>10}{'mAP':>8}{'dmAP':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['select_threshold']:>10.2f}{r['scale']:>8.2f}{r['slot_count']:>8d}{r['attribution_calls']:>8d}"
            f"{r['wall_time']:>10.2f}{r['map']:>8.4f}{r['map_delta']:>+9.4f}"
        )
    return "\n".join(lines) + "\n"

def cmd_bench(config: RunConfig, logger: logging.Logger) -> dict:

    """
        Runs detect over the scene set for every (threshold, scale)
        setting and reports slots, attribution calls, wall time, mAP and
        the mAP change relative to the first setting.
    """

    out = Path(config.out)
    config.echo()
    params = load_checkpoint(config.checkpoint)
    truths = load_annotations([config.scenes_dir])
    scenes = [p for p in sorted(Path(config.scenes_dir).glob("*.png")) if p.stem in truths]
    if not scenes:
        raise ConfigurationError(f"no annotated scene images in {config.scenes_dir}")
    images = {p.stem: io.load_image(p) for p in scenes}
    truths = {stem: truths[stem] for stem in images}

    rows = []
    for threshold in config.thresholds:
        for scale in config.scales:
            detect_config = config.detect_config(select_threshold=threshold, scale=scale)
            predictions, slots, calls = {}, 0, 0
            start = time.perf_counter()
            for stem, image in images.items():
                _, contours, stats = detect(image, params, detect_config, logger=logger)
                contours.image = stem
                predictions[stem] = contours
                slots += stats.slot_count
                calls += stats.attribution_calls
            wall = time.perf_counter() - start
            report = evaluate(predictions, truths, config.iou_threshold)
            rows.append({
                "select_threshold": threshold,
                "scale": scale,
                "slot_count": slots,
                "attribution_calls": calls,
                "wall_time": round(wall, 6),
                "map": round(report.map, 6),
            })
            logger.info(f"threshold {threshold} scale {scale}: {calls}/{slots} attributions, mAP {report.map:.4f}, {wall:.1f}s")

    for row in rows:
        row["map_delta"] = round(row["map"] - rows[0]["map"], 6)

    summary = {"seed": config.seed, "scenes": sorted(images), "rows": rows}
    io.write_json(out / "bench.json", summary)
    table = _bench_table(rows)
    try:
        (out / "bench.txt").write_text(table, encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(out / "bench.txt", f"could not be written: {e}")
    print(table, end="")
    return summary

COMMAND_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}

def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Root seed, every stage derives its seed from it.")
    common.add_argument("--jobs", type=int, default=None, help="Maximum concurrent patch workers.")
    common.add_argument("--timeout", type=float, default=None, help="Seconds a parallel detection run may take.")
    common.add_argument("--config", dest="config_file", default=None, help="JSON file of defaults for this run.")
    common.add_argument("--out", default=None, help="Output directory.")
    common.add_argument("-v", "--verbose", action="count", default=None, help="More logging (-vv for debug).")
    common.add_argument("-q", "--quiet", dest="verbose", action="store_const", const=0, help="Warnings and errors only.")
    return common

def build_parser() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(prog="dsolocate", description="Deep-sky object localization in smart-telescope images.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common_arguments()]

    generate = sub.add_parser("generate", parents=common, help="Generate a synthetic dataset and annotated scenes.")
    generate.add_argument("--n", type=int, default=None, help="Number of dataset patches.")
    generate.add_argument("--scenes", type=int, default=None, help="Number of annotated full scenes.")
    generate.add_argument("--profile", default=None, help="Instrument profile (desk, stellina, vespera).")
    generate.add_argument("--label-mode", dest="label_mode", default=None, choices=("dso", "kind"), help="Scene labels.")

    training = sub.add_parser("train", parents=common, help="Train the patch classifier.")
    training.add_argument("--manifest", default=None, help="Dataset manifest.json.")
    training.add_argument("--epochs", type=int, default=None, help="Training epochs.")
    training.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="Batch size.")
    training.add_argument("--lr", dest="learning_rate", type=float, default=None, help="ADAM learning rate.")
    training.add_argument("--architecture", default=None, help="Architecture preset (desk, deep).")
    training.add_argument("--early-stop", dest="early_stop", type=int, default=None, help="Patience in epochs.")

    detection = sub.add_parser("detect", parents=common, help="Detect deep-sky objects in full frames.")
    detection.add_argument("images", nargs="*", help="Input PNG or TIFF images.")
    detection.add_argument("--checkpoint", default=None, help="Model checkpoint.")
    detection.add_argument("--select-threshold", dest="select_threshold", type=float, default=None, help="Minimum patch probability for attribution.")
    detection.add_argument("--percentile", type=float, default=None, help="Heatmap binarization percentile.")
    detection.add_argument("--ig-steps", dest="ig_steps", type=int, default=None, help="Integrated-gradient steps.")
    detection.add_argument("--overlap", type=int, default=None, help="Patch overlap in pixels.")
    detection.add_argument("--scale", type=float, default=None, help="Pre-scale factor of the input image.")
    detection.add_argument("--min-area", dest="min_area", type=int, default=None, help="Smallest contour area in pixels.")
    detection.add_argument("--baseline", action="store_true", default=None, help="Run the starless-contour baseline instead.")
    detection.add_argument("--starless", default=None, help="External starless image for the baseline.")

    evaluation = sub.add_parser("evaluate", parents=common, help="Score predictions against ground truth.")
    evaluation.add_argument("--predictions", nargs="+", default=None, help="Prediction files or directories.")
    evaluation.add_argument("--truths", nargs="+", default=None, help="Ground-truth files or directories.")
    evaluation.add_argument("--iou-threshold", dest="iou_threshold", type=float, default=None, help="IoU needed for a match.")

    bench = sub.add_parser("bench", parents=common, help="Benchmark patch skipping and downscaling.")
    bench.add_argument("--checkpoint", default=None, help="Model checkpoint.")
    bench.add_argument("--scenes-dir", dest="scenes_dir", default=None, help="Directory of scene images and annotations.")
    bench.add_argument("--thresholds", nargs="+", type=float, default=None, help="Selection thresholds.")
    bench.add_argument("--scales", nargs="+", type=float, default=None, help="Scale factors.")
    bench.add_argument("--ig-steps", dest="ig_steps", type=int, default=None, help="Integrated-gradient steps.")
    bench.add_argument("--percentile", type=float, default=None, help="Heatmap binarization percentile.")
    bench.add_argument("--iou-threshold", dest="iou_threshold", type=float, default=None, help="IoU needed for a match.")

    return parser

def _cli_values(args: argparse.Namespace) -> Dict[str, object]:
    values = {}
    for key, value in vars(args).items():
        if key in ("command", "config_file") or value is None:
            continue
        if isinstance(value, list) and not value:
            continue
        values[key] = value
    return values

def run(argv: Optional[Sequence[str]] = None) -> dict:
    """
        Parses, resolves and runs one subcommand, raising on failure.
    """
    args = build_parser().parse_args(argv)
    file_values = load_config_file(args.config_file) if args.config_file else {}
    config = resolve(args.command, file_values, _cli_values(args)).check_paths()
    logger = configure_logging(config.verbose)
    logger.debug(f"Resolved configuration: {config.to_dict()}")
    return COMMAND_HANDLERS[config.command](config, logger)

def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        run(argv)
    except (ConfigurationError, SchemaError) as e:
        print(f"dsolocate: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactIOError as e:
        print(f"dsolocate: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"dsolocate: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except DsolocateError as e:
        print(f"dsolocate: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
