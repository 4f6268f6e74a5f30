"""Command-line entry point for the SIAN synthesis toolkit."""

import argparse
import logging
import sys
import time
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from config import Config
from dataset import DatasetReader, load_pairs, write_manifest
from downstream import (
    SegConfig,
    SyntheticSpec,
    load_segmenter,
    predict_instances,
    run_augmentation_experiment,
)
from featurize import (
    ConditionMaps,
    build_condition_pyramid,
    featurize_mask,
    generator_level_sizes,
    save_condition_maps,
    validate_instance_mask,
)
from image_io import read_mask_png, read_rgb_png, to_uint8, to_unit_range
from maskgen import LayoutParams, NucleusPolygonParams, generate_mask_dataset
from metrics import evaluate_sets
from network import NetworkConfig
from report_writer import ReportWriter
from trainer import (
    SianSynthesizer,
    TrainConfig,
    build_style_bank,
    load_style_bank,
    save_style_bank,
    train,
)
from training_monitor import TrainingMonitor

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def setup_logging(config: Config):
    log_level = getattr(logging, str(config.log_level).upper(), logging.INFO)
    log_format = config.get(
        "logging.format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    logging.basicConfig(
        level=log_level,
        format=log_format,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )

    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (default: config/config.yaml)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a dotted config key, e.g. training.epochs=5 (repeatable)",
    )
    common.add_argument("--seed", type=int, help="Seed for every random stream of the command")

    parser = _Parser(prog="sian", description="Instance-aware histopathology image synthesis")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("featurize", parents=[common], help="Write condition maps of an instance mask")
    p.add_argument("--mask", required=True, help="16-bit instance mask PNG")
    p.add_argument("--out", required=True, help="Output condition map container")
    p.add_argument("--pyramid-dir", help="Also write one container per generator level here")

    p = sub.add_parser("maskgen", parents=[common], help="Generate synthetic instance masks")
    p.add_argument("--count", type=int, required=True, help="Number of masks")
    p.add_argument("--out", required=True, help="Output directory")

    p = sub.add_parser("train", parents=[common], help="Train generator, encoder and discriminator")
    p.add_argument("--data", required=True, help="Dataset directory (images/, masks/, manifest.jsonl)")
    p.add_argument("--out", required=True, help="Checkpoint and log directory")
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--max-steps", type=int, help="Stop after this many steps")
    p.add_argument("--segmenter", help="Segmenter checkpoint for held-out PQ (default: evaluation.segmenter)")

    p = sub.add_parser("synthesize", parents=[common], help="Render instance masks in a given style")
    p.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    p.add_argument("--masks", required=True, help="Mask PNG or directory of mask PNGs")
    style = p.add_mutually_exclusive_group(required=True)
    style.add_argument("--style-image", help="Reference image whose style is encoded")
    style.add_argument("--style-bank", help="Stored per-organ style vectors (.npz)")
    style.add_argument("--style-data", help="Real dataset whose per-organ mean styles are used (saved as style_bank.npz)")
    p.add_argument("--organ", help="Organ to take from the style bank (default: first)")
    p.add_argument("--sample", action="store_true", help="Sample the style posterior instead of its mean")
    p.add_argument("--out", required=True, help="Output dataset directory")

    p = sub.add_parser("evaluate", parents=[common], help="Score synthetic images against real ones")
    p.add_argument("--real", required=True, help="Real dataset directory")
    p.add_argument("--fake", required=True, help="Synthetic dataset directory (same ids)")
    preds = p.add_mutually_exclusive_group()
    preds.add_argument("--pred-masks", help="Directory of predicted instance masks <id>.png")
    preds.add_argument("--segmenter", help="Segmenter checkpoint used to predict instances on fakes")
    p.add_argument("--out", required=True, help="Report directory")

    p = sub.add_parser(
        "augment-experiment", parents=[common], help="Compare segmenters trained with and without synthetic data"
    )
    p.add_argument("--train", required=True, help="Real training dataset directory")
    p.add_argument("--test", required=True, help="Test dataset directory")
    p.add_argument("--checkpoint", help="Trained checkpoint providing the synthetic images")
    p.add_argument("--out", required=True, help="Report directory")

    return parser


def load_config(args: argparse.Namespace) -> Config:
    config = Config(args.config) if args.config else Config()
    config.apply_overrides(args.overrides)
    if args.seed is not None:
        for key in ("training.seed", "maskgen.layout.seed", "downstream.seed"):
            config.set(key, args.seed)
    return config


def _mask_paths(path: Path) -> List[Path]:
    if path.is_dir():
        paths = sorted(path.glob("*.png"))
        if not paths:
            raise ValueError(f"No mask PNGs in {path}")
        return paths
    if not path.exists():
        raise FileNotFoundError(f"Mask not found: {path}")
    return [path]


def cmd_featurize(args, config: Config) -> Dict:
    labels = validate_instance_mask(read_mask_png(args.mask))
    maps = featurize_mask(labels)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_condition_maps(args.out, maps)
    written = [args.out]

    if args.pyramid_dir:
        net = NetworkConfig.from_config(config)
        if labels.shape != (net.image_size, net.image_size):
            raise ValueError(
                f"mask is {labels.shape[0]}x{labels.shape[1]}; pyramids need {net.image_size}x{net.image_size}"
            )
        pyramid = build_condition_pyramid(maps, generator_level_sizes(net.image_size, net.n_blocks))
        out_dir = Path(args.pyramid_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for level in pyramid.levels:
            h, w = level.spatial_size
            path = out_dir / f"level_{h}x{w}.maps"
            save_condition_maps(
                path,
                ConditionMaps(
                    level.semantic[0].numpy(), level.direction[0].numpy(), level.distance[0].numpy()
                ),
            )
            written.append(str(path))
    return {"instances": int(labels.max(initial=0)), "files": written}


def cmd_maskgen(args, config: Config) -> Dict:
    layout = LayoutParams.from_config(config)
    if layout.canvas != (config.image_size, config.image_size):
        logging.getLogger(__name__).warning(
            f"Mask canvas {layout.canvas} differs from network.image_size {config.image_size}; "
            "synthesize will reject these masks"
        )
    records = generate_mask_dataset(
        args.count,
        layout,
        NucleusPolygonParams.from_config(config),
        args.out,
        max_workers=int(config.get("maskgen.max_concurrent_writes", 4)),
    )
    return {
        "masks": len(records),
        "incomplete": sum(1 for r in records if not r["complete"]),
    }


def cmd_train(args, config: Config) -> Dict:
    train_config = TrainConfig.from_config(config)
    items = DatasetReader.from_config(config).ingest(args.data)
    if not items:
        raise ValueError(f"No training data in {args.data}")
    segmenter = None
    segmenter_path = args.segmenter or config.get("evaluation.segmenter")
    if segmenter_path:
        segmenter = partial(predict_instances, load_segmenter(segmenter_path))
    out_dir = Path(args.out)
    monitor = TrainingMonitor(out_dir / config.metrics_log)
    checkpoint = train(
        items,
        train_config,
        out_dir,
        monitor=monitor,
        resume=args.resume,
        max_steps=args.max_steps,
        segmenter=segmenter,
    )
    return {"checkpoint": str(checkpoint), "patches": len(items)}


def cmd_synthesize(args, config: Config) -> Dict:
    synthesizer = SianSynthesizer.from_checkpoint(args.checkpoint)
    rng = None
    if args.sample:
        rng = torch.Generator().manual_seed(int(config.seed))

    if args.style_image:
        style = synthesizer.encode_style(
            to_unit_range(read_rgb_png(args.style_image)), sample=args.sample, rng=rng
        )
        organ = args.organ or Path(args.style_image).stem
    else:
        if args.style_bank:
            bank = load_style_bank(args.style_bank)
        else:
            bank = build_style_bank(synthesizer, DatasetReader.from_config(config).ingest(args.style_data))
            save_style_bank(Path(args.out) / "style_bank.npz", bank)
        if not bank:
            raise ValueError("Style bank is empty")
        organ = args.organ or next(iter(bank))
        if organ not in bank:
            raise ValueError(f"Organ '{organ}' not in style bank (have: {sorted(bank)})")
        style = bank[organ]

    images: Dict[str, np.ndarray] = {}
    masks: Dict[str, np.ndarray] = {}
    for path in _mask_paths(Path(args.masks)):
        labels = read_mask_png(path)
        images[path.stem] = to_uint8(synthesizer.synthesize(labels, style))
        masks[path.stem] = labels

    writer = ReportWriter(args.out, config.output_format)
    max_concurrent = int(config.get("output.max_concurrent_writes", 4))
    image_results = writer.write_images(images, "images", "rgb", max_concurrent)
    mask_results = writer.write_images(masks, "masks", "mask", max_concurrent)
    failed = sorted(n for n in images if not (image_results.get(n) and mask_results.get(n)))
    written = [n for n in sorted(images) if n not in failed]
    write_manifest(Path(args.out) / "manifest.jsonl", [{"id": n, "organ": organ} for n in written])
    if failed:
        raise OSError(f"Failed to write synthetic pairs: {failed}")
    return {"images": len(written), "organ": organ}


def cmd_evaluate(args, config: Config) -> Dict:
    real = {r["id"]: r for r in load_pairs(args.real)}
    fake = {r["id"]: r for r in load_pairs(args.fake)}
    ids = sorted(set(real) & set(fake))
    if not ids:
        raise ValueError(f"No shared ids between {args.real} and {args.fake}")
    missing = sorted(set(fake) - set(real))
    if missing:
        logging.getLogger(__name__).warning(f"{len(missing)} synthetic images have no real counterpart")

    pred_masks = None
    if args.pred_masks:
        pred_masks = [read_mask_png(Path(args.pred_masks) / f"{i}.png") for i in ids]
    elif args.segmenter:
        model = load_segmenter(args.segmenter)
        pred_masks = [predict_instances(model, fake[i]["image"]) for i in ids]

    extractor_name = str(config.get("losses.extractor", "random"))
    report = evaluate_sets(
        [real[i]["image"] for i in ids],
        [fake[i]["image"] for i in ids],
        [real[i]["mask"] for i in ids],
        pred_masks=pred_masks,
        organ_tags=[real[i]["organ"] for i in ids],
        extractor_name=extractor_name,
        data_range=float(config.get("evaluation.ssim_data_range", 1.0)),
        workers=int(config.get("evaluation.workers", 4)),
    )
    path = ReportWriter(args.out, config.output_format).write_report(
        "metrics", report.to_dict(), report.csv_rows()
    )
    return {"report": str(path), "pairs": len(ids)}


def cmd_augment_experiment(args, config: Config) -> Dict:
    reader = DatasetReader.from_config(config)
    train_items = reader.ingest(args.train)
    test_items = reader.ingest(args.test)
    spec = SyntheticSpec.from_config(config, checkpoint=args.checkpoint)
    report = run_augmentation_experiment(
        train_items, spec, test_items, SegConfig.from_config(config), output_dir=args.out
    )
    path = ReportWriter(args.out, config.output_format).write_report(
        "augmentation_experiment", report.to_dict(), report.csv_rows()
    )
    return {"report": str(path), "rows": len(report.rows)}


COMMANDS = {
    "featurize": cmd_featurize,
    "maskgen": cmd_maskgen,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "augment-experiment": cmd_augment_experiment,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on validation errors, 2 otherwise."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args)
    except (FileNotFoundError, ValueError) as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_VALIDATION

    setup_logging(config)
    logger = logging.getLogger(__name__)
    logger.info(f"Starting '{args.command}'")
    start_time = time.time()

    try:
        results = COMMANDS[args.command](args, config)
        status = EXIT_OK
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed validation: {e}")
        results, status = {"error": str(e)}, EXIT_VALIDATION
    except (Exception, KeyboardInterrupt) as e:
        logger.exception(f"{args.command} failed: {e}")
        results, status = {"error": str(e)}, EXIT_RUNTIME

    logger.info("=" * 50)
    logger.info(f"Command summary ({args.command}):")
    logger.info(f"  Success: {status == EXIT_OK}")
    for key, value in results.items():
        logger.info(f"  {key}: {value}")
    logger.info(f"  Time: {time.time() - start_time:.2f} seconds")
    logger.info("=" * 50)
    return status


if __name__ == "__main__":
    sys.exit(main())
