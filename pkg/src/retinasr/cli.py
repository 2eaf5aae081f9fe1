"""Command line: generate-data, preprocess, train, evaluate, grid, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .generators import GeneratorConfig
from .discriminator import DiscriminatorConfig
from .experiments import (DEFAULT_ROWS, GridSpec, desk_dataset, desk_spec, find_row,
                          render_report, render_stored, run_grid, smoke_dataset, smoke_spec,
                          summary_text)
from .objectives import LossWeights
from .phantom import PhantomConfig, generate_dataset, load_dataset, save_dataset
from .pipeline import (OVERLAP, PATCH_SIZE, build_patch_dataset, format_stats, load_patch_store,
                       save_patch_store, select, split_dataset)
from .trainer import ModelConfig, TrainConfig, evaluate_checkpoint, evaluate_predictions

log = logging.getLogger("retinasr")

METRIC_HEADER = "config_id,dice,miou," + ",".join(f"iou_{k}" for k in range(8))


def _load_split(store, split):
    pairs, manifest = load_patch_store(store)
    ids = manifest.train if split == "train" else manifest.test
    return select(pairs, ids)


def _add_training_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-4, help="learning rate of both networks")
    g.add_argument("--beta1", type=float, default=0.5)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--lambda-l1", type=float, default=100.0)
    g.add_argument("--alpha", type=float, default=1.0, help="weight of the Dice term")
    g.add_argument("--base-width", type=int, default=64)
    g.add_argument("--depth", type=int, default=None,
                   help="U-Net levels or ResNet blocks (4 / 9 when unset)")
    g.add_argument("--disc-width", type=int, default=64)
    g.add_argument("--init", choices=("he", "normal"), default="he")
    g.add_argument("--seed", type=int, default=0)


def _train_config(args, alpha=None):
    return TrainConfig(
        lr_g=args.lr, lr_d=args.lr, adam_betas=(args.beta1, args.beta2),
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        weights=LossWeights(lambda_l1=args.lambda_l1,
                            alpha_dice=args.alpha if alpha is None else alpha),
    )


def build_parser(train_defaults=None):
    parser = argparse.ArgumentParser(
        prog="retinasr",
        description="Joint x4 super-resolution and layer segmentation of OCT-like B-scans.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=45)
    p.add_argument("--scans-per-patient", type=int, default=19)
    p.add_argument("--height", type=int, default=448)
    p.add_argument("--width", type=int, default=448)
    p.add_argument("--speckle", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("preprocess", help="denoise, augment, crop and split into PatchPairs")
    p.add_argument("--data", required=True, help="directory written by generate-data")
    p.add_argument("--out", required=True)
    p.add_argument("--augment", default="identity",
                   help="comma list, e.g. identity,hflip,rotate(10),translate(5,-3)")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--split", choices=("by-patient", "by-patch"), default="by-patient")
    p.add_argument("--patch", type=int, default=PATCH_SIZE)
    p.add_argument("--overlap", type=float, default=OVERLAP)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--amount", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one generator/discriminator pair")
    p.add_argument("--store", required=True, help="directory written by preprocess")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("unet", "resnet"), default="resnet")
    p.add_argument("--upsampler", choices=("transposed", "subpixel", "none"), default="subpixel")
    p.add_argument("--head", choices=("rgb", "softmax8"), default="rgb")
    p.add_argument("--dice", action=argparse.BooleanOptionalAction, default=True,
                   help="include the Dice term (--no-dice sets its weight to 0)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--config", help="JSON file of flag values (keys as flag names)")
    _add_training_flags(p)
    if train_defaults:
        known = {a.dest for a in p._actions}
        unknown = sorted(set(train_defaults) - known)
        if unknown:
            p.error(f"unknown config keys: {unknown}")
        p.set_defaults(**train_defaults)

    p = sub.add_parser("evaluate", help="Dice and mIOU of a checkpoint or saved predictions")
    p.add_argument("--store", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory of <pair_id>.png label maps")

    p = sub.add_parser("grid", help="run the 16-row ablation grid and render its report")
    p.add_argument("--out", required=True)
    scale = p.add_mutually_exclusive_group(required=True)
    scale.add_argument("--store")
    scale.add_argument("--smoke", action="store_true", help="tiny dataset, models and epochs")
    scale.add_argument("--desk", action="store_true", help="200-pair CPU-sized benchmark")
    p.add_argument("--rows", help="comma list of row ids (default: all 16)")
    p.add_argument("--grid-seed", type=int, default=0)
    p.add_argument("--srcnn-epochs", type=int, default=30)
    _add_training_flags(p)

    p = sub.add_parser("render", help="re-render the report of a finished grid")
    p.add_argument("--run", required=True, help="grid output directory")
    p.add_argument("--out", help="defaults to the run directory")
    return parser


def parse_args(argv=None):
    """Values from ``train --config FILE`` act as defaults; explicit flags still win."""
    args = build_parser().parse_args(argv)
    if getattr(args, "config", None):
        values = json.loads(Path(args.config).read_text())
        values = {k.replace("-", "_"): v for k, v in values.items()}
        args = build_parser(values).parse_args(argv)
    return args


def cmd_generate(args):
    config = PhantomConfig(height=args.height, width=args.width,
                           speckle_strength=args.speckle, seed=args.seed)
    scans = generate_dataset(args.patients, args.scans_per_patient, config)
    save_dataset(scans, args.out, config)
    print(f"scans,{len(scans)}")
    print(f"patients,{args.patients}")
    return 0


def cmd_preprocess(args):
    scans = load_dataset(args.data)
    plan = [s.strip() for s in _split_plan(args.augment)]
    pairs, stats = build_patch_dataset(scans, plan, patch=args.patch, overlap=args.overlap,
                                       seed=args.seed, sigma=args.sigma, amount=args.amount)
    split = split_dataset(pairs, ratio=args.ratio, policy=args.split, seed=args.seed)
    save_patch_store(pairs, split, args.out, stats)
    sys.stdout.write(format_stats(stats))
    print(f"train: {len(split.train)}")
    print(f"test: {len(split.test)}")
    return 0


def _split_plan(text):
    """Split on commas that are not inside parentheses."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
            continue
        depth += (ch == "(") - (ch == ")")
        cur += ch
    parts.append(cur)
    return [p for p in parts if p.strip()]


def cmd_train(args):
    from .trainer import train

    train_pairs = _load_split(args.store, "train")
    test_pairs = _load_split(args.store, "test")
    gen = GeneratorConfig(arch=args.arch, upsampler=args.upsampler, head=args.head,
                          base_width=args.base_width, depth=args.depth, seed=args.seed,
                          init=args.init)
    disc = DiscriminatorConfig(in_channels=gen.in_channels + gen.out_channels,
                               base_width=args.disc_width, seed=args.seed + 1, init=args.init)
    config = _train_config(args, alpha=None if args.dice else 0.0)
    result = train(train_pairs, test_pairs, ModelConfig(gen, disc), config,
                   out_dir=args.out, resume=args.resume)
    sys.stdout.write(result.history.to_csv())
    return 0


def cmd_evaluate(args):
    pairs = _load_split(args.store, args.split)
    if args.checkpoint:
        report = evaluate_checkpoint(args.checkpoint, pairs)
        name = Path(args.checkpoint).stem
    else:
        pred_dir = Path(args.predictions)
        missing = [p.pair_id for p in pairs if not (pred_dir / f"{p.pair_id}.png").exists()]
        if missing:
            log.error("%d predictions missing, e.g. %s", len(missing), missing[0])
            return 1
        preds = np.stack([np.asarray(Image.open(pred_dir / f"{p.pair_id}.png"), dtype=np.uint8)
                          for p in pairs])
        truth = np.stack([p.target_label_hr for p in pairs])
        report = evaluate_predictions(preds, truth)
        name = pred_dir.name
    print(METRIC_HEADER)
    print(report.row(name))
    return 0


def cmd_grid(args):
    if args.smoke:
        train_pairs, test_pairs = smoke_dataset(args.grid_seed)
        spec = smoke_spec(grid_seed=args.grid_seed)
    elif args.desk:
        train_pairs, test_pairs = desk_dataset()
        spec = desk_spec(grid_seed=args.grid_seed)
    else:
        train_pairs = _load_split(args.store, "train")
        test_pairs = _load_split(args.store, "test")
        spec = GridSpec(train=_train_config(args), gen_width=args.base_width,
                        gen_depth=args.depth, disc_width=args.disc_width, init=args.init,
                        srcnn_epochs=args.srcnn_epochs, grid_seed=args.grid_seed,
                        dataset=str(Path(args.store).resolve()))
    if args.rows:
        ids = [r.strip() for r in args.rows.split(",") if r.strip()]
        try:
            rows = tuple(find_row(i, DEFAULT_ROWS) for i in ids)
        except KeyError as exc:
            log.error("%s", exc.args[0])
            return 2
        spec = dataclasses.replace(spec, rows=rows)
    results, samples, manifest = run_grid(spec, train_pairs, test_pairs, out_dir=args.out)
    render_report(results, samples, args.out, manifest)
    sys.stdout.write(summary_text(results))
    return 0 if all(r.ok for r in results) else 1


def cmd_render(args):
    written = render_stored(args.run, args.out)
    for path in written:
        print(path)
    return 0


COMMANDS = {
    "generate-data": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "render": cmd_render,
}


def cli(argv=None):
    args = parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
