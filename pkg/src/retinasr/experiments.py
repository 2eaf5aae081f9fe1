"""Ablation grid over pipelines, generators, upsamplers and the Dice term.

Sixteen rows by default: eight low-resolution rows (segment at 56, with or
without an SR-CNN afterwards) and eight joint rows (segment and upscale in
one generator). Every row trains from scratch on its own seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .discriminator import DiscriminatorConfig
from .generators import GeneratorConfig
from .phantom import PhantomConfig, generate_dataset
from .pipeline import build_patch_dataset, select, split_dataset
from .srbaseline import SrcnnConfig, disjoint_pipeline, srcnn_pairs, train_srcnn
from .trainer import (ModelConfig, TrainConfig, evaluate, evaluate_predictions, make_tensors,
                      predict_labels, train)

log = logging.getLogger(__name__)

PIPELINES = ("no_sr", "disjoint_srcnn", "joint")
RESULTS_HEADER = ("table", "row_id", "loss", "model", "pipeline", "arch", "upsampler",
                  "use_dice", "seed", "dice", "miou", "seconds", "best_in_table",
                  "paper_dice", "paper_miou", "status", "checkpoint")
RELAYNET_REFERENCE = (0.856, 0.751)

_ARCH_NAMES = {"unet": "U-Net", "resnet": "ResNet"}
_UP_NAMES = {"transposed": "Transposed_Conv", "subpixel": "Sub-pixel_Conv"}


@dataclass(frozen=True)
class GridRow:
    pipeline: str
    arch: str
    upsampler: str = "none"
    use_dice: bool = True
    paper: tuple | None = None

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")
        if (self.pipeline == "joint") == (self.upsampler == "none"):
            raise ValueError("joint rows need an upsampler, the others must not have one")

    @property
    def table(self):
        return 2 if self.pipeline == "joint" else 1

    @property
    def row_id(self):
        parts = [self.pipeline, self.arch]
        if self.pipeline == "joint":
            parts.append(self.upsampler)
        parts.append("dice" if self.use_dice else "nodice")
        return "-".join(parts)

    @property
    def loss_label(self):
        return "Added Dice" if self.use_dice else "No Dice"

    @property
    def model_label(self):
        arch = _ARCH_NAMES[self.arch]
        if self.pipeline == "joint":
            return f"GAN({arch} + {_UP_NAMES[self.upsampler]})"
        if self.pipeline == "disjoint_srcnn":
            return f"GAN({arch}) then SR-CNN"
        return f"GAN({arch})"


def _rows():
    t1 = {  # (dice, arch, pipeline) -> reported (Dice, mIOU)
        (False, "unet", "no_sr"): (0.816, 0.685),
        (False, "unet", "disjoint_srcnn"): (0.814, 0.681),
        (False, "resnet", "no_sr"): (0.825, 0.690),
        (False, "resnet", "disjoint_srcnn"): (0.831, 0.692),
        (True, "unet", "no_sr"): (0.822, 0.710),
        (True, "unet", "disjoint_srcnn"): (0.825, 0.709),
        (True, "resnet", "no_sr"): (0.833, 0.718),
        (True, "resnet", "disjoint_srcnn"): (0.838, 0.721),
    }
    t2 = {
        (False, "unet", "transposed"): (0.834, 0.719),
        (False, "unet", "subpixel"): (0.831, 0.718),
        (False, "resnet", "transposed"): (0.840, 0.729),
        (False, "resnet", "subpixel"): (0.855, 0.743),
        (True, "unet", "transposed"): (0.839, 0.722),
        (True, "unet", "subpixel"): (0.841, 0.734),
        (True, "resnet", "transposed"): (0.853, 0.745),
        (True, "resnet", "subpixel"): (0.867, 0.765),
    }
    rows = [GridRow(p, a, "none", d, ref) for (d, a, p), ref in t1.items()]
    rows += [GridRow("joint", a, u, d, ref) for (d, a, u), ref in t2.items()]
    return tuple(rows)


DEFAULT_ROWS = _rows()


def find_row(row_id, rows=DEFAULT_ROWS):
    for row in rows:
        if row.row_id == row_id:
            return row
    raise KeyError(f"no grid row {row_id!r}")


def row_seed(grid_seed, row_id):
    """63-bit seed from a hash of (grid seed, row id); independent of row order."""
    digest = hashlib.sha256(f"{grid_seed}:{row_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class GridSpec:
    rows: tuple = DEFAULT_ROWS
    train: TrainConfig = TrainConfig()
    gen_width: int = 64
    gen_depth: int | None = None
    disc_width: int = 64
    init: str = "he"
    srcnn: SrcnnConfig = SrcnnConfig()
    srcnn_epochs: int = 30
    grid_seed: int = 0
    n_samples: int = 4
    dataset: str = ""

    def model_config(self, row: GridRow, seed):
        gen = GeneratorConfig(arch=row.arch, upsampler=row.upsampler, base_width=self.gen_width,
                              depth=self.gen_depth, seed=seed % 2**63, init=self.init)
        disc = DiscriminatorConfig(in_channels=gen.in_channels + gen.out_channels,
                                   base_width=self.disc_width, seed=(seed + 1) % 2**63,
                                   init=self.init)
        return ModelConfig(gen, disc)

    def train_config(self, row: GridRow, seed):
        alpha = self.train.weights.alpha_dice if row.use_dice else 0.0
        weights = dataclasses.replace(self.train.weights, alpha_dice=alpha)
        return dataclasses.replace(self.train, seed=seed, weights=weights)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["rows"] = [r.row_id for r in self.rows]
        return d


@dataclass
class ExperimentResult:
    row_id: str
    table: int
    loss: str
    model: str
    pipeline: str
    arch: str
    upsampler: str
    use_dice: bool
    seed: int
    dice: float | None = None
    miou: float | None = None
    seconds: float = 0.0
    checkpoint: str = ""
    status: str = "ok"
    paper_dice: float | None = None
    paper_miou: float | None = None
    curve: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- presets -------------------------------------------------------------------------

def smoke_spec(**overrides):
    """Tiny widths and a single epoch: exercises every row in about a minute."""
    base = dict(
        train=TrainConfig(lr_g=1e-3, lr_d=1e-3, epochs=1, batch_size=4),
        gen_width=8, gen_depth=1, disc_width=4,
        srcnn=SrcnnConfig(widths=(8, 4)), srcnn_epochs=1, n_samples=2,
        dataset="smoke phantom: 4 patients x 1 scan, 224x280",
    )
    base.update(overrides)
    return GridSpec(**base)


def smoke_dataset(seed=0):
    scans = generate_dataset(4, 1, PhantomConfig(height=224, width=280, seed=seed))
    pairs, _ = build_patch_dataset(scans)
    split = split_dataset(pairs, ratio=0.75, seed=seed)
    return select(pairs, split.train), select(pairs, split.test)


def desk_spec(**overrides):
    """Reduced widths and a raised learning rate that fit a CPU budget."""
    base = dict(
        train=TrainConfig(lr_g=1e-3, lr_d=1e-3, epochs=30, batch_size=8),
        gen_width=32, gen_depth=6, disc_width=16,
        srcnn_epochs=10,
        dataset="desk phantom: 10 patients x 1 scan, 392x448, 200 pairs",
    )
    base.update(overrides)
    return GridSpec(**base)


def desk_dataset(seed=7):
    """200 PatchPairs from 10 patients, split 8/2 by patient (160/40)."""
    scans = generate_dataset(10, 1, PhantomConfig(height=392, width=448, seed=seed))
    pairs, _ = build_patch_dataset(scans)
    split = split_dataset(pairs, ratio=0.8, seed=0)
    return select(pairs, split.train), select(pairs, split.test)


# -- running -------------------------------------------------------------------------

def _upsample_nearest(labels, factor=4):
    return np.repeat(np.repeat(labels, factor, axis=-2), factor, axis=-1)


def fit_srcnn(spec: GridSpec, train_pairs, out_dir=None):
    """Train the shared SR-CNN once per dataset."""
    config = dataclasses.replace(spec.srcnn, seed=row_seed(spec.grid_seed, "srcnn"))
    inputs, targets = srcnn_pairs(train_pairs)
    with torch.random.fork_rng(devices=[]):
        model = train_srcnn(inputs, targets, config, epochs=spec.srcnn_epochs)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "srcnn.pt", {"srcnn": model})
    return model


def run_row(row: GridRow, spec: GridSpec, train_pairs, test_pairs, srcnn=None, out_dir=None):
    """Train and evaluate one row; returns ``(result, sample predictions)``."""
    seed = row_seed(spec.grid_seed, row.row_id)
    result = ExperimentResult(
        row_id=row.row_id, table=row.table, loss=row.loss_label, model=row.model_label,
        pipeline=row.pipeline, arch=row.arch, upsampler=row.upsampler, use_dice=row.use_dice,
        seed=seed, paper_dice=row.paper[0] if row.paper else None,
        paper_miou=row.paper[1] if row.paper else None,
    )
    row_dir = Path(out_dir) / "rows" / row.row_id if out_dir is not None else None
    t0 = time.perf_counter()
    trained = train(train_pairs, test_pairs, spec.model_config(row, seed),
                    spec.train_config(row, seed), out_dir=row_dir)
    g = trained.generator
    tensors = make_tensors(test_pairs, g.config)
    if row.pipeline == "disjoint_srcnn":
        if srcnn is None:
            raise ValueError("disjoint rows need a trained SR-CNN")
        labels = np.concatenate([
            disjoint_pipeline(g, srcnn, tensors.inputs[i:i + 16]).numpy()
            for i in range(0, len(tensors), 16)])
        truth = np.stack([p.target_label_hr for p in test_pairs])
        report = evaluate_predictions(labels, truth)
        shown = labels[:spec.n_samples]
    else:
        report = evaluate(g, tensors)
        shown = predict_labels(g, tensors.inputs[:spec.n_samples])
        if row.pipeline == "no_sr":
            shown = _upsample_nearest(shown)
    result.dice, result.miou = report.dice, report.miou
    result.seconds = time.perf_counter() - t0
    result.curve = [{"epoch": r.epoch, "dice": r.dice, "miou": r.miou, "g_total": r.g_total}
                    for r in trained.history.records]
    if trained.final_checkpoint is not None:
        result.checkpoint = Path("rows", row.row_id, "final.pt").as_posix()
    return result, shown.astype(np.uint8)


def run_grid(spec: GridSpec, train_pairs, test_pairs, out_dir=None):
    """Run every row of ``spec``; a failing row is recorded and the rest continue.

    Returns ``(results, samples, manifest)``; with ``out_dir`` the raw results
    and samples are stored there so the report can be re-rendered later.
    """
    if not train_pairs or not test_pairs:
        raise ValueError("run_grid needs non-empty train and test splits")
    srcnn = None
    if any(r.pipeline == "disjoint_srcnn" for r in spec.rows):
        srcnn = fit_srcnn(spec, train_pairs, out_dir)
    shown_pairs = test_pairs[:spec.n_samples]
    samples = {
        "ids": [p.pair_id for p in shown_pairs],
        "inputs": np.stack([p.input_lr for p in shown_pairs]).astype(np.float32),
        "truth": np.stack([p.target_label_hr for p in shown_pairs]).astype(np.uint8),
        "predictions": {},
    }
    results = []
    for row in spec.rows:
        log.info("grid row %s", row.row_id)
        try:
            result, shown = run_row(row, spec, train_pairs, test_pairs, srcnn, out_dir)
            samples["predictions"][row.row_id] = shown
        except Exception as exc:  # keep the grid going
            log.exception("row %s failed", row.row_id)
            result = ExperimentResult(
                row_id=row.row_id, table=row.table, loss=row.loss_label,
                model=row.model_label, pipeline=row.pipeline, arch=row.arch,
                upsampler=row.upsampler, use_dice=row.use_dice,
                seed=row_seed(spec.grid_seed, row.row_id),
                status=f"failed: {type(exc).__name__}: {exc}",
                paper_dice=row.paper[0] if row.paper else None,
                paper_miou=row.paper[1] if row.paper else None,
            )
        results.append(result)
    manifest = build_manifest(spec, results, train_pairs, test_pairs)
    if out_dir is not None:
        save_results(out_dir, results, samples, manifest)
    return results, samples, manifest


def build_manifest(spec: GridSpec, results, train_pairs, test_pairs):
    rows = []
    for r in results:
        row = find_row(r.row_id, spec.rows)
        rows.append({
            "row_id": r.row_id,
            "seed": r.seed,
            "model": dataclasses.asdict(spec.model_config(row, r.seed)),
            "train": spec.train_config(row, r.seed).to_dict(),
        })
    return {
        "grid": spec.to_dict(),
        "rows": rows,
        "srcnn_seed": row_seed(spec.grid_seed, "srcnn"),
        "data": {"dataset": spec.dataset, "n_train": len(train_pairs),
                 "n_test": len(test_pairs),
                 "test_ids": [p.pair_id for p in test_pairs]},
        "reference": {"relaynet": list(RELAYNET_REFERENCE)},
        "environment": {"python": platform.python_version(), "torch": torch.__version__,
                        "numpy": np.__version__},
    }


def save_results(out_dir, results, samples, manifest):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"results": [r.to_dict() for r in results], "manifest": manifest}
    (out_dir / "results.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    arrays = {"inputs": samples["inputs"], "truth": samples["truth"],
              "ids": np.array(samples["ids"])}
    for row_id, pred in samples["predictions"].items():
        arrays[f"pred/{row_id}"] = pred
    np.savez_compressed(out_dir / "samples.npz", **arrays)


def load_results(run_dir):
    run_dir = Path(run_dir)
    payload = json.loads((run_dir / "results.json").read_text())
    results = [ExperimentResult.from_dict(d) for d in payload["results"]]
    with np.load(run_dir / "samples.npz") as z:
        samples = {
            "ids": [str(s) for s in z["ids"]],
            "inputs": z["inputs"],
            "truth": z["truth"],
            "predictions": {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("pred/")},
        }
    return results, samples, payload["manifest"]


# -- reporting -----------------------------------------------------------------------

def best_rows(results):
    """Row id with the highest Dice in each table, among rows that finished."""
    best = {}
    for r in results:
        if r.ok and r.dice is not None and (r.table not in best or r.dice > best[r.table].dice):
            best[r.table] = r
    return {t: r.row_id for t, r in best.items()}


def _fmt(v, digits=6):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.{digits}f}"


def results_table(results, root=None):
    """Comma-delimited table with a fixed header, one line per row."""
    best = set(best_rows(results).values())
    lines = [",".join(RESULTS_HEADER)]
    for r in results:
        status = r.status
        if r.ok and root is not None and (not r.checkpoint
                                          or not (Path(root) / r.checkpoint).exists()):
            status = "missing checkpoint"
        fields = [str(r.table), r.row_id, r.loss, r.model, r.pipeline, r.arch, r.upsampler,
                  str(int(r.use_dice)), str(r.seed), _fmt(r.dice), _fmt(r.miou),
                  _fmt(r.seconds, 1), str(int(r.row_id in best)), _fmt(r.paper_dice, 3),
                  _fmt(r.paper_miou, 3), status.replace(",", ";"), r.checkpoint]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def summary_text(results):
    """Human-readable table with the reported reference values alongside."""
    best = set(best_rows(results).values())
    lines = [f"{'table':<5} {'loss':<10} {'model':<36} {'dice':>7} {'miou':>7}"
             f" {'ref dice':>8} {'ref miou':>8}"]
    for r in results:
        mark = " *" if r.row_id in best else ""
        lines.append(f"{r.table:<5} {r.loss:<10} {r.model:<36} {_fmt(r.dice, 4) or 'fail':>7}"
                     f" {_fmt(r.miou, 4) or 'fail':>7} {_fmt(r.paper_dice, 3):>8}"
                     f" {_fmt(r.paper_miou, 3):>8}{mark}")
    lines.append(f"{'':<5} {'Added Dice':<10} {'ReLayNet (reference only)':<36} {'':>7} {'':>7}"
                 f" {RELAYNET_REFERENCE[0]:>8.3f} {RELAYNET_REFERENCE[1]:>8.3f}")
    return "\n".join(lines) + "\n"


def render_report(results, samples, out_dir, manifest=None, root=None):
    """Write results.csv, summary.txt, panels/, figures/ and manifest.json.

    Rendering depends only on its inputs, so re-rendering stored results
    gives byte-identical files.
    """
    from . import figures

    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = Path(root) if root is not None else out_dir
    written = []

    path = out_dir / "results.csv"
    path.write_text(results_table(results, root))
    written.append(path)
    path = out_dir / "summary.txt"
    path.write_text(summary_text(results))
    written.append(path)

    panel_dir = out_dir / "panels"
    panel_dir.mkdir(exist_ok=True)
    preds = samples.get("predictions", {})
    for k, sample_id in enumerate(samples["ids"]):
        columns = [preds[r.row_id][k] if r.row_id in preds else None for r in results]
        panel = figures.make_panel(samples["inputs"][k], samples["truth"][k], columns)
        path = panel_dir / f"{k:02d}_{sample_id}.png"
        figures.save_png(panel, path)
        written.append(path)

    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    written.append(figures.plot_metrics(results, fig_dir / "metrics.png"))
    written.append(figures.plot_curves(results, fig_dir / "training_curves.png"))

    if manifest is not None:
        manifest = dict(manifest)
        manifest["panel_columns"] = ["input", "ground truth"] + [r.row_id for r in results]
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        written.append(path)
    return written


def render_stored(run_dir, out_dir=None):
    """Re-render the report of a finished grid from its stored results."""
    results, samples, manifest = load_results(run_dir)
    return render_report(results, samples, out_dir or run_dir, manifest, root=run_dir)


def panel_width(n_models, patch=224):
    return (2 + n_models) * patch

