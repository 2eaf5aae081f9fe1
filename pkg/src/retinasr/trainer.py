"""Adversarial training: one discriminator step then one generator step per batch."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .classes import N_CLASSES, render_labels_rgb
from .discriminator import DiscriminatorConfig, build_patchgan, discriminate
from .generators import GeneratorConfig, build_generator
from .objectives import (LossWeights, MetricReport, adversarial_loss_d, decode_rgb_to_labels,
                         miou, total_generator_loss)
from .pipeline import downsample_labels4
from .srbaseline import bicubic_upsample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    adam_betas: tuple = (0.5, 0.999)
    epochs: int = 100
    batch_size: int = 16
    weights: LossWeights = LossWeights()
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["adam_betas"] = tuple(d.get("adam_betas", (0.5, 0.999)))
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig | None = None

    def __post_init__(self):
        if self.discriminator is None:
            g = self.generator
            object.__setattr__(self, "discriminator", DiscriminatorConfig(
                in_channels=g.in_channels + g.out_channels, seed=g.seed + 1, init=g.init))


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    d_loss: float
    g_total: float
    g_adv: float
    g_l1: float
    g_dice: float
    dice: float
    miou: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    FIELDS = tuple(f.name for f in dataclasses.fields(EpochRecord))

    def __len__(self):
        return len(self.records)

    def to_csv(self):
        lines = [",".join(self.FIELDS)]
        for r in self.records:
            lines.append(",".join(
                str(getattr(r, k)) if k == "epoch" else f"{getattr(r, k):.8g}"
                for k in self.FIELDS))
        return "\n".join(lines) + "\n"

    def to_list(self):
        return [dataclasses.asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows):
        return cls([EpochRecord(**r) for r in rows])


@dataclass
class TrainResult:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    history: TrainHistory
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None


# -- data ----------------------------------------------------------------------

@dataclass
class PairTensors:
    """Stacked tensors for one split at the generator's output resolution."""

    ids: list
    inputs: torch.Tensor
    condition: torch.Tensor
    target: torch.Tensor
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)

    def batch(self, idx):
        return {
            "ids": [self.ids[i] for i in idx],
            "inputs": self.inputs[idx],
            "condition": self.condition[idx],
            "target": self.target[idx],
        }


def make_tensors(pairs, gen_config: GeneratorConfig):
    if not pairs:
        raise ValueError("empty split")
    inputs = torch.from_numpy(np.stack([p.input_lr for p in pairs]).astype(np.float32))[:, None]
    labels = np.stack([p.target_label_hr for p in pairs])
    if gen_config.scale == 1:
        labels = downsample_labels4(labels)
        condition = inputs
    else:
        condition = bicubic_upsample(inputs.double(), gen_config.scale).float()
    if gen_config.head == "rgb":
        target = render_labels_rgb(labels).transpose(0, 3, 1, 2)
    else:
        target = (labels[:, None] == np.arange(N_CLASSES)[None, :, None, None])
    target = torch.from_numpy(np.ascontiguousarray(target, dtype=np.float32))
    return PairTensors([p.pair_id for p in pairs], inputs, condition, target, labels)


# -- steps -----------------------------------------------------------------------

def _check_finite(losses, batch):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLossError(
            f"non-finite loss terms {losses} on batch {batch['ids'][:8]}")


def train_step(batch, g, d, opt_g, opt_d, config: TrainConfig):
    """One discriminator update then one generator update; returns float losses."""
    x, cond, y = batch["inputs"], batch["condition"], batch["target"]
    fake = g(x)

    for p in d.parameters():
        p.requires_grad_(True)
    opt_d.zero_grad(set_to_none=True)
    loss_d = adversarial_loss_d(discriminate(d, cond, y), discriminate(d, cond, fake.detach()))
    loss_d.backward()
    opt_d.step()

    for p in d.parameters():
        p.requires_grad_(False)
    opt_g.zero_grad(set_to_none=True)
    total, terms = total_generator_loss(discriminate(d, cond, fake), fake, y, config.weights)
    total.backward()
    opt_g.step()
    for p in d.parameters():
        p.requires_grad_(True)

    losses = {"d_loss": loss_d.item(), "g_total": total.item(),
              **{f"g_{k}": v.item() for k, v in terms.items()}}
    _check_finite(losses, batch)
    return losses


def make_optimizers(g, d, config: TrainConfig):
    opt_g = torch.optim.Adam(g.parameters(), lr=config.lr_g, betas=config.adam_betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=config.lr_d, betas=config.adam_betas)
    return opt_g, opt_d


# -- evaluation ------------------------------------------------------------------

@torch.no_grad()
def predict_labels(g, inputs, batch_size=16):
    g.eval()
    out = []
    for start in range(0, len(inputs), batch_size):
        y = g(inputs[start:start + batch_size])
        if y.shape[1] == 3:
            out.append(decode_rgb_to_labels(y.permute(0, 2, 3, 1)))
        else:
            out.append(y.argmax(dim=1).to(torch.uint8))
    return torch.cat(out).numpy()


def evaluate_predictions(pred_labels, gt_labels):
    """Per-image Dice/mIOU, then the mean over images."""
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if len(gt_labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"prediction {pred_labels.shape} and ground truth {gt_labels.shape} differ")
    reports = [miou(p, t) for p, t in zip(pred_labels, gt_labels)]
    return MetricReport(
        dice=float(np.mean([r.dice for r in reports])),
        miou=float(np.mean([r.miou for r in reports])),
        per_class_iou=tuple(float(v) for v in np.mean([r.per_class_iou for r in reports], axis=0)),
    )


def evaluate(g, split, batch_size=16):
    """Metrics of generator ``g`` on a list of PatchPairs or PairTensors."""
    if not isinstance(split, PairTensors):
        if not split:
            raise ValueError("cannot evaluate an empty split")
        split = make_tensors(split, g.config)
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    return evaluate_predictions(predict_labels(g, split.inputs, batch_size), split.labels)


def evaluate_checkpoint(path, pairs, batch_size=16):
    models, _ = load_checkpoint(path)
    if "generator" not in models:
        raise ValueError(f"{path} holds no generator")
    return evaluate(models["generator"], pairs, batch_size)


# -- loop ----------------------------------------------------------------------------

def set_deterministic(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _save(path, g, d, opt_g, opt_d, model_config, train_config, history, epoch):
    return save_checkpoint(path, {"generator": g, "discriminator": d}, extra={
        "epoch": epoch,
        "train_config": train_config.to_dict(),
        "history": history.to_list(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
    })


def train(train_pairs, test_pairs, model_config: ModelConfig, train_config: TrainConfig,
          out_dir=None, resume=None):
    """Run the adversarial loop; evaluates on ``test_pairs`` after every epoch.

    With ``out_dir`` set, ``final.pt`` and ``best.pt`` (by test Dice) are
    written there together with ``history.csv``.
    """
    if train_config.deterministic:
        set_deterministic(train_config.seed)
    train_t = make_tensors(train_pairs, model_config.generator)
    test_t = make_tensors(test_pairs, model_config.generator)

    history = TrainHistory()
    start_epoch = 0
    if resume is not None:
        models, extra = load_checkpoint(resume)
        g, d = models["generator"], models["discriminator"]
        opt_g, opt_d = make_optimizers(g, d, train_config)
        opt_g.load_state_dict(extra["opt_g"])
        opt_d.load_state_dict(extra["opt_d"])
        history = TrainHistory.from_list(extra["history"])
        start_epoch = extra["epoch"]
    else:
        g = build_generator(model_config.generator)
        d = build_patchgan(model_config.discriminator)
        opt_g, opt_d = make_optimizers(g, d, train_config)

    out_dir = Path(out_dir) if out_dir is not None else None
    best_dice = max((r.dice for r in history.records), default=-1.0)
    best_path = final_path = None
    n = len(train_t)
    for epoch in range(start_epoch, train_config.epochs):
        t0 = time.perf_counter()
        g.train()
        d.train()
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        sums, count = {}, 0
        for start in range(0, n, train_config.batch_size):
            idx = torch.from_numpy(order[start:start + train_config.batch_size])
            losses = train_step(train_t.batch(idx), g, d, opt_g, opt_d, train_config)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        report = evaluate(g, test_t)
        record = EpochRecord(
            epoch=epoch + 1,
            d_loss=sums["d_loss"] / count,
            g_total=sums["g_total"] / count,
            g_adv=sums["g_adv"] / count,
            g_l1=sums["g_l1"] / count,
            g_dice=sums["g_dice"] / count,
            dice=report.dice,
            miou=report.miou,
            seconds=time.perf_counter() - t0,
        )
        history.records.append(record)
        log.info("epoch %d/%d d=%.4f g=%.4f dice=%.4f miou=%.4f (%.1fs)", record.epoch,
                 train_config.epochs, record.d_loss, record.g_total, record.dice,
                 record.miou, record.seconds)
        if out_dir is not None:
            final_path = _save(out_dir / "final.pt", g, d, opt_g, opt_d, model_config,
                               train_config, history, epoch + 1)
            if record.dice > best_dice:
                best_dice = record.dice
                best_path = _save(out_dir / "best.pt", g, d, opt_g, opt_d, model_config,
                                  train_config, history, epoch + 1)
            (out_dir / "history.csv").write_text(history.to_csv())
    g.eval()
    d.eval()
    return TrainResult(g, d, history, final_path, best_path)


def history_to_json(history: TrainHistory):
    return json.dumps(history.to_list(), indent=2)
