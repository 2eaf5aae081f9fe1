"""Generator/discriminator losses and hard segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .classes import LABEL_COLORS, N_CLASSES

SCORE_EPS = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 100.0
    alpha_dice: float = 1.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.alpha_dice < 0:
            raise ValueError("loss weights must be >= 0")


def _log(x):
    return torch.log(torch.clamp(x, SCORE_EPS, 1.0))


def adversarial_loss_g(scores):
    """Non-saturating generator loss ``-mean(log D(G(x)))``."""
    scores = torch.as_tensor(scores)
    return -_log(scores).mean()


def adversarial_loss_d(scores_real, scores_fake):
    """``-mean(log D(y)) - mean(log(1 - D(G(x))))``."""
    scores_real = torch.as_tensor(scores_real)
    scores_fake = torch.as_tensor(scores_fake)
    return -_log(scores_real).mean() - _log(1.0 - scores_fake).mean()


def l1_loss(generated, target):
    generated = torch.as_tensor(generated)
    target = torch.as_tensor(target, dtype=generated.dtype)
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


def dice_loss(generated, target, eps=DICE_EPS):
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)``.

    Inputs are (H, W), (C, H, W) or (N, C, H, W); sums run over the spatial
    axes of each channel and the result is averaged over samples and channels.
    """
    generated = torch.as_tensor(generated)
    target = torch.as_tensor(target, dtype=generated.dtype)
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(target.shape)}")
    if generated.dim() == 2:
        generated, target = generated[None], target[None]
    dims = (-2, -1)
    inter = (generated * target).sum(dim=dims)
    denom = (generated * generated).sum(dim=dims) + (target * target).sum(dim=dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def total_generator_loss(scores, generated, target, weights=LossWeights()):
    """Returns ``(total, terms)`` where terms holds the unweighted parts."""
    adv = adversarial_loss_g(scores)
    l1 = l1_loss(generated, target)
    terms = {"adv": adv, "l1": l1}
    total = adv + weights.lambda_l1 * l1
    if weights.alpha_dice > 0:
        dice = dice_loss(generated, target)
        total = total + weights.alpha_dice * dice
    else:
        with torch.no_grad():
            dice = dice_loss(generated, target)
    terms["dice"] = dice
    return total, terms


# -- hard metrics -------------------------------------------------------------

@dataclass
class MetricReport:
    dice: float
    miou: float
    per_class_iou: tuple

    def row(self, config_id):
        iou = ",".join(f"{v:.6f}" for v in self.per_class_iou)
        return f"{config_id},{self.dice:.6f},{self.miou:.6f},{iou}"


def confusion_matrix(pred, gt, n_classes=N_CLASSES):
    """``cm[g, p]`` counts pixels of true class g predicted as p."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    return np.bincount(gt * n_classes + pred, minlength=n_classes**2).reshape(n_classes, n_classes)


def _check_maps(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_coefficient(pred_labels, gt_labels, n_classes=N_CLASSES):
    """Hard Dice averaged over the classes present in the ground truth."""
    pred, gt = _check_maps(pred_labels, gt_labels)
    cm = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(cm).astype(np.float64)
    size_gt = cm.sum(axis=1)
    size_pred = cm.sum(axis=0)
    present = size_gt > 0
    if not present.any():
        raise ValueError("ground truth is empty")
    return float(np.mean(2 * tp[present] / (size_gt[present] + size_pred[present])))


def miou(pred_labels, gt_labels, n_classes=N_CLASSES):
    """Per-class IoU and its mean over classes present in the ground truth.

    Classes absent from the ground truth report IoU 0 when predicted and 1
    when also absent from the prediction; neither enters the mean.
    """
    pred, gt = _check_maps(pred_labels, gt_labels)
    cm = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(cm).astype(np.float64)
    size_gt = cm.sum(axis=1)
    union = size_gt + cm.sum(axis=0) - tp
    present = size_gt > 0
    if not present.any():
        raise ValueError("ground truth is empty")
    iou = np.where(union > 0, tp / np.maximum(union, 1), 1.0)
    dice = np.mean(2 * tp[present] / (size_gt[present] + cm.sum(axis=0)[present]))
    return MetricReport(dice=float(dice), miou=float(iou[present].mean()),
                        per_class_iou=tuple(float(v) for v in iou))


def decode_rgb_to_labels(rgb_image, palette=LABEL_COLORS):
    """Nearest palette color per pixel; ties go to the lowest class index.

    ``rgb_image`` is channel-last (..., 3). Works on numpy arrays and tensors.
    """
    palette_np = np.asarray(palette, dtype=np.float64)
    if palette_np.ndim != 2 or palette_np.shape[1] != 3:
        raise ValueError("palette must be (K, 3)")
    if len({tuple(c) for c in palette_np.tolist()}) != len(palette_np):
        raise ValueError("palette colors must be distinct")
    if isinstance(rgb_image, torch.Tensor):
        pal = torch.as_tensor(palette_np, dtype=rgb_image.dtype, device=rgb_image.device)
        d = ((rgb_image[..., None, :] - pal) ** 2).sum(-1)
        # torch.argmin does not promise the first index on ties
        best = d.min(dim=-1, keepdim=True).values
        idx = torch.arange(len(pal), device=d.device).expand_as(d)
        masked = torch.where(d == best, idx, torch.full_like(idx, len(pal)))
        return masked.min(dim=-1).values.to(torch.uint8)
    rgb = np.asarray(rgb_image, dtype=np.float64)
    d = ((rgb[..., None, :] - palette_np) ** 2).sum(-1)
    return d.argmin(axis=-1).astype(np.uint8)
