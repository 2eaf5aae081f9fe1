import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from retinasr.classes import LABEL_COLORS
from retinasr.objectives import (LossWeights, adversarial_loss_d, adversarial_loss_g,
                                 decode_rgb_to_labels, dice_coefficient, dice_loss, l1_loss,
                                 miou, total_generator_loss)


def brute_force_metrics(pred, gt, n_classes=8):
    """Pixel-enumeration confusion matrix, then Dice and IoU per present class."""
    cm = [[0] * n_classes for _ in range(n_classes)]
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        cm[g][p] += 1
    dices, ious = [], []
    for k in range(n_classes):
        tp = cm[k][k]
        gt_k = sum(cm[k])
        pred_k = sum(cm[j][k] for j in range(n_classes))
        if gt_k == 0:
            continue
        dices.append(2 * tp / (gt_k + pred_k))
        ious.append(tp / (gt_k + pred_k - tp))
    return sum(dices) / len(dices), sum(ious) / len(ious)


def finite_difference_grad(f, x, h=1e-6):
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        grad.ravel()[i] = (up - down) / (2 * h)
    return grad


# -- adversarial ---------------------------------------------------------

def test_adv_g_spot_values():
    assert adversarial_loss_g(torch.ones(5)).item() == pytest.approx(0.0, abs=1e-12)
    assert adversarial_loss_g(torch.full((7,), 0.5)).item() == pytest.approx(math.log(2), abs=1e-6)
    mixed = adversarial_loss_g(torch.tensor([0.25, 0.75], dtype=torch.float64)).item()
    assert mixed == pytest.approx(-(math.log(0.25) + math.log(0.75)) / 2, abs=1e-12)


def test_adv_d_spot_values():
    assert adversarial_loss_d(torch.ones(3), torch.zeros(3)).item() == pytest.approx(0, abs=1e-6)
    half = torch.full((4,), 0.5)
    assert adversarial_loss_d(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    val = adversarial_loss_d(torch.tensor([0.9], dtype=torch.float64),
                             torch.tensor([0.1], dtype=torch.float64)).item()
    assert val == pytest.approx(-2 * math.log(0.9), abs=1e-12)


def test_adv_losses_finite_at_zero():
    assert math.isfinite(adversarial_loss_g(torch.zeros(3)).item())
    assert math.isfinite(adversarial_loss_d(torch.zeros(3), torch.ones(3)).item())


# -- l1 ------------------------------------------------------------------

def test_l1_values():
    t = torch.rand(3, 4)
    assert l1_loss(t, t).item() == 0
    assert l1_loss(torch.zeros(5), torch.ones(5)).item() == 1
    assert l1_loss(torch.tensor([0.2, 0.8]), torch.tensor([0.5, 0.5])).item() == pytest.approx(0.3)


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(3), torch.zeros(4))


# -- dice loss -----------------------------------------------------------

def test_dice_loss_identical_binary():
    g = (torch.rand(3, 8, 8) > 0.5).double()
    assert dice_loss(g, g).item() == pytest.approx(0.0, abs=1e-9)


def test_dice_loss_disjoint():
    a = torch.zeros(8, 8, dtype=torch.float64)
    a[:4] = 1
    assert dice_loss(a, 1 - a).item() == pytest.approx(1.0, abs=1e-6)


def test_dice_loss_half_closed_form():
    target = torch.zeros(8, 8, dtype=torch.float64)
    target.view(-1)[:32] = 1
    gen = torch.full((8, 8), 0.5, dtype=torch.float64)
    # 1 - (2 * 16) / (16 + 32)
    assert dice_loss(gen, target).item() == pytest.approx(1 / 3, abs=1e-6)


def test_dice_loss_empty_channel_is_zero():
    z = torch.zeros(1, 2, 4, 4)
    assert dice_loss(z, z).item() == pytest.approx(0.0)


def test_dice_loss_averages_channels():
    target = torch.zeros(2, 4, 4, dtype=torch.float64)
    target[0] = 1
    gen = target.clone()
    gen[1, :2] = 1  # channel 1 disjoint from an empty target
    per = [dice_loss(gen[c], target[c]).item() for c in range(2)]
    assert dice_loss(gen, target).item() == pytest.approx(sum(per) / 2)


@pytest.mark.parametrize("seed", range(20))
def test_dice_loss_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((8, 8))
    g = (rng.random((8, 8)) > 0.5).astype(np.float64)
    pt = torch.tensor(p, requires_grad=True)
    dice_loss(pt, torch.tensor(g)).backward()
    fd = finite_difference_grad(lambda x: dice_loss(torch.tensor(x), torch.tensor(g)).item(), p.copy())
    rel = np.linalg.norm(pt.grad.numpy() - fd) / np.linalg.norm(fd)
    assert rel < 1e-4


@settings(max_examples=50, deadline=None)
@given(p=arrays(np.float64, (2, 6, 6), elements=st.floats(0, 1)),
       g=arrays(np.bool_, (2, 6, 6)))
def test_dice_loss_range_and_binary_consistency(p, g):
    val = dice_loss(torch.tensor(p), torch.tensor(g, dtype=torch.float64)).item()
    assert -1e-12 <= val <= 1 + 1e-12
    # binary prediction: 1 - loss is the per-channel hard Dice
    pb = p > 0.5
    loss = dice_loss(torch.tensor(pb, dtype=torch.float64), torch.tensor(g, dtype=torch.float64)).item()
    hard = []
    for c in range(2):
        denom = pb[c].sum() + g[c].sum()
        hard.append(1.0 if denom == 0 else 2 * (pb[c] & g[c]).sum() / denom)
    assert 1 - loss == pytest.approx(np.mean(hard), abs=1e-5)


# -- total ---------------------------------------------------------------

def test_total_loss_weighted_sum():
    scores = torch.full((1, 1, 4, 4), math.exp(-0.7), dtype=torch.float64)
    target = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    gen = torch.zeros_like(target)
    gen.view(-1)[:1] = 0.96  # l1 = 0.96 / 48 = 0.02
    total, terms = total_generator_loss(scores, gen, target, LossWeights(100, 1))
    assert terms["adv"].item() == pytest.approx(0.7)
    assert terms["l1"].item() == pytest.approx(0.02)
    expected = 0.7 + 100 * 0.02 + terms["dice"].item()
    assert total.item() == pytest.approx(expected)


def test_total_loss_ablations():
    scores = torch.rand(2, 1, 5, 5) * 0.9 + 0.05
    gen = torch.rand(2, 3, 8, 8)
    target = (torch.rand(2, 3, 8, 8) > 0.5).float()
    adv = adversarial_loss_g(scores).item()
    l1 = l1_loss(gen, target).item()
    no_dice, _ = total_generator_loss(scores, gen, target, LossWeights(100, 0))
    assert no_dice.item() == pytest.approx(adv + 100 * l1, rel=1e-6)
    pure, _ = total_generator_loss(scores, gen, target, LossWeights(0, 0))
    assert pure.item() == pytest.approx(adv, rel=1e-6)


def test_loss_weights_defaults():
    w = LossWeights()
    assert (w.lambda_l1, w.alpha_dice) == (100.0, 1.0)
    with pytest.raises(ValueError):
        LossWeights(-1, 0)


# -- hard metrics ---------------------------------------------------------

def test_dice_identical_and_disjoint():
    gt = np.random.default_rng(0).integers(0, 8, (16, 16))
    assert dice_coefficient(gt, gt) == 1.0
    assert miou(gt, gt).miou == 1.0
    a = np.zeros((4, 4), dtype=int)
    b = np.ones((4, 4), dtype=int)
    assert dice_coefficient(b, a) == 0.0


def test_two_by_two_example():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [1, 0]])
    report = miou(pred, gt)
    assert report.per_class_iou[1] == pytest.approx(1 / 3)
    # class 1: 2*1/(2+2); class 0 identical by symmetry
    assert dice_coefficient(pred, gt) == pytest.approx(0.5)


def test_metrics_match_brute_force_100_trials():
    rng = np.random.default_rng(123)
    for _ in range(100):
        pred = rng.integers(0, 8, (32, 32))
        gt = rng.integers(0, 8, (32, 32))
        ref_dice, ref_miou = brute_force_metrics(pred, gt)
        assert abs(dice_coefficient(pred, gt) - ref_dice) < 1e-12
        assert abs(miou(pred, gt).miou - ref_miou) < 1e-12


def test_metrics_skip_absent_classes():
    gt = np.zeros((4, 4), dtype=int)
    gt[:2] = 2
    pred = gt.copy()
    pred[0, 0] = 5  # class absent from gt
    ref_dice, ref_miou = brute_force_metrics(pred, gt)
    assert dice_coefficient(pred, gt) == pytest.approx(ref_dice)
    report = miou(pred, gt)
    assert report.miou == pytest.approx(ref_miou)
    assert report.per_class_iou[5] == 0.0 and report.per_class_iou[7] == 1.0
    present = [report.per_class_iou[k] for k in (0, 2)]
    assert report.miou == pytest.approx(np.mean(present))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 8, (12, 12))
    gt = rng.integers(0, 8, (12, 12))
    perm = rng.permutation(8)
    assert dice_coefficient(perm[pred], perm[gt]) == pytest.approx(dice_coefficient(pred, gt), abs=1e-12)
    assert miou(perm[pred], perm[gt]).miou == pytest.approx(miou(pred, gt).miou, abs=1e-12)
    report = miou(pred, gt)
    assert 0 <= report.dice <= 1 and 0 <= report.miou <= 1
    assert all(0 <= v <= 1 for v in report.per_class_iou)


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        dice_coefficient(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2), int), np.zeros((3, 2), int))


def test_metric_report_row():
    row = miou(np.zeros((2, 2), int), np.zeros((2, 2), int)).row("cfg")
    assert row.startswith("cfg,1.000000,1.000000,")
    assert len(row.split(",")) == 3 + 8


# -- decoding --------------------------------------------------------------

def test_decode_exact_palette():
    labels = np.arange(8).reshape(2, 4)
    np.testing.assert_array_equal(decode_rgb_to_labels(LABEL_COLORS[labels]), labels)


def test_decode_with_noise_below_half_gap():
    pal = LABEL_COLORS.astype(np.float64)
    gap = min(np.linalg.norm(a - b) for i, a in enumerate(pal) for b in pal[i + 1:])
    # palette colors are cube corners, so each coordinate only has to stay on
    # its side of 0.5: an inf-norm error below gap/2 is enough
    r = 0.99 * gap / 2
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 8, (32, 32))
    noisy = pal[labels] + rng.uniform(-r, r, (32, 32, 3))
    np.testing.assert_array_equal(decode_rgb_to_labels(noisy), labels)
    t = torch.tensor(noisy)
    np.testing.assert_array_equal(decode_rgb_to_labels(t).numpy(), labels)


def test_decode_tie_goes_to_lower_index():
    mid = (LABEL_COLORS[0] + LABEL_COLORS[1]) / 2
    assert decode_rgb_to_labels(mid[None]).tolist() == [0]
    assert decode_rgb_to_labels(torch.tensor(mid[None])).tolist() == [0]
    centre = np.full((1, 3), 0.5)  # equidistant from all eight corners
    assert decode_rgb_to_labels(centre).tolist() == [0]
    assert decode_rgb_to_labels(torch.tensor(centre)).tolist() == [0]


def test_decode_rejects_degenerate_palette():
    pal = LABEL_COLORS.copy()
    pal[3] = pal[2]
    with pytest.raises(ValueError):
        decode_rgb_to_labels(np.zeros((2, 2, 3)), pal)
