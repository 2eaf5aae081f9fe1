"""Disjoint super-resolution baseline: segment at 56x56, then bicubic + SR-CNN."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .classes import render_labels_rgb
from .generators import seeded_build
from .objectives import decode_rgb_to_labels
from .pipeline import downsample_labels4

log = logging.getLogger(__name__)

CUBIC_A = -0.5


def _cubic(x, a=CUBIC_A):
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def bicubic_matrix(n, factor):
    """(n*factor, n) interpolation matrix; pixel centres aligned, edges replicated."""
    out = np.arange(n * factor)
    src = (out + 0.5) / factor - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    m = np.zeros((n * factor, n))
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n - 1)
        np.add.at(m, (out, idx), _cubic(t - tap))
    return m


def bicubic_upsample(image, factor=4):
    """Separable bicubic upsampling (a = -0.5) over the last two axes.

    Accepts numpy arrays or torch tensors of shape (..., H, W).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = image.shape[-2:]
    mh, mw = bicubic_matrix(h, factor), bicubic_matrix(w, factor)
    if isinstance(image, torch.Tensor):
        mh = torch.as_tensor(mh, dtype=image.dtype, device=image.device)
        mw = torch.as_tensor(mw, dtype=image.dtype, device=image.device)
        return mh @ image @ mw.T
    image = np.asarray(image, dtype=np.float64)
    return mh @ image @ mw.T


@dataclass(frozen=True)
class SrcnnConfig:
    kernels: tuple = (9, 1, 5)
    widths: tuple = (64, 32)
    channels: int = 3
    upscale: int = 4
    seed: int = 0


class SRCNN(nn.Module):
    """Three same-size convolutions predicting a correction to the bicubic input."""

    def __init__(self, config: SrcnnConfig):
        super().__init__()
        self.config = config
        k1, k2, k3 = config.kernels
        w1, w2 = config.widths
        c = config.channels
        self.body = nn.Sequential(
            nn.Conv2d(c, w1, k1, padding=k1 // 2), nn.ReLU(inplace=True),
            nn.Conv2d(w1, w2, k2, padding=k2 // 2), nn.ReLU(inplace=True),
            nn.Conv2d(w2, c, k3, padding=k3 // 2),
        )

    def forward(self, x):
        return x + self.body(x)


def build_srcnn(config: SrcnnConfig = SrcnnConfig()):
    model = seeded_build(lambda: SRCNN(config), config.seed)
    # the final layer starts at zero so an untrained model is the bicubic baseline
    nn.init.zeros_(model.body[-1].weight)
    nn.init.zeros_(model.body[-1].bias)
    return model


def srcnn_pairs(pairs):
    """(bicubic-upsampled low-res label rendering, high-res rendering), channel-first."""
    labels = np.stack([p.target_label_hr for p in pairs])
    low = render_labels_rgb(downsample_labels4(labels)).transpose(0, 3, 1, 2)
    high = render_labels_rgb(labels).transpose(0, 3, 1, 2)
    inputs = bicubic_upsample(torch.from_numpy(np.ascontiguousarray(low)), 4)
    return inputs.float(), torch.from_numpy(np.ascontiguousarray(high)).float()


def train_srcnn(inputs, targets, config: SrcnnConfig = SrcnnConfig(), epochs=30,
                lr=1e-3, batch_size=16, crop=64, model=None):
    """Fit an SR-CNN with MSE on random ``crop``-sized windows.

    ``inputs`` are detached, so nothing upstream of them receives gradients.
    """
    inputs = inputs.detach().float()
    targets = targets.detach().float()
    if inputs.shape != targets.shape:
        raise ValueError(f"input {tuple(inputs.shape)} and target {tuple(targets.shape)} differ")
    model = model or build_srcnn(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(config.seed)
    n, _, h, w = inputs.shape
    crop = min(crop, h, w)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            r = int(torch.randint(0, h - crop + 1, (1,), generator=gen))
            c = int(torch.randint(0, w - crop + 1, (1,), generator=gen))
            x = inputs[idx, :, r:r + crop, c:c + crop]
            y = targets[idx, :, r:r + crop, c:c + crop]
            loss = torch.mean((model(x) - y) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("srcnn epoch %d mse %.5f", epoch + 1, total / n)
    model.eval()
    return model


@torch.no_grad()
def disjoint_pipeline(gan, srcnn, input_lr, refine=True):
    """Segment at low resolution, upsample x4, optionally refine, decode labels.

    ``input_lr`` is (N, 1, 56, 56); returns (N, 224, 224) uint8 labels.
    """
    gan.eval()
    low = gan(input_lr)
    if low.shape[-1] != input_lr.shape[-1]:
        raise ValueError("disjoint pipeline expects a generator without upsampling")
    up = bicubic_upsample(low, 4)
    if refine and srcnn is not None:
        srcnn.eval()
        up = srcnn(up)
    up = up.clamp(0.0, 1.0)
    if up.shape[1] == 3:
        return decode_rgb_to_labels(up.permute(0, 2, 3, 1))
    return up.argmax(dim=1).to(torch.uint8)
