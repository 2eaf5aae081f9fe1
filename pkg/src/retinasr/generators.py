"""Generators mapping a 1x56x56 scan to a 224x224 segmentation.

Two encoders (U-Net, ResNet of bottleneck blocks) and two x4 upsamplers
(a pair of stride-2 transposed stages, or one sub-pixel layer). The
``none`` upsampler keeps the input resolution and serves the no-SR and
disjoint baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .classes import N_CLASSES

ARCHS = ("unet", "resnet")
UPSAMPLERS = ("transposed", "subpixel", "none")
HEADS = ("rgb", "softmax8")
UPSCALE = 4
INIT_SCHEMES = ("he", "normal")


@dataclass(frozen=True)
class GeneratorConfig:
    arch: str = "resnet"
    upsampler: str = "subpixel"
    head: str = "rgb"
    base_width: int = 64
    depth: int | None = None
    in_channels: int = 1
    seed: int = 0
    init: str = "he"

    def __post_init__(self):
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.upsampler not in UPSAMPLERS:
            raise ValueError(f"upsampler must be one of {UPSAMPLERS}, got {self.upsampler!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.depth is None:
            object.__setattr__(self, "depth", 4 if self.arch == "unet" else 9)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 4 or self.base_width % 4:
            raise ValueError("base_width must be a positive multiple of 4")

    @property
    def out_channels(self):
        return 3 if self.head == "rgb" else N_CLASSES

    @property
    def scale(self):
        return 1 if self.upsampler == "none" else UPSCALE


def subpixel_upsample(x, r):
    """Rearrange (..., C*r*r, H, W) into (..., C, H*r, W*r).

    Output element (c, h*r + i, w*r + j) is input element (c*r*r + i*r + j, h, w).
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    *lead, ch, h, w = x.shape
    if ch % (r * r):
        raise ValueError(f"channels {ch} not divisible by r^2={r * r}")
    c = ch // (r * r)
    x = x.reshape(*lead, c, r, r, h, w)
    n = len(lead)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return x.reshape(*lead, c, h * r, w * r)


class SubpixelConv(nn.Module):
    """3x3 convolution to ``out * r^2`` channels followed by pixel shuffle."""

    def __init__(self, in_channels, out_channels, r=UPSCALE):
        super().__init__()
        self.r = r
        self.conv = nn.Conv2d(in_channels, out_channels * r * r, 3, padding=1, bias=False)
        self.post = nn.Sequential(nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.post(subpixel_upsample(self.conv(x), self.r))


def _cbr(cin, cout, k, stride=1, padding=0):
    return [nn.Conv2d(cin, cout, k, stride=stride, padding=padding, bias=False),
            nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class BottleneckBlock(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, with the input added back."""

    def __init__(self, channels, mid=None):
        super().__init__()
        mid = mid or max(channels // 4, 1)
        self.channels = channels
        self.body = nn.Sequential(
            *_cbr(channels, mid, 1),
            *_cbr(mid, mid, 3, padding=1),
            nn.Conv2d(mid, channels, 1, bias=False),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        if x.shape[-3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-3]}")
        return x + self.body(x)


class TransposedBottleneck(nn.Module):
    """Bottleneck whose middle stage is a 2x2 stride-2 transposed convolution.

    The skip path goes through its own 2x2 stride-2 transposed convolution so
    both branches land on the 2H x 2W grid.
    """

    def __init__(self, in_channels, out_channels, mid=None):
        super().__init__()
        mid = mid or max(in_channels // 4, 1)
        self.in_channels = in_channels
        self.body = nn.Sequential(
            *_cbr(in_channels, mid, 1),
            nn.ConvTranspose2d(mid, mid, 2, stride=2, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.skip = nn.Sequential(
            nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2, bias=False),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x):
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[-3]}")
        return torch.relu(self.body(x) + self.skip(x))


class _Head(nn.Module):
    def __init__(self, in_channels, config):
        super().__init__()
        self.kind = config.head
        self.conv = nn.Conv2d(in_channels, config.out_channels, 1)

    def forward(self, x):
        x = self.conv(x)
        if self.kind == "rgb":
            return torch.sigmoid(x)
        return torch.softmax(x, dim=1)


def _upsampler(config, width):
    """Returns (module, output width)."""
    if config.upsampler == "none":
        return nn.Identity(), width
    if config.upsampler == "subpixel":
        out = max(width // 4, 4)
        return SubpixelConv(width, out, UPSCALE), out
    half, quarter = max(width // 2, 4), max(width // 4, 4)
    if config.arch == "resnet":
        return nn.Sequential(TransposedBottleneck(width, half),
                             TransposedBottleneck(half, quarter)), quarter
    return nn.Sequential(
        nn.ConvTranspose2d(width, half, 2, stride=2, bias=False),
        nn.BatchNorm2d(half), nn.ReLU(inplace=True),
        nn.ConvTranspose2d(half, quarter, 2, stride=2, bias=False),
        nn.BatchNorm2d(quarter), nn.ReLU(inplace=True),
    ), quarter


class ResNetGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        w = config.base_width
        self.config = config
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            *_cbr(config.in_channels, w, 7),
        )
        self.blocks = nn.Sequential(*[BottleneckBlock(w) for _ in range(config.depth)])
        self.up, width = _upsampler(config, w)
        self.head = _Head(width, config)

    def forward(self, x):
        return self.head(self.up(self.blocks(self.stem(x))))


class UNetGenerator(nn.Module):
    """U-Net over ``depth`` resolution levels (56, 28, 14, 7 by default).

    Encoder features are concatenated into the decoder stage of the same
    resolution. Skips listed in ``drop_skips`` are replaced by zeros.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.drop_skips = set()
        widths = [config.base_width * 2**i for i in range(config.depth)]
        self.enc = nn.ModuleList()
        cin = config.in_channels
        for w in widths:
            self.enc.append(nn.Sequential(*_cbr(cin, w, 3, padding=1), *_cbr(w, w, 3, padding=1)))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.upconv = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(config.depth - 1)):
            self.upconv.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.dec.append(nn.Sequential(*_cbr(2 * widths[i], widths[i], 3, padding=1),
                                          *_cbr(widths[i], widths[i], 3, padding=1)))
        self.up, width = _upsampler(config, widths[0])
        self.head = _Head(width, config)

    def forward(self, x):
        factor = 2 ** (self.config.depth - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by "
                             f"2^{self.config.depth - 1}")
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for upconv, dec in zip(self.upconv, self.dec):
            skip = skips.pop()
            if len(skips) in self.drop_skips:
                skip = torch.zeros_like(skip)
            x = dec(torch.cat([upconv(x), skip], dim=1))
        return self.head(self.up(x))


def init_weights(module, scheme="he", std=0.02):
    """Zero-mean Gaussian conv weights: fan-in scaled (``he``) or fixed ``std``."""
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if scheme == "he":
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            else:
                nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


def seeded_build(factory, seed, init="he"):
    """Construct and initialise a module under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = factory()
        init_weights(model, init)
    return model


def build_unet_generator(config: GeneratorConfig):
    if config.arch != "unet":
        raise ValueError("config.arch must be 'unet'")
    return seeded_build(lambda: UNetGenerator(config), config.seed, config.init)


def build_resnet_generator(config: GeneratorConfig):
    if config.arch != "resnet":
        raise ValueError("config.arch must be 'resnet'")
    return seeded_build(lambda: ResNetGenerator(config), config.seed, config.init)


def build_generator(config: GeneratorConfig):
    if config.arch == "unet":
        return build_unet_generator(config)
    return build_resnet_generator(config)
