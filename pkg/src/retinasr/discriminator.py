"""Conditional patch discriminator with a 70x70 receptive field."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .generators import INIT_SCHEMES, seeded_build

KERNEL = 4
PADDING = 1


@dataclass(frozen=True)
class DiscriminatorConfig:
    """``in_channels`` counts condition plus label channels.

    ``n_layers`` is the number of stride-2 blocks; 3 gives the 70x70 field.
    """

    in_channels: int = 4
    base_width: int = 64
    n_layers: int = 3
    conditional: bool = True
    seed: int = 0
    init: str = "he"

    def __post_init__(self):
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        if self.in_channels < 1 or self.base_width < 1 or self.n_layers < 1:
            raise ValueError("in_channels, base_width and n_layers must be positive")

    @property
    def strides(self):
        return (2,) * self.n_layers + (1, 1)

    @property
    def kernels(self):
        return (KERNEL,) * (self.n_layers + 2)


def receptive_field(kernels, strides):
    """Input extent seen by one output unit of a conv stack."""
    rf = 1
    for k, s in zip(reversed(kernels), reversed(strides)):
        rf = (rf - 1) * s + k
    return rf


def output_size(n, kernels, strides, padding=PADDING):
    for k, s in zip(kernels, strides):
        n = (n + 2 * padding - k) // s + 1
    return n


class PatchDiscriminator(nn.Module):
    """conv -> ReLU -> batch norm blocks (no norm in the first), sigmoid output."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = config.in_channels
        for i, stride in enumerate(config.strides[:-1]):
            cout = config.base_width * min(2**i, 8)
            layers.append(nn.Conv2d(cin, cout, KERNEL, stride=stride, padding=PADDING))
            layers.append(nn.ReLU(inplace=True))
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, KERNEL, stride=1, padding=PADDING))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return torch.sigmoid(self.model(x))


def build_patchgan(config: DiscriminatorConfig):
    return seeded_build(lambda: PatchDiscriminator(config), config.seed, config.init)


def discriminate(model, condition, label):
    """Score ``label`` (N, C, H, W) given the upsampled condition (N, 1, H, W)."""
    if model.config.conditional:
        if condition.shape[-2:] != label.shape[-2:]:
            raise ValueError(f"condition {tuple(condition.shape[-2:])} and label "
                             f"{tuple(label.shape[-2:])} differ spatially")
        x = torch.cat([condition, label], dim=1)
    else:
        x = label
    return model(x)
