"""Feature-level super-resolution branch (RCAN-style) hung off the stride-4 level.

The branch is a training-time sink: it reads OP2 features, reconstructs an
image at network input resolution and contributes only through the SR loss.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

OP2_STRIDE = 4


class BranchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SRBranchConfig:
    num_rg: int = 2
    rcab_per_rg: int = 2
    channels: int = 16
    reduction: int = 4
    upscale: int = 4
    image_channels: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        if self.num_rg < 1 or self.rcab_per_rg < 1:
            raise BranchConfigError("num_rg and rcab_per_rg must be >= 1")
        if self.channels < 1 or self.reduction < 1 or self.channels % self.reduction:
            raise BranchConfigError(
                f"reduction {self.reduction} must divide channels {self.channels}"
            )
        if self.upscale < 2 or self.upscale & (self.upscale - 1):
            raise BranchConfigError(f"upscale must be a power of two >= 2, got {self.upscale}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMap:
    """Feature tensor (``N, C, h, w`` or ``C, h, w``) plus its stride."""

    values: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise BranchConfigError(f"stride must be a power of two, got {self.stride}")
        if any(d < 1 for d in self.values.shape[-3:]):
            raise BranchConfigError(f"empty feature map {tuple(self.values.shape)}")


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: pool, C -> C/r -> C, sigmoid, rescale."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise BranchConfigError(f"reduction {reduction} must divide channels {channels}")
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.down = nn.Conv2d(channels, channels // reduction, 1)
        self.act = nn.ReLU()
        self.up = nn.Conv2d(channels // reduction, channels, 1)
        self.gate = nn.Sigmoid()

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        return self.gate(self.up(self.act(self.down(self.pool(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)


class RCAB(nn.Module):
    def __init__(self, channels: int, reduction: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.act = nn.ReLU()
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.ca = ChannelAttention(channels, reduction)
        self.calls = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return x + self.ca(self.conv2(self.act(self.conv1(x))))


class ResidualGroup(nn.Module):
    def __init__(self, channels: int, reduction: int, rcab_count: int = 2, kernel_size: int = 3):
        super().__init__()
        self.blocks = nn.Sequential(
            *[RCAB(channels, reduction, kernel_size) for _ in range(rcab_count)]
        )
        # closing conv so that a zeroed group reduces to the identity
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.calls = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return x + self.conv(self.blocks(x))


class SubPixelUpsampler(nn.Sequential):
    """log2(scale) stages of conv(C -> 4C) + PixelShuffle(2)."""

    def __init__(self, channels: int, scale: int, kernel_size: int = 3):
        layers = []
        for _ in range(scale.bit_length() - 1):
            layers.append(nn.Conv2d(channels, 4 * channels, kernel_size, padding=kernel_size // 2))
            layers.append(nn.PixelShuffle(2))
        super().__init__(*layers)


class SRBranch(nn.Module):
    """RGs -> low/high fusion by addition -> sub-pixel upsampling -> image."""

    def __init__(self, cfg: SRBranchConfig = SRBranchConfig()):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel_size
        self.groups = nn.Sequential(
            *[ResidualGroup(cfg.channels, cfg.reduction, cfg.rcab_per_rg, k) for _ in range(cfg.num_rg)]
        )
        self.upsample = SubPixelUpsampler(cfg.channels, cfg.upscale, k)
        self.to_image = nn.Conv2d(cfg.channels, cfg.image_channels, k, padding=k // 2)

    def fused(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.groups(x)

    def forward(self, x: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        img = self.to_image(self.upsample(self.fused(x)))
        return img.clamp(0.0, 1.0) if clamp else img


def channel_attention(x: FeatureMap, module: ChannelAttention) -> FeatureMap:
    return FeatureMap(module(x.values), x.stride)


def rcab_forward(x: FeatureMap, module: RCAB) -> FeatureMap:
    return FeatureMap(module(x.values), x.stride)


def rg_forward(x: FeatureMap, module: ResidualGroup) -> FeatureMap:
    return FeatureMap(module(x.values), x.stride)


def sr_forward(op2: FeatureMap, branch: SRBranch) -> torch.Tensor:
    if op2.stride != OP2_STRIDE:
        raise BranchConfigError(
            f"SR branch attaches to the stride-{OP2_STRIDE} level, got stride {op2.stride}"
        )
    return branch(op2.values)


def branch_param_count(cfg: SRBranchConfig) -> int:
    """Closed-form number of learnable scalars in :class:`SRBranch`."""
    c, r, k = cfg.channels, cfg.reduction, cfg.kernel_size
    conv = c * c * k * k + c
    attention = (c * (c // r) + c // r) + ((c // r) * c + c)
    rcab = 2 * conv + attention
    per_rg = cfg.rcab_per_rg * rcab + conv
    stages = cfg.upscale.bit_length() - 1
    upsampler = stages * (c * 4 * c * k * k + 4 * c)
    head = c * cfg.image_channels * k * k + cfg.image_channels
    return cfg.num_rg * per_rg + upsampler + head
