"""
Differentiable building blocks for rawtobit networks
GDN/IGDN and the type-A masked convolution come from compressai; this
module adds the functional GDN form, residual channel attention blocks and
groups, and the masked-conv factory used by the context model.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F
from compressai.layers import GDN, MaskedConv2d

from errors import InvalidShape, InvalidSpec

logger = logging.getLogger(__name__)

BETA_MIN = 1e-6


# ---------------------------------------------------------------------------
# GDN / IGDN
# ---------------------------------------------------------------------------

class GdnMode(str, Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


@dataclass
class GdnParams:
    """Effective GDN parameters: beta (C,), gamma (C, C)"""
    beta: torch.Tensor
    gamma: torch.Tensor
    mode: GdnMode = GdnMode.FORWARD

    def validate(self, beta_min: float = BETA_MIN) -> None:
        channels = self.beta.shape[0]
        if self.gamma.shape != (channels, channels):
            raise InvalidShape(f"gamma must be {channels}x{channels}, got {tuple(self.gamma.shape)}")
        # float32 reparameterization can land a hair under the floor
        if bool((self.beta < beta_min * (1 - 1e-4)).any()) or bool((self.gamma < 0).any()):
            raise InvalidSpec("GDN needs beta >= beta_min and gamma >= 0")


def gdn_params(layer: GDN) -> GdnParams:
    """Effective (beta, gamma) of a compressai GDN layer"""
    mode = GdnMode.INVERSE if layer.inverse else GdnMode.FORWARD
    return GdnParams(layer.beta_reparam(layer.beta), layer.gamma_reparam(layer.gamma), mode)


def gdn_forward(x: torch.Tensor, params: GdnParams) -> torch.Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); the inverse mode multiplies

    Works on (C, h, w) or (N, C, h, w).
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    channels = x.shape[1]
    if params.beta.shape != (channels,):
        raise InvalidShape(f"beta has {params.beta.shape[0]} entries for {channels} channels")
    norm = F.conv2d(x * x, params.gamma.view(channels, channels, 1, 1), params.beta)
    if GdnMode(params.mode) is GdnMode.INVERSE:
        out = x * torch.sqrt(norm)
    else:
        out = x * torch.rsqrt(norm)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Residual channel attention
# ---------------------------------------------------------------------------

@dataclass
class RcagConfig:
    num_blocks: int = 2
    channels: int = 256
    reduction: int = 16
    kernel_size: int = 3

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise InvalidSpec(f"RCAG needs at least one block, got {self.num_blocks}")
        if self.channels % self.reduction:
            raise InvalidSpec(
                f"channels {self.channels} not divisible by reduction {self.reduction}"
            )
        if self.kernel_size % 2 == 0:
            raise InvalidSpec(f"RCAB kernel must be odd, got {self.kernel_size}")


class ChannelAttention(nn.Module):
    """Global average pool -> bottleneck -> sigmoid gate"""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1)
        self.excite = nn.Conv2d(channels // reduction, channels, 1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class RCAB(nn.Module):
    """conv-ReLU-conv, channel attention, residual add"""

    def __init__(self, channels: int, kernel_size: int = 3, reduction: int = 16):
        super().__init__()
        padding = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=padding)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=padding)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        res = self.conv2(F.relu(self.conv1(x)))
        return x + self.attention(res)


class RCAG(nn.Module):
    """Residual channel attention group: RCABs and a tail conv under one skip"""

    def __init__(self, cfg: RcagConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.blocks = nn.Sequential(
            *[RCAB(cfg.channels, cfg.kernel_size, cfg.reduction) for _ in range(cfg.num_blocks)]
        )
        self.tail = nn.Conv2d(cfg.channels, cfg.channels, cfg.kernel_size, padding=cfg.kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.cfg.channels:
            raise InvalidShape(f"RCAG expects {self.cfg.channels} channels, got {x.shape[-3]}")
        return x + self.tail(self.blocks(x))


def rcag_forward(x: torch.Tensor, group: RCAG) -> torch.Tensor:
    squeeze = x.dim() == 3
    out = group(x.unsqueeze(0) if squeeze else x)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Masked convolution
# ---------------------------------------------------------------------------

@dataclass
class MaskedConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 5
    mask_type: str = "A"

    def validate(self) -> None:
        if self.mask_type != "A":
            raise InvalidSpec(f"only type-A masks are supported, got {self.mask_type!r}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise InvalidSpec(f"masked conv kernel must be odd, got {self.kernel}")


def build_masked_conv(spec: MaskedConvSpec) -> MaskedConv2d:
    """Type-A masked conv: output (i, j) only sees inputs strictly before (i, j) in raster order"""
    spec.validate()
    return MaskedConv2d(
        spec.in_channels,
        spec.out_channels,
        kernel_size=spec.kernel,
        padding=spec.kernel // 2,
        mask_type=spec.mask_type,
    )


def masked_conv(x: torch.Tensor, layer: MaskedConv2d) -> torch.Tensor:
    squeeze = x.dim() == 3
    out = layer(x.unsqueeze(0) if squeeze else x)
    return out[0] if squeeze else out
