"""
Differentiable rate modelling for rawtobit
Quantization proxies, the Gaussian conditional with its hyperprior and
autoregressive context model, and the factorized prior for the
hyper-latent. The probability models are compressai's EntropyBottleneck
and GaussianConditional; rates are returned in bits.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from compressai.entropy_models import EntropyBottleneck, EntropyModel, GaussianConditional
from compressai.ops import LowerBound

from errors import InvalidShape, InvalidSpec
from nn_blocks import MaskedConvSpec, build_masked_conv

logger = logging.getLogger(__name__)

SCALE_MIN = 0.11
LIKELIHOOD_MIN = 2 ** -16
CONTEXT_KERNEL = 5

# our mode names -> compressai's
QUANTIZE_MODES = {"noise": "noise", "round": "dequantize"}

_quantizer = EntropyModel()
_gaussian = GaussianConditional(None, scale_bound=SCALE_MIN, likelihood_bound=LIKELIHOOD_MIN)


# ---------------------------------------------------------------------------
# Quantization and Gaussian rate
# ---------------------------------------------------------------------------

@dataclass
class GaussianParams:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise InvalidShape(f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ")


@dataclass
class QuantizedLatent:
    """Integer-valued latent (stored as a float tensor of whole numbers)"""
    y_hat: torch.Tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.y_hat.shape)

    def as_int(self) -> torch.Tensor:
        return self.y_hat.to(torch.int64)


def check_mode(mode: str) -> None:
    if mode not in QUANTIZE_MODES:
        raise InvalidSpec(f"unknown quantization mode {mode!r}")


def quantize(y: torch.Tensor, mode: str = "round") -> torch.Tensor:
    """'noise' adds U(-0.5, 0.5) (training proxy); 'round' rounds to nearest"""
    check_mode(mode)
    return _quantizer.quantize(y, QUANTIZE_MODES[mode])


def gaussian_likelihood(
    y_hat: torch.Tensor,
    params: GaussianParams,
    conditional: Optional[GaussianConditional] = None,
) -> torch.Tensor:
    """P(y_hat) under N(mu, sigma) integrated over [y_hat - 0.5, y_hat + 0.5], floored at 2^-16

    sigma is lower-bounded at 0.11 by the conditional.
    """
    if y_hat.shape != params.mu.shape:
        raise InvalidShape(f"symbols {tuple(y_hat.shape)} vs params {tuple(params.mu.shape)}")
    if conditional is None:
        conditional = _gaussian
    likelihood = conditional._likelihood(y_hat, params.sigma, params.mu)
    return conditional.likelihood_lower_bound(likelihood)


def likelihood_bits(likelihood: torch.Tensor) -> torch.Tensor:
    return -torch.log2(likelihood).sum()


def gaussian_rate(y_hat: torch.Tensor, params: GaussianParams) -> torch.Tensor:
    """Total estimated bits of y_hat"""
    return likelihood_bits(gaussian_likelihood(y_hat, params))


# ---------------------------------------------------------------------------
# Factorized prior for the hyper-latent
# ---------------------------------------------------------------------------

def factorized_likelihood(z_hat: torch.Tensor, prior: EntropyBottleneck) -> torch.Tensor:
    """Interval likelihood of an already quantized (N, C, h, w) hyper-latent"""
    channels = prior.quantiles.shape[0]
    if z_hat.dim() != 4 or z_hat.shape[1] != channels:
        raise InvalidShape(f"expected (N, {channels}, h, w), got {tuple(z_hat.shape)}")
    n, c, h, w = z_hat.shape
    values = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
    likelihood, _, _ = prior._likelihood(values)
    likelihood = prior.likelihood_lower_bound(likelihood)
    return likelihood.reshape(c, n, h, w).permute(1, 0, 2, 3)


def factorized_prior_rate(z_hat: torch.Tensor, prior: EntropyBottleneck) -> torch.Tensor:
    return likelihood_bits(factorized_likelihood(z_hat, prior))


# ---------------------------------------------------------------------------
# Hyperprior transforms, context model and entropy parameters
# ---------------------------------------------------------------------------

class HyperAnalysis(nn.Module):
    """y -> z over two stride-2 stages"""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, hyper_channels, 3, stride=1, padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


class HyperSynthesis(nn.Module):
    """z_hat -> 2M-channel features at the latent's spatial size"""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        mid = latent_channels * 3 // 2
        self.net = nn.Sequential(
            nn.ConvTranspose2d(hyper_channels, latent_channels, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(inplace=True),
            nn.ConvTranspose2d(latent_channels, mid, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(mid, 2 * latent_channels, 3, stride=1, padding=1),
        )

    def forward(self, z_hat: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        features = self.net(z_hat)
        return features[..., : size[0], : size[1]]


def hyper_analyze(y: torch.Tensor, h_a: HyperAnalysis) -> torch.Tensor:
    return h_a(y)


def hyper_synthesize(z_hat: torch.Tensor, h_s: HyperSynthesis, size: Tuple[int, int]) -> torch.Tensor:
    return h_s(z_hat, size)


class EntropyParameters(nn.Module):
    """(hyper features || context features) -> (mu, sigma) via two 1x1 convs"""

    def __init__(self, latent_channels: int):
        super().__init__()
        self.latent_channels = latent_channels
        self.net = nn.Sequential(
            nn.Conv2d(4 * latent_channels, 3 * latent_channels, 1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(3 * latent_channels, 2 * latent_channels, 1),
        )
        self.lower_bound_scale = LowerBound(SCALE_MIN)

    def forward(self, hyper_features: torch.Tensor, context_features: torch.Tensor) -> GaussianParams:
        if hyper_features.shape != context_features.shape:
            raise InvalidShape(
                f"hyper features {tuple(hyper_features.shape)} vs context {tuple(context_features.shape)}"
            )
        if hyper_features.shape[1] != 2 * self.latent_channels:
            raise InvalidShape(
                f"expected {2 * self.latent_channels} feature channels, got {hyper_features.shape[1]}"
            )
        out = self.net(torch.cat([hyper_features, context_features], dim=1))
        mu, sigma = out.chunk(2, dim=1)
        return GaussianParams(mu, self.lower_bound_scale(sigma))


def entropy_parameters(
    hyper_features: torch.Tensor,
    context_features: torch.Tensor,
    head: EntropyParameters,
) -> GaussianParams:
    return head(hyper_features, context_features)


@dataclass
class EntropyOutput:
    y_tilde: torch.Tensor
    z_tilde: torch.Tensor
    y_likelihood: torch.Tensor
    z_likelihood: torch.Tensor
    params: GaussianParams

    @property
    def rate_bits(self) -> torch.Tensor:
        return likelihood_bits(self.y_likelihood) + likelihood_bits(self.z_likelihood)

    @property
    def latent_bits(self) -> torch.Tensor:
        return likelihood_bits(self.y_likelihood)

    @property
    def hyper_bits(self) -> torch.Tensor:
        return likelihood_bits(self.z_likelihood)


class HyperpriorContextModel(nn.Module):
    """Hyperprior + 5x5 context model + Gaussian conditional for an M-channel latent

    The hyper-latent goes through an EntropyBottleneck, which rounds around
    its learned per-channel medians; y is rounded to plain integers so the
    context model sees the same values on both sides of the bitstream.
    """

    def __init__(self, latent_channels: int = 192, hyper_channels: int = 192):
        super().__init__()
        self.latent_channels = latent_channels
        self.hyper_channels = hyper_channels
        self.h_a = HyperAnalysis(latent_channels, hyper_channels)
        self.h_s = HyperSynthesis(latent_channels, hyper_channels)
        self.context = build_masked_conv(
            MaskedConvSpec(latent_channels, 2 * latent_channels, CONTEXT_KERNEL)
        )
        self.entropy_parameters = EntropyParameters(latent_channels)
        self.entropy_bottleneck = EntropyBottleneck(hyper_channels, likelihood_bound=LIKELIHOOD_MIN)
        self.gaussian_conditional = GaussianConditional(
            None, scale_bound=SCALE_MIN, likelihood_bound=LIKELIHOOD_MIN
        )

    def forward(self, y: torch.Tensor, mode: str = "noise") -> EntropyOutput:
        check_mode(mode)
        if y.dim() != 4 or y.shape[1] != self.latent_channels:
            raise InvalidShape(f"expected (N, {self.latent_channels}, h, w), got {tuple(y.shape)}")
        z = self.h_a(y)
        z_tilde, z_likelihood = self.entropy_bottleneck(z, training=mode == "noise")
        hyper = self.h_s(z_tilde, y.shape[-2:])
        y_tilde = quantize(y, mode)
        params = self.entropy_parameters(hyper, self.context(y_tilde))
        return EntropyOutput(
            y_tilde=y_tilde,
            z_tilde=z_tilde,
            y_likelihood=gaussian_likelihood(y_tilde, params, self.gaussian_conditional),
            z_likelihood=z_likelihood,
            params=params,
        )

    def quantize_hyper(self, z: torch.Tensor) -> torch.Tensor:
        """Round z around the bottleneck medians, exactly as its decoder reconstructs it"""
        medians = self.entropy_bottleneck._get_medians().detach()
        return self.entropy_bottleneck.quantize(z, "dequantize", medians)

    def aux_loss(self) -> torch.Tensor:
        return self.entropy_bottleneck.loss()

    def hyper_features(self, z_hat: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        return self.h_s(z_hat, size)

    def params_at(
        self,
        padded_y_hat: torch.Tensor,
        hyper: torch.Tensor,
        i: int,
        j: int,
    ) -> GaussianParams:
        """Gaussian params for latent position (i, j) from already-decoded neighbours

        padded_y_hat is the (1, M, h + 4, w + 4) zero-padded decode buffer;
        positions at or after (i, j) must still be zero.
        """
        k = CONTEXT_KERNEL
        window = padded_y_hat[:, :, i:i + k, j:j + k]
        ctx = F.conv2d(window, self.context.weight * self.context.mask, self.context.bias)
        return self.entropy_parameters(hyper[:, :, i:i + 1, j:j + 1], ctx)
