"""
Network assembly for rawtobit
RBN (RAW in, bitstream out, sRGB back), its compression and ISP teachers,
and the unified and cascaded baselines. Every compressing system shares
LearnedCodec, which owns padding, the real encode/decode path and the
bitstream header.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from compressai.entropy_models import EntropyBottleneck, GaussianConditional
from compressai.models import CompressionModel
from compressai.models.utils import update_registered_buffers
from pydantic import BaseModel, ConfigDict, Field

from bitcodec import (
    Bitstream,
    BitstreamHeader,
    ModelKind,
    decode_latents,
    encode_latents,
)
from data_pipeline import RawImage, SrgbImage
from entropy_model import EntropyOutput, HyperpriorContextModel, QuantizedLatent
from errors import CheckpointError, InvalidShape, InvalidSpec, ModelMismatch, PadRequired
from nn_blocks import GDN, RCAG, RcagConfig

logger = logging.getLogger(__name__)

PACKED_MULTIPLE = 16


class SystemName(str, Enum):
    RBN = "rbn"
    UNIFIED = "unified"
    CASCADED = "cascaded"
    TEACHER_COMP = "teacher-comp"
    TEACHER_ISP = "teacher-isp"


class ModelConfig(BaseModel):
    """Architecture hyperparameters stored with every checkpoint"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True, protected_namespaces=())

    system: SystemName = SystemName.RBN
    width: int = Field(256, gt=0)
    latent_channels: int = Field(192, gt=0)
    teacher_k: int = Field(192, gt=0)
    hyper_channels: Optional[int] = Field(None, gt=0)
    rcag_blocks: int = Field(2, ge=1)
    reduction: int = Field(16, ge=1)
    baseline_channels: int = Field(192, gt=0)
    isp_width: int = Field(64, gt=0)
    isp_groups: int = Field(2, ge=1)
    isp_teacher_input: str = Field("srgb", pattern="^(srgb|raw)$")
    lmbda: Optional[float] = Field(None, alias="lambda", gt=0)
    quality_index: int = Field(0, ge=0, le=255)

    def hyper_width(self, latent: int) -> int:
        return self.hyper_channels or latent


def conv(in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=kernel // 2)


def deconv(in_channels: int, out_channels: int, kernel: int = 3, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        in_channels, out_channels, kernel, stride=stride,
        padding=kernel // 2, output_padding=stride - 1,
    )


@dataclass
class CodecOutput:
    x_hat: torch.Tensor
    rate_bits: torch.Tensor
    entropy: Optional[EntropyOutput] = None
    enc_sites: List[torch.Tensor] = field(default_factory=list)
    dec_sites: List[torch.Tensor] = field(default_factory=list)
    intermediate: Optional[torch.Tensor] = None


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------

def pad_to_multiple(x: torch.Tensor, multiple: int = PACKED_MULTIPLE) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad the spatial dims up to a multiple; returns the padded tensor and original dims"""
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return x, (h, w)
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode), (h, w)


def crop_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return x[..., :height, :width]


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

class AnalysisTransform(nn.Module):
    """[stride-2 conv -> GDN] x stages, then a stride-1 conv to the latent

    The conv outputs (before GDN) are the attention sites.
    """

    def __init__(self, in_channels: int, width: int, out_channels: int, stages: int = 4, kernel: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(
            [conv(in_channels if i == 0 else width, width, kernel, stride=2) for i in range(stages)]
        )
        self.gdns = nn.ModuleList([GDN(width) for _ in range(stages)])
        self.final = conv(width, out_channels, kernel)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        sites = []
        for layer, gdn in zip(self.convs, self.gdns):
            x = layer(x)
            sites.append(x)
            x = gdn(x)
        return self.final(x), sites


class RcagSynthesis(nn.Module):
    """[stride-2 transposed conv -> RCAG] x stages, then an output conv

    The transposed-conv outputs (before the RCAG) are the attention sites.
    """

    def __init__(
        self,
        in_channels: int,
        width: int,
        out_channels: int,
        stages: int = 5,
        rcag: Optional[RcagConfig] = None,
        kernel: int = 3,
    ):
        super().__init__()
        rcag = rcag or RcagConfig(channels=width)
        if rcag.channels != width:
            raise InvalidSpec(f"RCAG width {rcag.channels} differs from decoder width {width}")
        self.deconvs = nn.ModuleList(
            [deconv(in_channels if i == 0 else width, width, kernel) for i in range(stages)]
        )
        self.groups = nn.ModuleList([RCAG(rcag) for _ in range(stages)])
        self.output = conv(width, out_channels, kernel)

    def forward(self, y: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        sites = []
        x = y
        for layer, group in zip(self.deconvs, self.groups):
            x = layer(x)
            sites.append(x)
            x = group(x)
        return self.output(x), sites


class MirrorSynthesis(nn.Module):
    """Mirror of AnalysisTransform: conv, then [IGDN -> stride-2 transposed conv] x stages"""

    def __init__(self, in_channels: int, width: int, out_channels: int, stages: int = 4, kernel: int = 3):
        super().__init__()
        self.first = conv(in_channels, width, kernel)
        self.igdns = nn.ModuleList([GDN(width, inverse=True) for _ in range(stages)])
        self.deconvs = nn.ModuleList(
            [deconv(width, out_channels if i == stages - 1 else width, kernel) for i in range(stages)]
        )

    def forward(self, y: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        sites = []
        x = self.first(y)
        for igdn, layer in zip(self.igdns, self.deconvs):
            x = layer(igdn(x))
            sites.append(x)
        return x, sites


class BaselineAnalysis(nn.Module):
    """Four k5 stride-2 convs with GDN between them"""

    def __init__(self, in_channels: int, n: int, m: int):
        super().__init__()
        self.net = nn.Sequential(
            conv(in_channels, n, 5, 2), GDN(n),
            conv(n, n, 5, 2), GDN(n),
            conv(n, n, 5, 2), GDN(n),
            conv(n, m, 5, 2),
        )

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        return self.net(x), []


class BaselineSynthesis(nn.Module):
    """Four k5 stride-2 transposed convs with IGDN; extra_stage appends IGDN + one more"""

    def __init__(self, m: int, n: int, out_channels: int, extra_stage: bool = False):
        super().__init__()
        layers: List[nn.Module] = [
            deconv(m, n, 5), GDN(n, inverse=True),
            deconv(n, n, 5), GDN(n, inverse=True),
            deconv(n, n, 5), GDN(n, inverse=True),
        ]
        if extra_stage:
            layers += [deconv(n, n, 5), GDN(n, inverse=True)]
        layers.append(deconv(n, out_channels, 5))
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        return self.net(y), []


class CompactIsp(nn.Module):
    """Packed RAW -> sRGB: head conv, RCAGs, conv to 12 channels, pixel shuffle x2"""

    def __init__(self, width: int = 64, groups: int = 2, blocks: int = 2, reduction: int = 16):
        super().__init__()
        self.head = conv(4, width)
        self.body = nn.Sequential(
            *[RCAG(RcagConfig(num_blocks=blocks, channels=width, reduction=reduction)) for _ in range(groups)]
        )
        self.tail = conv(width, 3 * 4)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        return self.shuffle(self.tail(self.body(self.head(raw)))).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Codec base
# ---------------------------------------------------------------------------

class LearnedCodec(CompressionModel):
    """Encoder/decoder pair with a hyperprior+context entropy model

    input_scale maps input pixels to the header's mosaic resolution,
    output_scale maps input pixels to output pixels, and latent_stride is
    the downsampling from input to latent.
    """

    kind: ModelKind = ModelKind.RBN
    input_channels: int = 4
    input_scale: int = 2
    output_scale: int = 2
    latent_stride: int = 16
    pad_multiple: int = PACKED_MULTIPLE

    entropy: HyperpriorContextModel

    def encode_latent(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        raise NotImplementedError

    def decode_latent(self, y_hat: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        raise NotImplementedError

    @property
    def latent_channels(self) -> int:
        return self.entropy.latent_channels

    def load_state_dict(self, state_dict, strict: bool = True):
        # coder tables are sized by the last update(), so resize them to the checkpoint
        for name, module in self.named_modules():
            if isinstance(module, EntropyBottleneck):
                buffers = ["_quantized_cdf", "_offset", "_cdf_length"]
            elif isinstance(module, GaussianConditional):
                buffers = ["_quantized_cdf", "_offset", "_cdf_length", "scale_table"]
            else:
                continue
            if any(key.startswith(f"{name}.") for key in state_dict):
                update_registered_buffers(module, name, buffers, state_dict, policy="resize")
        return nn.Module.load_state_dict(self, state_dict, strict=strict)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.input_channels:
            raise InvalidShape(
                f"{type(self).__name__} expects (N, {self.input_channels}, h, w), got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        if h % self.pad_multiple or w % self.pad_multiple:
            raise PadRequired(
                f"input {h}x{w} is not a multiple of {self.pad_multiple}; pad it first"
            )

    def forward(self, x: torch.Tensor, mode: str = "noise") -> CodecOutput:
        self.check_input(x)
        y, enc_sites = self.encode_latent(x)
        ent = self.entropy(y, mode)
        x_hat, dec_sites = self.decode_latent(ent.y_tilde)
        return CodecOutput(x_hat, ent.rate_bits, ent, enc_sites, dec_sites)

    def latent_size(self, padded_h: int, padded_w: int) -> Tuple[int, int]:
        return padded_h // self.latent_stride, padded_w // self.latent_stride

    @torch.no_grad()
    def compress(self, x: torch.Tensor, quality_index: int = 0, pad: bool = True) -> Bitstream:
        """Real encode of one image into a Bitstream"""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[0] != 1:
            raise InvalidShape(f"compress takes one image at a time, got batch {x.shape[0]}")
        h, w = x.shape[-2:]
        if pad:
            x, _ = pad_to_multiple(x, self.pad_multiple)
        self.check_input(x)
        y, _ = self.encode_latent(x)
        hyper_payload, latent_payload, _, _ = encode_latents(self.entropy, y)
        header = BitstreamHeader(
            model_kind=self.kind,
            quality_index=quality_index,
            K=self.latent_channels,
            height=h * self.input_scale,
            width=w * self.input_scale,
            hyper_len=len(hyper_payload),
        )
        return Bitstream(header, hyper_payload, latent_payload)

    def check_header(self, header: BitstreamHeader, quality_index: Optional[int] = None) -> None:
        if header.model_kind != self.kind:
            raise ModelMismatch(
                f"stream was written by {header.model_kind.name}, model is {self.kind.name}"
            )
        if header.K != self.latent_channels:
            raise ModelMismatch(
                f"stream has {header.K} latent channels, model has {self.latent_channels}"
            )
        if quality_index is not None and header.quality_index != quality_index:
            raise ModelMismatch(
                f"stream was written at quality index {header.quality_index}, model is {quality_index}"
            )

    @torch.no_grad()
    def decompress(self, stream: Bitstream, quality_index: Optional[int] = None) -> torch.Tensor:
        """Decode a Bitstream to a clamped (1, C, H, W) output, cropped to the original size

        quality_index defaults to the model config's; pass it explicitly for
        models built without one.
        """
        if quality_index is None:
            config = getattr(self, "config", None)
            quality_index = getattr(config, "quality_index", None)
        self.check_header(stream.header, quality_index)
        h = stream.header.height // self.input_scale
        w = stream.header.width // self.input_scale
        padded_h = math.ceil(h / self.pad_multiple) * self.pad_multiple
        padded_w = math.ceil(w / self.pad_multiple) * self.pad_multiple
        reference = next(self.parameters())
        y_hat, _ = decode_latents(
            self.entropy,
            stream.hyper_payload,
            stream.latent_payload,
            self.latent_size(padded_h, padded_w),
            dtype=reference.dtype,
            device=reference.device,
        )
        x_hat, _ = self.decode_latent(y_hat)
        x_hat = crop_to(x_hat, h * self.output_scale, w * self.output_scale)
        return x_hat.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

class RbnModel(LearnedCodec):
    """Packed RAW -> 192-channel latent -> sRGB, no skip connections"""

    kind = ModelKind.RBN

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        config = config or ModelConfig(system=SystemName.RBN)
        self.config = config
        rcag = RcagConfig(config.rcag_blocks, config.width, config.reduction)
        self.encoder = AnalysisTransform(4, config.width, config.latent_channels, stages=4)
        self.decoder = RcagSynthesis(config.latent_channels, config.width, 3, stages=5, rcag=rcag)
        self.entropy = HyperpriorContextModel(
            config.latent_channels, config.hyper_width(config.latent_channels)
        )

    def encode_latent(self, x):
        return self.encoder(x)

    def decode_latent(self, y_hat):
        return self.decoder(y_hat)


class CompressionTeacher(LearnedCodec):
    """RAW autoencoder under compression; encoder matches RBN's except for K output channels"""

    kind = ModelKind.COMP_TEACHER
    output_scale = 1

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        config = config or ModelConfig(system=SystemName.TEACHER_COMP)
        self.config = config
        k = config.teacher_k
        self.encoder = AnalysisTransform(4, config.width, k, stages=4)
        self.decoder = MirrorSynthesis(k, config.width, 4, stages=4)
        self.entropy = HyperpriorContextModel(k, config.hyper_width(k))

    def encode_latent(self, x):
        return self.encoder(x)

    def decode_latent(self, y_hat):
        return self.decoder(y_hat)


class IspTeacher(nn.Module):
    """sRGB autoencoder whose decoder is layer-for-layer shaped like RBN's

    With isp_teacher_input='srgb' the encoder takes the ground-truth sRGB
    through one extra stride-2 stage so its latent matches RBN's; with
    'raw' it takes packed RAW through RBN's four stages. No rate path.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        config = config or ModelConfig(system=SystemName.TEACHER_ISP)
        self.config = config
        self.input_kind = config.isp_teacher_input
        in_channels, stages = (3, 5) if self.input_kind == "srgb" else (4, 4)
        self.input_channels = in_channels
        rcag = RcagConfig(config.rcag_blocks, config.width, config.reduction)
        self.encoder = AnalysisTransform(in_channels, config.width, config.latent_channels, stages=stages)
        self.decoder = RcagSynthesis(config.latent_channels, config.width, 3, stages=5, rcag=rcag)

    def forward(self, x: torch.Tensor) -> CodecOutput:
        if x.dim() != 4 or x.shape[1] != self.input_channels:
            raise InvalidShape(
                f"ISP teacher ({self.input_kind}) expects {self.input_channels} channels, got {tuple(x.shape)}"
            )
        y, enc_sites = self.encoder(x)
        x_hat, dec_sites = self.decoder(y)
        return CodecOutput(x_hat, x_hat.new_zeros(()), None, enc_sites, dec_sites)


class UnifiedBaseline(LearnedCodec):
    """Context+hyperprior codec widened to 4-channel input with one extra IGDN + upsampling stage"""

    kind = ModelKind.UNIFIED

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        config = config or ModelConfig(system=SystemName.UNIFIED)
        self.config = config
        n = m = config.baseline_channels
        self.encoder = BaselineAnalysis(4, n, m)
        self.decoder = BaselineSynthesis(m, n, 3, extra_stage=True)
        self.entropy = HyperpriorContextModel(m, config.hyper_width(m))

    def encode_latent(self, x):
        return self.encoder(x)

    def decode_latent(self, y_hat):
        return self.decoder(y_hat)


class SrgbCodec(LearnedCodec):
    """Plain 3-channel context+hyperprior codec (the cascaded compression stage)"""

    kind = ModelKind.CASCADED
    input_channels = 3
    input_scale = 1
    output_scale = 1

    def __init__(self, channels: int = 192, hyper_channels: Optional[int] = None):
        super().__init__()
        self.encoder = BaselineAnalysis(3, channels, channels)
        self.decoder = BaselineSynthesis(channels, channels, 3)
        self.entropy = HyperpriorContextModel(channels, hyper_channels or channels)

    def encode_latent(self, x):
        return self.encoder(x)

    def decode_latent(self, y_hat):
        return self.decoder(y_hat)


def cascaded_forward(
    raw: torch.Tensor,
    isp_stage: nn.Module,
    comp_stage: nn.Module,
    mode: str = "round",
) -> CodecOutput:
    """ISP stage, then the compression stage on its (unmodified) sRGB output"""
    intermediate = isp_stage(raw)
    out = comp_stage(intermediate, mode)
    out.intermediate = intermediate
    return out


class CascadedBaseline(LearnedCodec):
    """Separately trained ISP network followed by an sRGB codec"""

    kind = ModelKind.CASCADED
    latent_stride = 8

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        config = config or ModelConfig(system=SystemName.CASCADED)
        self.config = config
        self.isp_stage = CompactIsp(config.isp_width, config.isp_groups, config.rcag_blocks, config.reduction)
        self.comp_stage = SrgbCodec(config.baseline_channels, config.hyper_channels)
        self.joint = False

    @property
    def entropy(self) -> HyperpriorContextModel:
        return self.comp_stage.entropy

    def joint_finetune(self, enabled: bool = True) -> None:
        """Freeze the compression stage so only the ISP stage trains"""
        self.joint = enabled
        self.comp_stage.requires_grad_(not enabled)

    def isp_only(self, raw: torch.Tensor) -> torch.Tensor:
        return self.isp_stage(raw)

    def encode_latent(self, x):
        return self.comp_stage.encode_latent(self.isp_stage(x))

    def decode_latent(self, y_hat):
        return self.comp_stage.decode_latent(y_hat)

    def forward(self, x, mode="noise") -> CodecOutput:
        self.check_input(x)
        return cascaded_forward(x, self.isp_stage, self.comp_stage, mode)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _raw_batch(raw: Union[RawImage, torch.Tensor]) -> torch.Tensor:
    data = raw.data if isinstance(raw, RawImage) else raw
    return data.unsqueeze(0) if data.dim() == 3 else data


@torch.no_grad()
def rbn_encode(raw: Union[RawImage, torch.Tensor], model: LearnedCodec) -> Tuple[QuantizedLatent, QuantizedLatent]:
    """Rounded latent and hyper-latent; dims must already be multiples of 16"""
    x = _raw_batch(raw)
    model.check_input(x)
    y, _ = model.encode_latent(x)
    z = model.entropy.h_a(y)
    return QuantizedLatent(torch.round(y)), QuantizedLatent(model.entropy.quantize_hyper(z))


@torch.no_grad()
def rbn_decode(latents: Tuple[QuantizedLatent, QuantizedLatent], model: LearnedCodec) -> SrgbImage:
    """Decoder output depends on the latent only; the hyper-latent is carried for the bitstream"""
    y_hat = latents[0].y_hat
    if y_hat.dim() == 3:
        y_hat = y_hat.unsqueeze(0)
    x_hat, _ = model.decode_latent(y_hat)
    return SrgbImage(x_hat[0].clamp(0.0, 1.0))


def teacher_forward(model: nn.Module, x: torch.Tensor, mode: str = "round"):
    """Compression teacher -> (raw_hat, rate_bits); ISP teacher -> srgb_hat"""
    if isinstance(model, CompressionTeacher):
        out = model(x, mode)
        return out.x_hat, out.rate_bits
    if isinstance(model, IspTeacher):
        return model(x).x_hat
    raise InvalidSpec(f"{type(model).__name__} is not a teacher")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


_BUILDERS = {
    SystemName.RBN: RbnModel,
    SystemName.UNIFIED: UnifiedBaseline,
    SystemName.CASCADED: CascadedBaseline,
    SystemName.TEACHER_COMP: CompressionTeacher,
    SystemName.TEACHER_ISP: IspTeacher,
}


def build_model(config: ModelConfig) -> nn.Module:
    return _BUILDERS[SystemName(config.system)](config)


def save_checkpoint(
    path: Union[str, Path],
    model: nn.Module,
    config: ModelConfig,
    iteration: int = 0,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """state_dict plus a JSON-serialisable config snapshot"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "config": config.model_dump(mode="json", by_alias=True),
        "iteration": iteration,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    logger.info(f"Saved checkpoint {path} (iteration {iteration})")


def load_checkpoint(
    path: Union[str, Path],
    device: Union[str, torch.device] = "cpu",
) -> Tuple[nn.Module, ModelConfig, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=device, weights_only=False)
    if not isinstance(payload, dict) or "state_dict" not in payload or "config" not in payload:
        raise CheckpointError(f"{path} is not a rawtobit checkpoint")
    config = ModelConfig.model_validate(payload["config"])
    model = build_model(config)
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(device=device, dtype=dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config, payload
