"""
Attention-transfer knowledge distillation for rawtobit
Signed channel-sum attention maps, the L2-normalized attention loss, the
alpha0 * gamma^(k^2) weight schedule and the pairing of RBN sites with the
compression teacher (encoder) and ISP teacher (decoder).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidShape, InvalidSpec

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
ENCODER_SITES = 4
DECODER_SITES = 5


class TeacherKind(str, Enum):
    COMPRESSION = "compression"
    ISP = "isp"


class AblationVariant(str, Enum):
    NO_KD = "no-kd"
    ENC_ONLY = "enc-only"
    DEC_ONLY = "dec-only"
    ABS_ATTENTION = "abs-attention"


class KdGroupConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha0: float = Field(1e6, gt=0)
    gamma: float = Field(0.99999, gt=0, lt=1)
    abs_mode: bool = False
    enabled: bool = True


class KdConfig(BaseModel):
    """Per-group KD settings; encoder pairs learn from the compression teacher, decoder pairs from the ISP teacher"""
    model_config = ConfigDict(extra="forbid")

    encoder: KdGroupConfig = Field(default_factory=lambda: KdGroupConfig(alpha0=1e6))
    decoder: KdGroupConfig = Field(default_factory=lambda: KdGroupConfig(alpha0=1e5))

    def with_variant(self, variant: AblationVariant) -> "KdConfig":
        variant = AblationVariant(variant)
        enc = self.encoder.model_copy()
        dec = self.decoder.model_copy()
        if variant is AblationVariant.NO_KD:
            enc.enabled = dec.enabled = False
        elif variant is AblationVariant.ENC_ONLY:
            enc.enabled, dec.enabled = True, False
        elif variant is AblationVariant.DEC_ONLY:
            enc.enabled, dec.enabled = False, True
        elif variant is AblationVariant.ABS_ATTENTION:
            enc.abs_mode = dec.abs_mode = True
        return KdConfig(encoder=enc, decoder=dec)

    @property
    def any_enabled(self) -> bool:
        return self.encoder.enabled or self.decoder.enabled


@dataclass
class AttentionPairSpec:
    student_site: str
    teacher_site: str
    teacher_kind: TeacherKind
    alpha0: float
    gamma: float
    abs_mode: bool = False

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise InvalidSpec(f"alpha0 must be positive, got {self.alpha0}")
        if not 0 < self.gamma < 1:
            raise InvalidSpec(f"gamma must lie in (0, 1), got {self.gamma}")


@dataclass
class KdState:
    """Epoch counter and the current alpha of every pair"""
    epoch: int = 0
    alphas: Dict[str, float] = field(default_factory=dict)

    def update(self, epoch: int, pairs: Sequence[AttentionPairSpec]) -> None:
        if epoch < 0:
            raise InvalidSpec(f"epoch must be >= 0, got {epoch}")
        self.epoch = epoch
        self.alphas = {p.student_site: decay_weight(p.alpha0, p.gamma, epoch) for p in pairs}


# ---------------------------------------------------------------------------
# Equations of the attention loss
# ---------------------------------------------------------------------------

def attention_map(activation: torch.Tensor, abs_mode: bool = False) -> torch.Tensor:
    """Channel sum of a (C, H, W) or (N, C, H, W) activation; abs_mode sums |A|"""
    if activation.dim() not in (3, 4):
        raise InvalidShape(f"expected (C, H, W) or (N, C, H, W), got {tuple(activation.shape)}")
    if abs_mode:
        activation = activation.abs()
    return activation.sum(dim=-3)


def attention_loss_term(student_map: torch.Tensor, teacher_map: torch.Tensor) -> torch.Tensor:
    """(1/N_j) || M_S/||M_S|| - M_T/||M_T|| ||^2, averaged over a batch of maps

    Maps whose L2 norm is below 1e-12 contribute 0. The teacher map never
    receives gradient.
    """
    if student_map.shape != teacher_map.shape:
        raise InvalidShape(
            f"student map {tuple(student_map.shape)} vs teacher map {tuple(teacher_map.shape)}"
        )
    single = student_map.dim() == 2
    s = student_map.reshape(1 if single else student_map.shape[0], -1)
    t = teacher_map.detach().reshape(s.shape)
    n_j = s.shape[1]
    s_norm = s.norm(dim=1, keepdim=True)
    t_norm = t.norm(dim=1, keepdim=True)
    valid = (s_norm > NORM_EPS) & (t_norm > NORM_EPS)
    s_unit = s / torch.where(valid, s_norm, torch.ones_like(s_norm))
    t_unit = t / torch.where(valid, t_norm, torch.ones_like(t_norm))
    per_sample = ((s_unit - t_unit) ** 2).sum(dim=1) / n_j
    per_sample = torch.where(valid.squeeze(1), per_sample, torch.zeros_like(per_sample))
    return per_sample.mean()


def decay_weight(alpha0: float, gamma: float, k: int) -> float:
    """alpha0 * gamma^(k^2)"""
    if k < 0:
        raise InvalidSpec(f"epoch must be >= 0, got {k}")
    return alpha0 * gamma ** (k * k)


def total_attention_loss(pairs: Sequence[Tuple[torch.Tensor, torch.Tensor, float]]) -> torch.Tensor:
    """sum_j alpha_j * L_AT^j; zero for an empty list"""
    total = torch.zeros(())
    for student_map, teacher_map, alpha in pairs:
        total = total.to(student_map) + alpha * attention_loss_term(student_map, teacher_map)
    return total


def build_pairs(
    kd: KdConfig,
    encoder_sites: int = ENCODER_SITES,
    decoder_sites: int = DECODER_SITES,
    include_disabled: bool = False,
) -> List[AttentionPairSpec]:
    """Encoder site i pairs with the compression teacher's site i, decoder site i with the ISP teacher's"""
    pairs = []
    groups = (
        (kd.encoder, "enc", encoder_sites, TeacherKind.COMPRESSION),
        (kd.decoder, "dec", decoder_sites, TeacherKind.ISP),
    )
    for group, prefix, count, kind in groups:
        if not group.enabled and not include_disabled:
            continue
        for i in range(count):
            site = f"{prefix}{i}"
            pairs.append(AttentionPairSpec(site, site, kind, group.alpha0, group.gamma, group.abs_mode))
    return pairs


def site_activation(sites: Dict[str, List[torch.Tensor]], name: str) -> torch.Tensor:
    prefix, index = name[:3], int(name[3:])
    return sites[prefix][index]


# ---------------------------------------------------------------------------
# Distiller
# ---------------------------------------------------------------------------

@dataclass
class KdBreakdown:
    l_at: torch.Tensor
    at_enc: float = 0.0
    at_dec: float = 0.0


class AttentionDistiller:
    """Collects teacher sites and turns student/teacher activations into L_AT

    at_enc / at_dec are the unweighted sums of the encoder and decoder
    terms; they are reported even for disabled groups whenever the
    matching teacher is loaded, so runs without KD still log the curves.
    """

    def __init__(
        self,
        kd: KdConfig,
        comp_teacher: Optional[nn.Module] = None,
        isp_teacher: Optional[nn.Module] = None,
    ):
        self.kd = kd
        self.comp_teacher = comp_teacher
        self.isp_teacher = isp_teacher
        self.pairs = build_pairs(kd)
        self.monitor_pairs = build_pairs(kd, include_disabled=True)
        self.state = KdState()
        self.state.update(0, self.pairs)
        for teacher in (comp_teacher, isp_teacher):
            if teacher is not None:
                teacher.eval()
                teacher.requires_grad_(False)
        if kd.encoder.enabled and comp_teacher is None:
            raise InvalidSpec("encoder KD is enabled but no compression teacher was given")
        if kd.decoder.enabled and isp_teacher is None:
            raise InvalidSpec("decoder KD is enabled but no ISP teacher was given")
        logger.info(f"Attention distiller with {len(self.pairs)} active pairs")

    def set_epoch(self, epoch: int) -> None:
        self.state.update(epoch, self.pairs)

    @torch.no_grad()
    def teacher_sites(self, raw: torch.Tensor, srgb: torch.Tensor) -> Dict[str, List[torch.Tensor]]:
        sites: Dict[str, List[torch.Tensor]] = {"enc": [], "dec": []}
        if self.comp_teacher is not None:
            _, sites["enc"] = self.comp_teacher.encoder(raw)
        if self.isp_teacher is not None:
            teacher_input = srgb if self.isp_teacher.input_kind == "srgb" else raw
            sites["dec"] = self.isp_teacher(teacher_input).dec_sites
        return sites

    def __call__(
        self,
        student_enc: List[torch.Tensor],
        student_dec: List[torch.Tensor],
        raw: torch.Tensor,
        srgb: torch.Tensor,
    ) -> KdBreakdown:
        reference = student_enc[0] if student_enc else raw
        if self.comp_teacher is None and self.isp_teacher is None:
            return KdBreakdown(reference.new_zeros(()))
        teacher = self.teacher_sites(raw, srgb)
        student = {"enc": student_enc, "dec": student_dec}

        weighted = []
        monitor = {"enc": 0.0, "dec": 0.0}
        active = {p.student_site for p in self.pairs}
        for spec in self.monitor_pairs:
            group = spec.student_site[:3]
            if not teacher[group]:
                continue
            s_map = attention_map(site_activation(student, spec.student_site), spec.abs_mode)
            t_map = attention_map(site_activation(teacher, spec.teacher_site), spec.abs_mode)
            if spec.student_site in active:
                term = attention_loss_term(s_map, t_map)
                weighted.append(self.state.alphas[spec.student_site] * term)
                monitor[group] += float(term.detach())
            else:
                with torch.no_grad():
                    monitor[group] += float(attention_loss_term(s_map, t_map))
        l_at = torch.stack(weighted).sum() if weighted else reference.new_zeros(())
        return KdBreakdown(l_at, monitor["enc"], monitor["dec"])
