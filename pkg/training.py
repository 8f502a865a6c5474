"""
Training for rawtobit
Rate-distortion loss with the attention term, lambda presets and iteration
budgets, the step learning-rate schedule and a single-process trainer that
writes a CSV loss log and checkpoints for all five systems.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from torch.utils.data import DataLoader

from data_pipeline import PatchStream, RawImage, SrgbImage
from distillation import AttentionDistiller, KdBreakdown, KdConfig
from errors import InvalidShape, InvalidSpec, MissingK, TrainingDiverged
from monitoring import TrainingMonitor
from networks import (
    CascadedBaseline,
    ModelConfig,
    SystemName,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

DISTORTION_SCALE = 255.0 ** 2
RBN_LAMBDAS = (0.0035, 0.0067, 0.013, 0.0483, 0.0932, 0.18, 0.36)
UNIFIED_LAMBDAS = (0.0035, 0.0067, 0.013, 0.025, 0.0483, 0.0932, 0.18)
LOW_RATE_K = 192
HIGH_RATE_K = 320
LOW_RATE_MAX_LAMBDA = 0.013
LR_INITIAL = 5e-5
LR_FINAL = 5e-6
AUX_LR = 1e-3

LOSS_LOG_COLUMNS = ("iter", "L_R", "L_D", "L_AT", "L_total", "lr", "at_enc", "at_dec", "epoch")

# (total iterations, decay iteration, batch size) at full scale
BUDGETS = {
    SystemName.RBN: (1_000_000, 900_000, 8),
    SystemName.TEACHER_COMP: (2_000_000, 1_500_000, 8),
    SystemName.TEACHER_ISP: (580_000, 480_000, 8),
    SystemName.UNIFIED: (1_600_000, 1_500_000, 8),
}
CASCADED_BUDGETS = {
    "isp": (26_400, 24_000, 16),
    "joint": (2_400, 0, 16),
    "codec": (1_600_000, 1_500_000, 8),
}


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class RdLossBreakdown:
    L_R: torch.Tensor
    L_D: torch.Tensor
    L_AT: torch.Tensor
    lmbda: float
    L_total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "L_R": float(self.L_R.detach()),
            "L_D": float(self.L_D.detach()),
            "L_AT": float(self.L_AT.detach()),
            "L_total": float(self.L_total.detach()),
        }


def rd_loss(
    decoded: torch.Tensor,
    ground_truth: torch.Tensor,
    rate_bits: Union[torch.Tensor, float],
    num_pixels: int,
    lmbda: float,
    l_at: Union[torch.Tensor, float] = 0.0,
) -> RdLossBreakdown:
    """L_total = L_R + lambda * L_D + L_AT with L_R in bits per target pixel and L_D = 255^2 * MSE"""
    if decoded.shape != ground_truth.shape:
        raise InvalidShape(f"decoded {tuple(decoded.shape)} vs ground truth {tuple(ground_truth.shape)}")
    if num_pixels <= 0:
        raise InvalidShape(f"num_pixels must be positive, got {num_pixels}")
    rate = torch.as_tensor(rate_bits, dtype=decoded.dtype, device=decoded.device)
    l_at = torch.as_tensor(l_at, dtype=decoded.dtype, device=decoded.device)
    l_r = rate / num_pixels
    l_d = DISTORTION_SCALE * F.mse_loss(decoded, ground_truth)
    return RdLossBreakdown(l_r, l_d, l_at, lmbda, l_r + lmbda * l_d + l_at)


# ---------------------------------------------------------------------------
# Configuration and presets
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    """Everything a training run needs; JSON config files use these keys"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True, protected_namespaces=())

    system: SystemName = SystemName.RBN
    lmbda: Optional[float] = Field(None, alias="lambda", gt=0)
    batch_size: int = Field(8, ge=1)
    total_iters: int = Field(1_000_000, ge=1)
    lr_initial: float = Field(LR_INITIAL, gt=0)
    lr_final: float = Field(LR_FINAL, gt=0)
    lr_decay_iter: int = Field(900_000, ge=0)
    aux_lr: float = Field(AUX_LR, gt=0)
    seed: int = 0
    kd: KdConfig = Field(default_factory=KdConfig)
    K: Optional[int] = Field(None, gt=0)
    quality_index: int = Field(0, ge=0, le=255)
    patch_size: int = Field(128, ge=16)
    iters_per_epoch: Optional[int] = Field(None, ge=1)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    dtype: str = Field("float32", pattern="^(float32|float64)$")
    num_workers: int = Field(0, ge=0)
    stage: str = Field("codec", pattern="^(isp|codec|joint)$")
    log_every: int = Field(10, ge=1)
    checkpoint_every: Optional[int] = Field(None, ge=1)
    comp_teacher: Optional[str] = None
    isp_teacher: Optional[str] = None
    init_checkpoint: Optional[str] = None
    device: str = "cpu"
    model: ModelConfig = Field(default_factory=ModelConfig)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def distortion_only(self) -> bool:
        return self.system is SystemName.TEACHER_ISP or (
            self.system is SystemName.CASCADED and self.stage in ("isp", "joint")
        )

    def effective_lambda(self) -> float:
        if self.distortion_only:
            return 1.0
        if self.lmbda is None:
            raise InvalidSpec(f"system {self.system.value} needs a lambda")
        return self.lmbda

    def model_settings(self) -> ModelConfig:
        """ModelConfig for this run with system, lambda, quality index and K filled in"""
        updates: Dict[str, Any] = {
            "system": self.system,
            "lmbda": self.lmbda,
            "quality_index": self.quality_index,
        }
        if self.system is SystemName.TEACHER_COMP:
            updates["teacher_k"] = teacher_k_for(self.lmbda, self.K) if self.lmbda else (self.K or LOW_RATE_K)
        return self.model.model_copy(update=updates)


@dataclass
class SchedulePreset:
    system: SystemName
    lmbda: Optional[float]
    total_iters: int
    lr_decay_iter: int
    batch_size: int
    quality_index: int = 0
    K: Optional[int] = None
    stage: str = "codec"
    lr_initial: float = LR_INITIAL
    lr_final: float = LR_FINAL

    def as_config_values(self) -> Dict[str, Any]:
        values = asdict(self)
        values["lambda"] = values.pop("lmbda")
        if values["lambda"] is None:
            values.pop("lambda")
        if values["K"] is None:
            values.pop("K")
        return values


def teacher_k_for(lmbda: Optional[float], K: Optional[int] = None) -> int:
    """Compression teacher latent width: 192 up to lambda 0.013, 320 above"""
    if K is not None:
        return K
    if lmbda is None or not any(math.isclose(lmbda, known) for known in RBN_LAMBDAS):
        raise MissingK(f"lambda {lmbda} is not a preset; give the teacher latent width K explicitly")
    return LOW_RATE_K if lmbda <= LOW_RATE_MAX_LAMBDA else HIGH_RATE_K


def _scaled(iters: int, scale: float) -> int:
    return max(1, int(round(iters * scale)))


def _scaled_decay(total: int, decay: int, scale: float) -> int:
    if decay >= total:
        return _scaled(total, scale)
    return int(round(decay * scale))


def train_schedule_presets(scale: float = 1.0) -> Dict[str, Dict[Optional[float], SchedulePreset]]:
    """Lambda -> preset per system; scale multiplies every iteration count"""
    if scale <= 0:
        raise InvalidSpec(f"scale must be positive, got {scale}")
    presets: Dict[str, Dict[Optional[float], SchedulePreset]] = {}

    def budget(total: int, decay: int) -> Tuple[int, int]:
        return _scaled(total, scale), _scaled_decay(total, decay, scale)

    for system, lambdas in (
        (SystemName.RBN, RBN_LAMBDAS),
        (SystemName.TEACHER_COMP, RBN_LAMBDAS),
        (SystemName.UNIFIED, UNIFIED_LAMBDAS),
    ):
        total, decay, batch = BUDGETS[system]
        total, decay = budget(total, decay)
        presets[system.value] = {
            lmbda: SchedulePreset(
                system, lmbda, total, decay, batch, quality_index=index,
                K=teacher_k_for(lmbda) if system is not SystemName.UNIFIED else None,
            )
            for index, lmbda in enumerate(lambdas)
        }

    total, decay, batch = BUDGETS[SystemName.TEACHER_ISP]
    total, decay = budget(total, decay)
    presets[SystemName.TEACHER_ISP.value] = {
        None: SchedulePreset(SystemName.TEACHER_ISP, None, total, decay, batch)
    }

    cascaded: Dict[Optional[float], SchedulePreset] = {}
    isp_total, isp_decay, isp_batch = CASCADED_BUDGETS["isp"]
    isp_total, isp_decay = budget(isp_total, isp_decay)
    cascaded[None] = SchedulePreset(SystemName.CASCADED, None, isp_total, isp_decay, isp_batch, stage="isp")
    codec_total, codec_decay, codec_batch = CASCADED_BUDGETS["codec"]
    codec_total, codec_decay = budget(codec_total, codec_decay)
    for index, lmbda in enumerate(UNIFIED_LAMBDAS):
        cascaded[lmbda] = SchedulePreset(
            SystemName.CASCADED, lmbda, codec_total, codec_decay, codec_batch,
            quality_index=index, stage="codec",
        )
    presets[SystemName.CASCADED.value] = cascaded

    joint_total, _, joint_batch = CASCADED_BUDGETS["joint"]
    # joint fine-tuning keeps the quality index of the codec it starts from
    presets["cascaded-joint"] = {
        lmbda: SchedulePreset(
            SystemName.CASCADED, lmbda, _scaled(joint_total, scale), 0, joint_batch,
            quality_index=index, stage="joint", lr_initial=LR_FINAL, lr_final=LR_FINAL,
        )
        for index, lmbda in [(0, None)] + list(enumerate(UNIFIED_LAMBDAS))
    }
    return presets


def find_preset(
    system: SystemName,
    lmbda: Optional[float],
    stage: str = "codec",
    scale: float = 1.0,
) -> Optional[SchedulePreset]:
    presets = train_schedule_presets(scale)
    key = "cascaded-joint" if system is SystemName.CASCADED and stage == "joint" else system.value
    table = presets.get(key, {})
    if system is SystemName.CASCADED and stage == "isp":
        return table.get(None)
    if system is SystemName.CASCADED and stage == "codec" and lmbda is None:
        return None
    for known, preset in table.items():
        if known is None and lmbda is None:
            return preset
        if known is not None and lmbda is not None and math.isclose(known, lmbda):
            return preset
    if None in table:
        return table[None]
    return None


def resolve_train_config(
    system: Union[str, SystemName],
    lmbda: Optional[float] = None,
    file_values: Optional[Dict[str, Any]] = None,
    cli_values: Optional[Dict[str, Any]] = None,
    scale: float = 1.0,
) -> TrainConfig:
    """Merge preset < config file < CLI flags and validate"""
    system = SystemName(system)
    file_values = dict(file_values or {})
    cli_values = {k: v for k, v in (cli_values or {}).items() if v is not None}
    if lmbda is None:
        lmbda = cli_values.get("lambda", file_values.get("lambda", file_values.get("lmbda")))
    stage = cli_values.get("stage", file_values.get("stage", "codec"))

    values: Dict[str, Any] = {"system": system.value}
    preset = find_preset(system, lmbda, stage, scale)
    if preset is not None:
        values.update(preset.as_config_values())
        values["system"] = system.value
    else:
        logger.warning(f"No preset for {system.value} at lambda {lmbda}; using config values only")
    values.update(file_values)
    values.update(cli_values)
    if lmbda is not None and "lmbda" not in values:
        values["lambda"] = lmbda
    if "lmbda" in values and "lambda" in values:
        values.pop("lmbda")
    try:
        config = TrainConfig.model_validate(values)
    except ValidationError as e:
        raise InvalidSpec(f"invalid training config: {e}")
    if config.system is SystemName.TEACHER_COMP:
        teacher_k_for(config.lmbda, config.K)
    return config


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Step schedule: lr_initial before lr_decay_iter, lr_final from it on"""
    return config.lr_initial if iteration < config.lr_decay_iter else config.lr_final


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log_path: Path
    history: List[Dict[str, float]] = field(default_factory=list)
    monitor_report: Dict[str, Any] = field(default_factory=dict)


def ema(values: Sequence[float], decay: float = 0.9) -> List[float]:
    out: List[float] = []
    current = None
    for value in values:
        current = value if current is None else decay * current + (1 - decay) * value
        out.append(current)
    return out


def load_teacher(path: Optional[str], device: str, dtype: torch.dtype) -> Optional[nn.Module]:
    if not path:
        return None
    model, _, _ = load_checkpoint(path, device)
    return model.to(dtype=dtype)


class Trainer:
    """Single-process optimization loop with Adam, gradient clipping and a CSV loss log"""

    def __init__(
        self,
        config: TrainConfig,
        pairs: Sequence[Tuple[RawImage, SrgbImage]],
        out_dir: Union[str, Path],
        model: Optional[nn.Module] = None,
        comp_teacher: Optional[nn.Module] = None,
        isp_teacher: Optional[nn.Module] = None,
        monitor: Optional[TrainingMonitor] = None,
    ):
        if not pairs:
            raise InvalidSpec("training needs at least one image pair")
        self.config = config
        self.pairs = list(pairs)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.device = torch.device(config.device)
        self.dtype = config.torch_dtype
        self.lmbda = config.effective_lambda()
        self.model_config = config.model_settings()

        torch.manual_seed(config.seed)
        if model is None:
            model = build_model(self.model_config)
            if config.init_checkpoint:
                initial, _, _ = load_checkpoint(config.init_checkpoint, config.device)
                model.load_state_dict(initial.state_dict())
        self.model = model.to(device=self.device, dtype=self.dtype)
        self.model.train()
        if isinstance(self.model, CascadedBaseline):
            self.model.joint_finetune(config.stage == "joint")
            if config.stage == "isp":
                self.model.comp_stage.requires_grad_(False)
            elif config.stage == "codec":
                self.model.isp_stage.requires_grad_(False)

        self.distiller: Optional[AttentionDistiller] = None
        if config.system is SystemName.RBN:
            if comp_teacher is None:
                comp_teacher = load_teacher(config.comp_teacher, config.device, self.dtype)
            if isp_teacher is None:
                isp_teacher = load_teacher(config.isp_teacher, config.device, self.dtype)
            for teacher in (comp_teacher, isp_teacher):
                if teacher is not None:
                    teacher.to(device=self.device, dtype=self.dtype)
            kd = self._usable_kd(config.kd, comp_teacher, isp_teacher)
            self.distiller = AttentionDistiller(kd, comp_teacher, isp_teacher)

        # bottleneck quantiles only learn from the aux loss
        self.params = [
            p for name, p in self.model.named_parameters()
            if p.requires_grad and not name.endswith(".quantiles")
        ]
        self.optimizer = torch.optim.Adam(self.params, lr=config.lr_initial)
        aux_params = [
            p for name, p in self.model.named_parameters()
            if p.requires_grad and name.endswith(".quantiles")
        ]
        self.aux_optimizer: Optional[torch.optim.Optimizer] = None
        if aux_params and hasattr(self.model, "aux_loss"):
            self.aux_optimizer = torch.optim.Adam(aux_params, lr=config.aux_lr)
        self.iters_per_epoch = config.iters_per_epoch or math.ceil(len(self.pairs) / config.batch_size)
        self.monitor = monitor or TrainingMonitor()
        self.loss_log_path = self.out_dir / "loss_log.csv"
        self.history: List[Dict[str, float]] = []

    @staticmethod
    def _usable_kd(kd: KdConfig, comp_teacher, isp_teacher) -> KdConfig:
        enc = kd.encoder.model_copy()
        dec = kd.decoder.model_copy()
        if enc.enabled and comp_teacher is None:
            logger.warning("Encoder KD requested without a compression teacher; disabling it")
            enc.enabled = False
        if dec.enabled and isp_teacher is None:
            logger.warning("Decoder KD requested without an ISP teacher; disabling it")
            dec.enabled = False
        return KdConfig(encoder=enc, decoder=dec)

    def _loader(self) -> DataLoader:
        stream = PatchStream(self.pairs, self.config.patch_size, self.config.seed)
        return DataLoader(stream, batch_size=self.config.batch_size, num_workers=self.config.num_workers)

    def compute_loss(self, raw: torch.Tensor, srgb: torch.Tensor) -> Tuple[RdLossBreakdown, KdBreakdown]:
        """Forward one batch and assemble L_total for the configured system"""
        system = self.config.system
        num_pixels = srgb.shape[0] * srgb.shape[-2] * srgb.shape[-1]
        zero = raw.new_zeros(())
        kd = KdBreakdown(zero)

        if system is SystemName.TEACHER_COMP:
            out = self.model(raw, "noise")
            return rd_loss(out.x_hat, raw, out.rate_bits, num_pixels, self.lmbda), kd
        if system is SystemName.TEACHER_ISP:
            teacher_input = srgb if self.model.input_kind == "srgb" else raw
            out = self.model(teacher_input)
            return rd_loss(out.x_hat, srgb, zero, num_pixels, self.lmbda), kd
        if system is SystemName.CASCADED:
            if self.config.stage == "isp":
                decoded = self.model.isp_only(raw)
                return rd_loss(decoded, srgb, zero, num_pixels, self.lmbda), kd
            if self.config.stage == "codec":
                out = self.model.comp_stage(srgb, "noise")
                return rd_loss(out.x_hat, srgb, out.rate_bits, num_pixels, self.lmbda), kd
            out = self.model(raw, "noise")
            return rd_loss(out.x_hat, srgb, zero, num_pixels, self.lmbda), kd

        out = self.model(raw, "noise")
        if self.distiller is not None:
            kd = self.distiller(out.enc_sites, out.dec_sites, raw, srgb)
        return rd_loss(out.x_hat, srgb, out.rate_bits, num_pixels, self.lmbda, kd.l_at), kd

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def checkpoint(self, name: str, iteration: int) -> Path:
        path = self.out_dir / name
        save_checkpoint(
            path, self.model, self.model_config, iteration,
            extra={"train_config": self.config.model_dump(mode="json", by_alias=True)},
        )
        return path

    def train(self) -> TrainResult:
        cfg = self.config
        logger.info(
            f"Training {cfg.system.value} (lambda={cfg.lmbda}, stage={cfg.stage}) "
            f"for {cfg.total_iters} iterations, batch {cfg.batch_size}"
        )
        batches = iter(self._loader())
        with open(self.loss_log_path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=LOSS_LOG_COLUMNS)
            writer.writeheader()
            for iteration in range(cfg.total_iters):
                epoch = iteration // self.iters_per_epoch
                if self.distiller is not None:
                    self.distiller.set_epoch(epoch)
                lr = lr_at(iteration, cfg)
                self._set_lr(lr)

                batch = next(batches)
                raw = batch["raw"].to(device=self.device, dtype=self.dtype)
                srgb = batch["srgb"].to(device=self.device, dtype=self.dtype)

                self.optimizer.zero_grad(set_to_none=True)
                loss, kd = self.compute_loss(raw, srgb)
                if not torch.isfinite(loss.L_total):
                    snapshot = self.checkpoint("nan_snapshot.pt", iteration)
                    raise TrainingDiverged(f"loss became {float(loss.L_total)} at iteration {iteration}", str(snapshot))
                loss.L_total.backward()
                if cfg.grad_clip:
                    nn.utils.clip_grad_norm_(self.params, cfg.grad_clip)
                self.optimizer.step()
                if self.aux_optimizer is not None:
                    self.aux_optimizer.zero_grad(set_to_none=True)
                    self.model.aux_loss().backward()
                    self.aux_optimizer.step()

                row = {"iter": iteration, **loss.as_floats(), "lr": lr,
                       "at_enc": kd.at_enc, "at_dec": kd.at_dec, "epoch": epoch}
                writer.writerow(row)
                self.history.append(row)
                self.monitor.record_step()

                if iteration % cfg.log_every == 0 or iteration == cfg.total_iters - 1:
                    snapshot = self.monitor.sample()
                    logger.info(
                        f"iter {iteration}: L_total={row['L_total']:.4f} L_R={row['L_R']:.4f} "
                        f"L_D={row['L_D']:.2f} L_AT={row['L_AT']:.4f} lr={lr:.1e} "
                        f"rss={snapshot.rss_mb:.0f}MB it/s={snapshot.iterations_per_second:.2f}"
                    )
                if cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
                    self.checkpoint(f"checkpoint_{iteration + 1:07d}.pt", iteration + 1)

        final = self.checkpoint("checkpoint_final.pt", cfg.total_iters)
        return TrainResult(final, self.loss_log_path, self.history, self.monitor.report())


def train(
    system: Union[str, SystemName],
    config: TrainConfig,
    dataset: Sequence[Tuple[RawImage, SrgbImage]],
    out_dir: Union[str, Path],
    **kwargs: Any,
) -> TrainResult:
    if SystemName(system) is not config.system:
        config = config.model_copy(update={"system": SystemName(system)})
    return Trainer(config, dataset, out_dir, **kwargs).train()


def read_loss_log(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    return {column: np.array([float(r[column]) for r in rows]) for column in LOSS_LOG_COLUMNS if rows and column in rows[0]}
