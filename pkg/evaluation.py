"""
Evaluation for rawtobit
PSNR and bpp at sRGB resolution through the real bitstream path, RD sweeps
over checkpoints with CSV and plot output, error maps and loss plots.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import matplotlib as mpl
import numpy as np
import torch

from bitcodec import Bitstream, deserialize, serialize
from data_pipeline import RawImage, SrgbImage
from errors import InvalidShape, InvalidSpec
from networks import (
    CascadedBaseline,
    CompressionTeacher,
    LearnedCodec,
    SystemName,
    load_checkpoint,
    pad_to_multiple,
)
from training import read_loss_log, ema

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

PSNR_INF = math.inf
ERROR_FULL_SCALE = 0.25
RD_CSV_COLUMNS = ("system", "lambda", "bpp", "psnr_db", "n_images")
SYSTEM_STYLES = {
    SystemName.RBN.value: ("RBN", "tab:red", "o"),
    SystemName.UNIFIED.value: ("Unified", "tab:blue", "s"),
    SystemName.CASCADED.value: ("Cascaded", "tab:green", "^"),
    SystemName.TEACHER_COMP.value: ("Compression teacher", "tab:purple", "d"),
}

ImageLike = Union[SrgbImage, torch.Tensor, np.ndarray]


def _as_array(image: ImageLike) -> np.ndarray:
    if isinstance(image, SrgbImage):
        image = image.data
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def psnr(a: ImageLike, b: ImageLike) -> float:
    """-10 log10(MSE) on [0, 1] data after clamping; identical images give +inf"""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InvalidShape(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return -10.0 * math.log10(mse)


def bpp(stream: Union[Bitstream, bytes, int], height: int, width: int) -> float:
    """8 * file bytes / (H * W) at sRGB resolution"""
    if height <= 0 or width <= 0:
        raise InvalidShape(f"bpp needs a positive size, got {height}x{width}")
    n_bytes = stream if isinstance(stream, int) else len(stream)
    return 8.0 * n_bytes / (height * width)


def mean_psnr(values: Sequence[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    if len(finite) < len(values):
        logger.warning(f"Excluding {len(values) - len(finite)} lossless image(s) from the PSNR average")
    if not finite:
        return PSNR_INF
    return float(np.mean(finite))


# ---------------------------------------------------------------------------
# Per-system evaluation
# ---------------------------------------------------------------------------

@dataclass
class RDPoint:
    system: str
    lmbda: Optional[float]
    bpp: float
    psnr_db: float
    image_count: int


@dataclass
class ImageResult:
    source_id: Optional[str]
    file_bytes: int
    estimated_bits: float
    bpp: float
    psnr_db: float


def _model_device(model: torch.nn.Module) -> Tuple[torch.device, torch.dtype]:
    reference = next(model.parameters())
    return reference.device, reference.dtype


@torch.no_grad()
def evaluate_image(model: LearnedCodec, raw: RawImage, srgb: SrgbImage, quality_index: int = 0) -> ImageResult:
    """compress -> serialize -> deserialize -> decompress for one pair"""
    device, dtype = _model_device(model)
    x = raw.data.unsqueeze(0).to(device=device, dtype=dtype)
    stream = model.compress(x, quality_index)
    data = serialize(stream)
    decoded = model.decompress(deserialize(data), quality_index)[0]

    padded, _ = pad_to_multiple(x, model.pad_multiple)
    estimated = float(model(padded, "round").rate_bits)

    if isinstance(model, CompressionTeacher):
        target = raw.data
        height, width = 2 * raw.height, 2 * raw.width
    else:
        target = srgb.data
        height, width = srgb.height, srgb.width
    return ImageResult(
        source_id=srgb.source_id or raw.source_id,
        file_bytes=len(data),
        estimated_bits=estimated,
        bpp=bpp(len(data), height, width),
        psnr_db=psnr(decoded.cpu(), target),
    )


def evaluate_system(
    model: LearnedCodec,
    pairs: Sequence[Tuple[RawImage, SrgbImage]],
    quality_index: int = 0,
    system: Optional[str] = None,
    lmbda: Optional[float] = None,
) -> Tuple[RDPoint, List[ImageResult]]:
    """Average bpp and PSNR over a set of pairs"""
    if not pairs:
        raise InvalidSpec("evaluation needs at least one image pair")
    model.eval()
    results = [evaluate_image(model, raw, srgb, quality_index) for raw, srgb in pairs]
    if system is None:
        config = getattr(model, "config", None)
        system = config.system.value if config is not None else type(model).__name__
    point = RDPoint(
        system=system,
        lmbda=lmbda,
        bpp=float(np.mean([r.bpp for r in results])),
        psnr_db=mean_psnr([r.psnr_db for r in results]),
        image_count=len(results),
    )
    logger.info(f"{point.system} lambda={lmbda}: {point.bpp:.4f} bpp, {point.psnr_db:.2f} dB over {len(results)} images")
    return point, results


@torch.no_grad()
def isp_only_psnr(model: CascadedBaseline, pairs: Sequence[Tuple[RawImage, SrgbImage]]) -> float:
    """PSNR of the cascaded ISP stage without compression; the ceiling of its RD curve"""
    device, dtype = _model_device(model)
    values = []
    for raw, srgb in pairs:
        x = raw.data.unsqueeze(0).to(device=device, dtype=dtype)
        values.append(psnr(model.isp_only(x)[0].clamp(0.0, 1.0).cpu(), srgb))
    return mean_psnr(values)


def rd_sweep(
    checkpoints: Sequence[Union[str, Path]],
    pairs: Sequence[Tuple[RawImage, SrgbImage]],
    out_dir: Union[str, Path],
    device: str = "cpu",
) -> List[RDPoint]:
    """One RD point per checkpoint, written to rd_points.csv and rd_curve.png"""
    if not checkpoints:
        raise InvalidSpec("rd_sweep needs at least one checkpoint")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    points: List[RDPoint] = []
    ceilings: Dict[str, float] = {}
    for path in checkpoints:
        try:
            model, config, _ = load_checkpoint(path, device)
        except FileNotFoundError:
            logger.warning(f"Skipping missing checkpoint {path}")
            continue
        if not isinstance(model, LearnedCodec):
            logger.warning(f"Skipping {path}: {config.system.value} has no bitstream")
            continue
        point, _ = evaluate_system(model, pairs, config.quality_index, config.system.value, config.lmbda)
        points.append(point)
        if isinstance(model, CascadedBaseline):
            ceiling = isp_only_psnr(model, pairs)
            ceilings[config.system.value] = max(ceilings.get(config.system.value, -math.inf), ceiling)

    points.sort(key=lambda p: (p.system, p.bpp))
    write_rd_csv(points, out_dir / "rd_points.csv")
    if points:
        plot_rd_curves(points, out_dir / "rd_curve.png", ceilings)
    return points


def write_rd_csv(points: Sequence[RDPoint], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RD_CSV_COLUMNS)
        for p in points:
            writer.writerow([p.system, "" if p.lmbda is None else p.lmbda, p.bpp, p.psnr_db, p.image_count])


def read_rd_csv(path: Union[str, Path]) -> List[RDPoint]:
    with open(path, newline="") as handle:
        return [
            RDPoint(
                system=row["system"],
                lmbda=float(row["lambda"]) if row["lambda"] else None,
                bpp=float(row["bpp"]),
                psnr_db=float(row["psnr_db"]),
                image_count=int(row["n_images"]),
            )
            for row in csv.DictReader(handle)
        ]


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def plot_rd_curves(
    points: Sequence[RDPoint],
    path: Union[str, Path],
    ceilings: Optional[Dict[str, float]] = None,
) -> None:
    """PSNR vs bpp per system; a system with a ceiling is clipped to it and the ceiling drawn dashed"""
    ceilings = ceilings or {}
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for system in sorted({p.system for p in points}):
        series = sorted((p for p in points if p.system == system), key=lambda p: p.bpp)
        label, color, marker = SYSTEM_STYLES.get(system, (system, None, "o"))
        x = np.array([p.bpp for p in series])
        y = np.array([p.psnr_db for p in series])
        if system in ceilings:
            y = np.minimum(y, ceilings[system])
            ax.axhline(ceilings[system], color=color, linestyle="--", linewidth=1,
                       label=f"{label} ISP only ({ceilings[system]:.2f} dB)")
        ax.plot(x, y, marker=marker, color=color, label=label)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"Wrote RD curve to {path}")


def plot_loss_curves(
    logs: Dict[str, Union[str, Path]],
    path: Union[str, Path],
    column: str = "L_total",
    smoothing: float = 0.9,
) -> None:
    """One smoothed loss curve per labelled loss log"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, log_path in logs.items():
        log = read_loss_log(log_path)
        ax.plot(log["iter"], ema(log[column], smoothing), label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(column)
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_attention_curves(
    logs: Dict[str, Union[str, Path]],
    path: Union[str, Path],
    smoothing: float = 0.9,
) -> None:
    """Encoder and decoder attention loss side by side, one curve per run"""
    fig, (enc_ax, dec_ax) = plt.subplots(1, 2, figsize=(10, 4))
    for label, log_path in logs.items():
        log = read_loss_log(log_path)
        enc_ax.plot(log["iter"], ema(log["at_enc"], smoothing), label=label)
        dec_ax.plot(log["iter"], ema(log["at_dec"], smoothing), label=label)
    for ax, title in ((enc_ax, "encoder attention loss"), (dec_ax, "decoder attention loss")):
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


@dataclass
class ErrorMap:
    mae: np.ndarray  # (H, W) mean absolute error over channels
    image: np.ndarray  # (H, W, 3) uint8 BGR

    @property
    def height(self) -> int:
        return self.mae.shape[0]

    @property
    def width(self) -> int:
        return self.mae.shape[1]


def error_map(
    gt: ImageLike,
    recon: ImageLike,
    path: Optional[Union[str, Path]] = None,
    full_scale: float = ERROR_FULL_SCALE,
) -> ErrorMap:
    """Per-pixel MAE over channels rendered with the JET colormap at a fixed full scale"""
    gt, recon = _as_array(gt), _as_array(recon)
    if gt.shape != recon.shape:
        raise InvalidShape(f"error map needs equal shapes, got {gt.shape} and {recon.shape}")
    mae = np.abs(np.clip(gt, 0.0, 1.0) - np.clip(recon, 0.0, 1.0)).mean(axis=0)
    level = np.round(np.clip(mae / full_scale, 0.0, 1.0) * 255.0).astype(np.uint8)
    image = cv2.applyColorMap(level, cv2.COLORMAP_JET)
    if path is not None:
        cv2.imwrite(str(path), image)
    return ErrorMap(mae, image)
