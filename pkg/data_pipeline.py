"""
RAW/sRGB data pipeline for rawtobit
RGGB packing, sensor normalization, aligned patch extraction with
Bayer-aware augmentation, dataset splits, the portable pair format and a
synthetic pair generator built on a fixed toy ISP.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import IterableDataset, get_worker_info

from errors import (
    InvalidMetadata,
    InvalidShape,
    InvalidSpec,
    PatchTooLarge,
    UnsupportedPattern,
)

logger = logging.getLogger(__name__)

RAW_SUFFIX = ".raw16"
META_SUFFIX = ".meta.json"
SRGB_SUFFIX = ".srgb.png"

MIN_NETWORK_SIDE = 64
DEFAULT_PATCH = 128

# White-balance gains for the packed (R, G1, G2, B) planes and the fixed
# camera-to-sRGB matrix of the toy ISP. Matrix rows sum to one.
TOY_WB_GAINS = (2.0, 1.0, 1.0, 1.5)
TOY_CCM = (
    (1.60, -0.45, -0.15),
    (-0.20, 1.45, -0.25),
    (0.05, -0.55, 1.50),
)
TOY_GAMMA = 2.2
SYNTH_BLACK_LEVEL = 512
SYNTH_WHITE_LEVEL = 16383


class BayerPattern(str, Enum):
    """Supported colour filter array layouts"""
    RGGB = "RGGB"


def parse_pattern(pattern: Union[str, BayerPattern]) -> BayerPattern:
    try:
        return BayerPattern(pattern)
    except ValueError:
        raise UnsupportedPattern(f"Bayer pattern {pattern!r} is not supported (only RGGB)")


class Augmentation(str, Enum):
    """The eight flips/rotations of the square, uniformly sampled"""
    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT180 = "rot180"
    TRANSPOSE = "transpose"
    ROT90 = "rot90"
    ROT270 = "rot270"
    ANTITRANSPOSE = "antitranspose"

    @property
    def steps(self) -> Tuple[str, ...]:
        return _AUGMENTATION_STEPS[self]


# Each augmentation is a sequence of base steps applied left to right:
# "h" mirrors columns, "v" mirrors rows, "t" swaps rows and columns.
_AUGMENTATION_STEPS: Dict[Augmentation, Tuple[str, ...]] = {
    Augmentation.IDENTITY: (),
    Augmentation.HFLIP: ("h",),
    Augmentation.VFLIP: ("v",),
    Augmentation.ROT180: ("h", "v"),
    Augmentation.TRANSPOSE: ("t",),
    Augmentation.ROT90: ("t", "v"),
    Augmentation.ROT270: ("t", "h"),
    Augmentation.ANTITRANSPOSE: ("t", "h", "v"),
}

# Packed channel k holds mosaic phase (k // 2, k % 2). Mirroring the mosaic
# swaps the phase bit along the mirrored axis; transposing swaps the bits.
_PACKED_CHANNEL_PERM = {
    "h": [1, 0, 3, 2],
    "v": [2, 3, 0, 1],
    "t": [0, 2, 1, 3],
}


@dataclass
class RawImage:
    """RGGB-packed sensor frame normalized to [0, 1]"""
    data: torch.Tensor
    black_level: int = 0
    white_level: int = 1
    bayer_pattern: BayerPattern = BayerPattern.RGGB
    source_id: str = ""

    def __post_init__(self):
        self.bayer_pattern = parse_pattern(self.bayer_pattern)
        if self.data.dim() != 3 or self.data.shape[0] != 4:
            raise InvalidShape(f"RawImage expects 4xhxw data, got {tuple(self.data.shape)}")
        if self.data.numel() and (self.data.min() < 0 or self.data.max() > 1):
            raise InvalidShape("RawImage values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    def check_network_input(self) -> None:
        """Networks need both packed sides even and at least 64"""
        for side in (self.height, self.width):
            if side < MIN_NETWORK_SIDE or side % 2:
                raise InvalidShape(
                    f"packed RAW sides must be even and >= {MIN_NETWORK_SIDE}, "
                    f"got {self.height}x{self.width}"
                )


@dataclass
class SrgbImage:
    """Display-referred image, 3xHxW in [0, 1]"""
    data: torch.Tensor
    source_id: str = ""

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[0] != 3:
            raise InvalidShape(f"SrgbImage expects 3xHxW data, got {tuple(self.data.shape)}")
        self.data = self.data.clamp(0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


def check_pair(raw: RawImage, srgb: SrgbImage) -> None:
    if srgb.height != 2 * raw.height or srgb.width != 2 * raw.width:
        raise InvalidShape(
            f"sRGB {srgb.height}x{srgb.width} is not twice packed RAW {raw.height}x{raw.width}"
        )


@dataclass
class PatchPair:
    raw_patch: RawImage
    srgb_patch: SrgbImage
    augmentation_tag: Augmentation = Augmentation.IDENTITY
    offset: Tuple[int, int] = (0, 0)


@dataclass
class DatasetSplit:
    """Disjoint train/val/test id lists"""
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]
    seed: int = 0

    def ids(self, subset: str) -> List[str]:
        try:
            return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[subset]
        except KeyError:
            raise InvalidSpec(f"unknown subset {subset!r}")

    def save(self, path: Union[str, Path]) -> None:
        lines = [f"# seed {self.seed}"]
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            lines.append(f"[{name}]")
            lines.extend(ids)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetSplit":
        sections: Dict[str, List[str]] = {"train": [], "val": [], "test": []}
        seed = 0
        current = None
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("# seed"):
                seed = int(line.split()[-1])
            elif line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise InvalidSpec(f"unknown split section [{current}] in {path}")
            elif current is None:
                raise InvalidSpec(f"id {line!r} appears before any section in {path}")
            else:
                sections[current].append(line)
        return cls(sections["train"], sections["val"], sections["test"], seed=seed)


# ---------------------------------------------------------------------------
# Packing and normalization
# ---------------------------------------------------------------------------

def pack_rggb(
    mosaic: torch.Tensor,
    pattern: Union[str, BayerPattern] = BayerPattern.RGGB,
    black_level: int = 0,
    white_level: int = 1,
    source_id: str = "",
) -> RawImage:
    """Pack a 1xHxW (or HxW) Bayer mosaic into a 4x(H/2)x(W/2) RawImage"""
    pattern = parse_pattern(pattern)
    if mosaic.dim() == 3:
        if mosaic.shape[0] != 1:
            raise InvalidShape(f"mosaic must have a single channel, got {tuple(mosaic.shape)}")
        mosaic = mosaic[0]
    if mosaic.dim() != 2:
        raise InvalidShape(f"mosaic must be 1xHxW or HxW, got {tuple(mosaic.shape)}")
    h, w = mosaic.shape
    if h % 2 or w % 2:
        raise InvalidShape(f"mosaic dims must be even, got {h}x{w}")
    data = torch.stack(
        [mosaic[0::2, 0::2], mosaic[0::2, 1::2], mosaic[1::2, 0::2], mosaic[1::2, 1::2]]
    )
    return RawImage(data, black_level, white_level, pattern, source_id)


def unpack_rggb(packed: Union[RawImage, torch.Tensor]) -> torch.Tensor:
    """Inverse of pack_rggb; accepts (..., 4, h, w) and returns (..., 1, 2h, 2w)"""
    data = packed.data if isinstance(packed, RawImage) else packed
    if data.shape[-3] != 4:
        raise InvalidShape(f"packed RAW must have 4 channels, got {tuple(data.shape)}")
    h, w = data.shape[-2:]
    mosaic = data.new_zeros(*data.shape[:-3], 1, 2 * h, 2 * w)
    mosaic[..., 0, 0::2, 0::2] = data[..., 0, :, :]
    mosaic[..., 0, 0::2, 1::2] = data[..., 1, :, :]
    mosaic[..., 0, 1::2, 0::2] = data[..., 2, :, :]
    mosaic[..., 0, 1::2, 1::2] = data[..., 3, :, :]
    return mosaic


def normalize_raw(
    mosaic: Union[torch.Tensor, np.ndarray],
    black_level: int,
    white_level: int,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """clamp((x - black) / (white - black), 0, 1)"""
    if white_level <= black_level:
        raise InvalidMetadata(
            f"white level {white_level} must exceed black level {black_level}"
        )
    values = torch.as_tensor(np.asarray(mosaic, dtype=np.float64))
    out = (values - black_level) / float(white_level - black_level)
    return out.clamp(0.0, 1.0).to(dtype)


# ---------------------------------------------------------------------------
# Augmentation and patches
# ---------------------------------------------------------------------------

def _spatial_step(x: torch.Tensor, step: str) -> torch.Tensor:
    if step == "h":
        return x.flip(-1)
    if step == "v":
        return x.flip(-2)
    return x.transpose(-2, -1)


def augment_image(x: torch.Tensor, aug: Augmentation) -> torch.Tensor:
    """Apply an augmentation to an image or mosaic (no channel semantics)"""
    for step in aug.steps:
        x = _spatial_step(x, step)
    return x.contiguous()


def augment_packed(x: torch.Tensor, aug: Augmentation) -> torch.Tensor:
    """Apply an augmentation to packed RAW, permuting planes with the mosaic phase"""
    for step in aug.steps:
        x = _spatial_step(x[..., _PACKED_CHANNEL_PERM[step], :, :], step)
    return x.contiguous()


def extract_patch_pair(
    raw: RawImage,
    srgb: SrgbImage,
    rng: np.random.Generator,
    patch_size: int = DEFAULT_PATCH,
    augment: bool = True,
) -> PatchPair:
    """Aligned random crop (sRGB offset = 2x RAW offset) plus a random flip/rotation"""
    check_pair(raw, srgb)
    if raw.height < patch_size or raw.width < patch_size:
        raise PatchTooLarge(
            f"patch {patch_size} does not fit packed RAW {raw.height}x{raw.width}"
        )
    top = int(rng.integers(0, raw.height - patch_size + 1))
    left = int(rng.integers(0, raw.width - patch_size + 1))
    raw_crop = raw.data[:, top:top + patch_size, left:left + patch_size]
    srgb_crop = srgb.data[:, 2 * top:2 * (top + patch_size), 2 * left:2 * (left + patch_size)]

    aug = Augmentation.IDENTITY
    if augment:
        aug = list(Augmentation)[int(rng.integers(0, len(Augmentation)))]
    raw_crop = augment_packed(raw_crop, aug)
    srgb_crop = augment_image(srgb_crop, aug)

    return PatchPair(
        raw_patch=RawImage(raw_crop, raw.black_level, raw.white_level, raw.bayer_pattern, raw.source_id),
        srgb_patch=SrgbImage(srgb_crop, srgb.source_id),
        augmentation_tag=aug,
        offset=(top, left),
    )


def make_split(ids: Sequence[str], seed: int = 0) -> DatasetSplit:
    """80:5:15 split; test then val counts rounded half-up, remainder to train"""
    ids = sorted(ids)
    if not ids:
        raise InvalidSpec("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise InvalidSpec("ids must be unique")
    n = len(ids)
    n_test = (15 * n + 50) // 100
    n_val = (5 * n + 50) // 100
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train_ids=shuffled[n_test + n_val:],
        val_ids=shuffled[n_test:n_test + n_val],
        test_ids=shuffled[:n_test],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Toy ISP and synthetic pairs
# ---------------------------------------------------------------------------

_RB_KERNEL = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0
_G_KERNEL = torch.tensor([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0


def bilinear_demosaic(packed: torch.Tensor) -> torch.Tensor:
    """Bilinear demosaic of packed RGGB (..., 4, h, w) into linear RGB (..., 3, 2h, 2w)"""
    squeeze = packed.dim() == 3
    if squeeze:
        packed = packed.unsqueeze(0)
    mosaic = unpack_rggb(packed)
    # sampling masks per colour; normalized convolution keeps borders unbiased
    h2, w2 = mosaic.shape[-2:]
    r_mask = mosaic.new_zeros(1, 1, h2, w2)
    r_mask[..., 0::2, 0::2] = 1
    g_mask = mosaic.new_zeros(1, 1, h2, w2)
    g_mask[..., 0::2, 1::2] = 1
    g_mask[..., 1::2, 0::2] = 1
    b_mask = mosaic.new_zeros(1, 1, h2, w2)
    b_mask[..., 1::2, 1::2] = 1
    masks = torch.cat([r_mask, g_mask, b_mask], dim=1)
    kernels = torch.stack([_RB_KERNEL, _G_KERNEL, _RB_KERNEL]).unsqueeze(1).to(mosaic)
    planes = F.conv2d(mosaic * masks, kernels, padding=1, groups=3)
    weights = F.conv2d(masks, kernels, padding=1, groups=3)
    rgb = planes / weights
    return rgb[0] if squeeze else rgb


def toy_isp(packed: torch.Tensor) -> torch.Tensor:
    """White balance, bilinear demosaic, colour matrix and gamma 1/2.2"""
    gains = packed.new_tensor(TOY_WB_GAINS).view(4, 1, 1)
    balanced = (packed * gains).clamp(0.0, 1.0)
    rgb = bilinear_demosaic(balanced)
    ccm = rgb.new_tensor(TOY_CCM)
    rgb = torch.einsum("ij,...jhw->...ihw", ccm, rgb).clamp(0.0, 1.0)
    return rgb.clamp_min(1e-8) ** (1.0 / TOY_GAMMA)


def raw_preview(raw: RawImage) -> SrgbImage:
    """Quick look at a RAW frame: the toy ISP applied to the packed planes"""
    return SrgbImage(toy_isp(raw.data), raw.source_id)


@dataclass
class RawMetadata:
    height: int
    width: int
    black_level: int
    white_level: int
    bayer_pattern: str = BayerPattern.RGGB.value

    def validate(self) -> None:
        parse_pattern(self.bayer_pattern)
        if self.white_level <= self.black_level:
            raise InvalidMetadata(
                f"white level {self.white_level} must exceed black level {self.black_level}"
            )
        if self.height % 2 or self.width % 2:
            raise InvalidMetadata(f"mosaic dims must be even, got {self.height}x{self.width}")


@dataclass
class SyntheticPair:
    """A synthetic sensor capture with its toy-ISP rendering"""
    mosaic: np.ndarray
    metadata: RawMetadata
    srgb: np.ndarray
    source_id: str = ""

    def to_images(self) -> Tuple[RawImage, SrgbImage]:
        return images_from_arrays(self.mosaic, self.metadata, self.srgb, self.source_id)


def _smooth_scene(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    scene = np.zeros((3, height, width))
    for c in range(3):
        plane = rng.uniform(0.1, 0.4) + rng.uniform(-0.2, 0.2) * xx + rng.uniform(-0.2, 0.2) * yy
        for _ in range(4):
            fy, fx = rng.uniform(0.5, 6.0, size=2)
            phase = rng.uniform(0.0, 2 * np.pi)
            plane += rng.uniform(0.02, 0.12) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        scene[c] = plane
    return np.clip(scene, 0.0, 1.0)


def synthesize_pair(
    rng: np.random.Generator,
    height: int = 256,
    width: int = 256,
    source_id: str = "synthetic",
) -> SyntheticPair:
    """Render a smooth random scene into a 16-bit RGGB mosaic and its toy-ISP sRGB"""
    if height % 2 or width % 2:
        raise InvalidShape(f"synthetic dims must be even, got {height}x{width}")
    scene = _smooth_scene(rng, height, width)
    gains = np.array([TOY_WB_GAINS[0], TOY_WB_GAINS[1], TOY_WB_GAINS[3]])
    linear = scene / gains[:, None, None]
    mosaic = np.empty((height, width))
    mosaic[0::2, 0::2] = linear[0, 0::2, 0::2]
    mosaic[0::2, 1::2] = linear[1, 0::2, 1::2]
    mosaic[1::2, 0::2] = linear[1, 1::2, 0::2]
    mosaic[1::2, 1::2] = linear[2, 1::2, 1::2]
    mosaic += rng.normal(0.0, 0.002, size=mosaic.shape)
    span = SYNTH_WHITE_LEVEL - SYNTH_BLACK_LEVEL
    counts = np.clip(np.round(SYNTH_BLACK_LEVEL + mosaic * span), 0, 65535).astype(np.uint16)
    meta = RawMetadata(height, width, SYNTH_BLACK_LEVEL, SYNTH_WHITE_LEVEL)

    raw = pack_rggb(normalize_raw(counts, meta.black_level, meta.white_level))
    srgb = toy_isp(raw.data).permute(1, 2, 0).numpy()
    return SyntheticPair(counts, meta, srgb.astype(np.float32), source_id)


def images_from_arrays(
    mosaic: np.ndarray,
    meta: RawMetadata,
    srgb: np.ndarray,
    source_id: str = "",
) -> Tuple[RawImage, SrgbImage]:
    """Build the (RawImage, SrgbImage) pair from a u16 mosaic and an HxWx3 [0,1] array"""
    meta.validate()
    normalized = normalize_raw(mosaic, meta.black_level, meta.white_level)
    raw = pack_rggb(normalized, meta.bayer_pattern, meta.black_level, meta.white_level, source_id)
    rgb = torch.from_numpy(np.ascontiguousarray(srgb, dtype=np.float32)).permute(2, 0, 1)
    srgb_image = SrgbImage(rgb, source_id)
    check_pair(raw, srgb_image)
    return raw, srgb_image


# ---------------------------------------------------------------------------
# Portable pair format
# ---------------------------------------------------------------------------

def save_pair(
    directory: Union[str, Path],
    pair_id: str,
    mosaic: np.ndarray,
    meta: RawMetadata,
    srgb: np.ndarray,
    bit_depth: int = 8,
) -> None:
    """Write <id>.raw16, <id>.meta.json and <id>.srgb.png"""
    meta.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if mosaic.shape != (meta.height, meta.width):
        raise InvalidShape(f"mosaic {mosaic.shape} does not match metadata {meta.height}x{meta.width}")
    mosaic.astype("<u2").tofile(directory / f"{pair_id}{RAW_SUFFIX}")
    (directory / f"{pair_id}{META_SUFFIX}").write_text(json.dumps(meta.__dict__, indent=2))
    write_srgb_png(directory / f"{pair_id}{SRGB_SUFFIX}", srgb, bit_depth)


def read_mosaic(raw_path: Union[str, Path]) -> Tuple[np.ndarray, RawMetadata]:
    """Read <id>.raw16 and the <id>.meta.json next to it"""
    raw_path = Path(raw_path)
    if not raw_path.name.endswith(RAW_SUFFIX):
        raise InvalidMetadata(f"{raw_path} is not a {RAW_SUFFIX} file")
    meta_path = raw_path.with_name(raw_path.name[: -len(RAW_SUFFIX)] + META_SUFFIX)
    try:
        fields = json.loads(meta_path.read_text())
        meta = RawMetadata(**fields)
    except (TypeError, json.JSONDecodeError) as e:
        raise InvalidMetadata(f"bad metadata in {meta_path}: {e}")
    meta.validate()
    mosaic = np.fromfile(raw_path, dtype="<u2")
    if mosaic.size != meta.height * meta.width:
        raise InvalidShape(
            f"{raw_path} holds {mosaic.size} samples, metadata says {meta.height}x{meta.width}"
        )
    return mosaic.reshape(meta.height, meta.width), meta


def load_raw(raw_path: Union[str, Path]) -> RawImage:
    """A RawImage from a .raw16 file without its sRGB partner"""
    mosaic, meta = read_mosaic(raw_path)
    pair_id = Path(raw_path).name[: -len(RAW_SUFFIX)]
    normalized = normalize_raw(mosaic, meta.black_level, meta.white_level)
    return pack_rggb(normalized, meta.bayer_pattern, meta.black_level, meta.white_level, pair_id)


def load_pair(directory: Union[str, Path], pair_id: str) -> Tuple[RawImage, SrgbImage]:
    directory = Path(directory)
    mosaic, meta = read_mosaic(directory / f"{pair_id}{RAW_SUFFIX}")
    srgb = read_srgb_png(directory / f"{pair_id}{SRGB_SUFFIX}")
    return images_from_arrays(mosaic, meta, srgb, pair_id)


def list_pair_ids(directory: Union[str, Path]) -> List[str]:
    """Ids that have all three pair files"""
    directory = Path(directory)
    ids = []
    for meta_path in sorted(directory.glob(f"*{META_SUFFIX}")):
        pair_id = meta_path.name[: -len(META_SUFFIX)]
        if (directory / f"{pair_id}{RAW_SUFFIX}").exists() and (directory / f"{pair_id}{SRGB_SUFFIX}").exists():
            ids.append(pair_id)
        else:
            logger.warning(f"Skipping incomplete pair {pair_id} in {directory}")
    return ids


def write_srgb_png(path: Union[str, Path], srgb: np.ndarray, bit_depth: int = 8) -> None:
    """Write an HxWx3 RGB array in [0,1] as an 8- or 16-bit PNG"""
    if bit_depth not in (8, 16):
        raise InvalidSpec(f"PNG bit depth must be 8 or 16, got {bit_depth}")
    scale = 255.0 if bit_depth == 8 else 65535.0
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    pixels = np.round(np.clip(srgb, 0.0, 1.0) * scale).astype(dtype)
    if not cv2.imwrite(str(path), cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def read_srgb_png(path: Union[str, Path]) -> np.ndarray:
    """Read an 8- or 16-bit PNG as an HxWx3 RGB float array in [0,1]"""
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise FileNotFoundError(f"could not read image {path}")
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InvalidShape(f"{path} is not a 3-channel image")
    scale = 65535.0 if pixels.dtype == np.uint16 else 255.0
    return cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB).astype(np.float32) / scale


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------

class PatchStream(IterableDataset):
    """Endless stream of augmented patch pairs for a DataLoader

    Worker i draws from numpy.random.default_rng([seed, i]), so a
    single-worker stream is fully determined by the seed.
    """

    def __init__(
        self,
        pairs: Sequence[Tuple[RawImage, SrgbImage]],
        patch_size: int = DEFAULT_PATCH,
        seed: int = 0,
        augment: bool = True,
    ):
        if not pairs:
            raise InvalidSpec("patch stream needs at least one image pair")
        self.pairs = list(pairs)
        self.patch_size = patch_size
        self.seed = seed
        self.augment = augment

    def __iter__(self) -> Iterator[Dict[str, torch.Tensor]]:
        info = get_worker_info()
        worker = info.id if info is not None else 0
        rng = np.random.default_rng([self.seed, worker])
        while True:
            raw, srgb = self.pairs[int(rng.integers(0, len(self.pairs)))]
            patch = extract_patch_pair(raw, srgb, rng, self.patch_size, self.augment)
            yield {"raw": patch.raw_patch.data, "srgb": patch.srgb_patch.data}


def load_subset(
    data_dir: Union[str, Path],
    split: Optional[DatasetSplit] = None,
    subset: str = "train",
) -> List[Tuple[RawImage, SrgbImage]]:
    """Load every pair of a split subset (or the whole directory when no split is given)"""
    ids = split.ids(subset) if split is not None else list_pair_ids(data_dir)
    pairs = [load_pair(data_dir, pair_id) for pair_id in ids]
    logger.info(f"Loaded {len(pairs)} pairs from {data_dir} ({subset})")
    return pairs
