"""
Entropy coding and the .rbb container for rawtobit
Symbols are coded with compressai's rANS coder (64-bit state, 16-bit CDF
tables with an escape bin for values outside the table support). The
hyper-latent goes through the model's EntropyBottleneck; the latent is
coded position by position against exact Gaussian tables from the
context model. Each payload ends in a CRC-32 so corruption surfaces as a
DecodeError instead of garbage.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from compressai._CXX import pmf_to_quantized_cdf
from compressai.ans import BufferedRansEncoder, RansDecoder

from entropy_model import CONTEXT_KERNEL, GaussianParams, HyperpriorContextModel
from errors import DecodeError, FormatError, InvalidShape

logger = logging.getLogger(__name__)

MAGIC = b"RB01"
HEADER_FORMAT = "<4sBBHIII"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)

PRECISION = 16
CDF_TOTAL = 1 << PRECISION
SUPPORT_MIN = -127
SUPPORT_MAX = 128

CHECKSUM_FORMAT = "<I"
CHECKSUM_SIZE = struct.calcsize(CHECKSUM_FORMAT)
# rANS flush writes the 64-bit state
STATE_BYTES = 8
FLUSH_BYTES = STATE_BYTES + CHECKSUM_SIZE
# zero bytes appended before decoding so a bad stream cannot run the decoder off its buffer
DECODE_SLACK_PER_SYMBOL = 8
DECODE_SLACK = 1024


class ModelKind(IntEnum):
    RBN = 0
    UNIFIED = 1
    COMP_TEACHER = 2
    CASCADED = 3


# ---------------------------------------------------------------------------
# CDF tables
# ---------------------------------------------------------------------------

@dataclass
class CdfTable:
    """Quantized CDF on a 2^16 grid for symbols s_min .. s_max plus one escape bin

    len(cdf) is the number of symbols + 2; the last bin catches every
    symbol outside the support, which then follows as bypass-coded raw bits.
    """
    cdf: np.ndarray
    s_min: int = SUPPORT_MIN

    @property
    def s_max(self) -> int:
        return self.s_min + len(self.cdf) - 3

    def validate(self) -> None:
        freq = np.diff(self.cdf)
        if len(self.cdf) < 3:
            raise InvalidShape("CDF needs at least one symbol and the escape bin")
        if self.cdf[0] != 0 or self.cdf[-1] != CDF_TOTAL or (freq < 1).any():
            raise InvalidShape("CDF must start at 0, end at 2^16 and give every bin >= 1 unit")


def pmf_to_cdf(
    pmf: np.ndarray,
    tail_mass: Optional[np.ndarray] = None,
    precision: int = PRECISION,
) -> np.ndarray:
    """Quantize rows of pmf (..., n) into integer CDFs (..., n + 2) on a 2^precision grid

    The extra bin is the escape bin and gets tail_mass, by default whatever
    the row leaves of 1. Every bin ends up with at least one unit.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    shape = pmf.shape
    rows = pmf.reshape(-1, shape[-1])
    if shape[-1] + 1 > 1 << precision:
        raise InvalidShape(f"{shape[-1]} symbols do not fit a 2^{precision} grid")
    if tail_mass is None:
        tails = np.clip(1.0 - rows.sum(axis=1), 0.0, None)
    else:
        tails = np.asarray(tail_mass, dtype=np.float64).reshape(-1)
    cdf = np.array(
        [pmf_to_quantized_cdf(np.append(row, tail).tolist(), precision) for row, tail in zip(rows, tails)],
        dtype=np.int64,
    )
    return cdf.reshape(*shape[:-1], shape[-1] + 2)


def gaussian_pmf(
    mu: np.ndarray,
    sigma: np.ndarray,
    s_min: int = SUPPORT_MIN,
    s_max: int = SUPPORT_MAX,
) -> np.ndarray:
    """Interval probabilities of each integer in [s_min, s_max]; the tails fold into the edge symbols"""
    mu = torch.as_tensor(np.asarray(mu, dtype=np.float64)).reshape(-1, 1)
    sigma = torch.as_tensor(np.asarray(sigma, dtype=np.float64)).reshape(-1, 1)
    edges = torch.arange(s_min, s_max + 2, dtype=torch.float64) - 0.5
    edges[0], edges[-1] = -float("inf"), float("inf")
    cdf = torch.special.ndtr((edges - mu) / sigma)
    return torch.diff(cdf, dim=1).numpy()


def gaussian_to_cdf(
    mu: np.ndarray,
    sigma: np.ndarray,
    s_min: int = SUPPORT_MIN,
    s_max: int = SUPPORT_MAX,
) -> np.ndarray:
    """Quantized CDF table per (mu, sigma) element, shape (n, s_max - s_min + 3)

    Each row sums to one over the support, so the escape bin only keeps its
    single grid unit for symbols that fall outside it.
    """
    return pmf_to_cdf(gaussian_pmf(mu, sigma, s_min, s_max))


# ---------------------------------------------------------------------------
# rANS streams
# ---------------------------------------------------------------------------

def seal(payload: bytes) -> bytes:
    return payload + struct.pack(CHECKSUM_FORMAT, zlib.crc32(payload))


def unseal(data: bytes, base_offset: int = 0) -> bytes:
    """Strip and verify the checksum of a coded payload"""
    if len(data) < FLUSH_BYTES:
        raise DecodeError("payload shorter than a flushed coder state", offset=base_offset + len(data))
    payload, checksum = data[:-CHECKSUM_SIZE], data[-CHECKSUM_SIZE:]
    if len(payload) % 4:
        raise DecodeError("payload is not a whole number of coder words", offset=base_offset + len(payload))
    (expected,) = struct.unpack(CHECKSUM_FORMAT, checksum)
    if zlib.crc32(payload) != expected:
        raise DecodeError("payload checksum mismatch", offset=base_offset)
    return payload


def _decoder_for(payload: bytes, num_symbols: int) -> RansDecoder:
    decoder = RansDecoder()
    decoder.set_stream(payload + bytes(DECODE_SLACK + DECODE_SLACK_PER_SYMBOL * num_symbols))
    return decoder


def _table_lists(cdfs: Sequence[CdfTable]) -> Tuple[List[int], List[List[int]], List[int], List[int]]:
    """(indexes, cdfs, cdf lengths, offsets) in compressai's layout, one slot per distinct table"""
    slots: Dict[int, int] = {}
    indexes, tables, lengths, offsets = [], [], [], []
    for table in cdfs:
        slot = slots.get(id(table))
        if slot is None:
            slot = slots[id(table)] = len(tables)
            tables.append(np.asarray(table.cdf, dtype=np.int64).tolist())
            lengths.append(len(table.cdf))
            offsets.append(int(table.s_min))
        indexes.append(slot)
    return indexes, tables, lengths, offsets


def range_encode(symbols: Sequence[int], cdfs: Sequence[CdfTable]) -> bytes:
    if len(symbols) != len(cdfs):
        raise InvalidShape(f"{len(symbols)} symbols but {len(cdfs)} CDF tables")
    indexes, tables, lengths, offsets = _table_lists(cdfs)
    encoder = BufferedRansEncoder()
    encoder.encode_with_indexes([int(s) for s in symbols], indexes, tables, lengths, offsets)
    return seal(encoder.flush())


def range_decode(data: bytes, cdfs: Sequence[CdfTable], base_offset: int = 0) -> List[int]:
    payload = unseal(data, base_offset)
    indexes, tables, lengths, offsets = _table_lists(cdfs)
    decoder = _decoder_for(payload, len(cdfs))
    return list(decoder.decode_stream(indexes, tables, lengths, offsets))


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------

@dataclass
class BitstreamHeader:
    model_kind: ModelKind
    quality_index: int
    K: int
    height: int
    width: int
    hyper_len: int = 0


@dataclass
class Bitstream:
    header: BitstreamHeader
    hyper_payload: bytes
    latent_payload: bytes

    def __len__(self) -> int:
        return HEADER_SIZE + len(self.hyper_payload) + len(self.latent_payload)


def serialize(stream: Bitstream) -> bytes:
    h = stream.header
    header = struct.pack(
        HEADER_FORMAT,
        MAGIC,
        int(h.model_kind),
        h.quality_index,
        h.K,
        h.height,
        h.width,
        len(stream.hyper_payload),
    )
    return header + stream.hyper_payload + stream.latent_payload


def deserialize(data: bytes) -> Bitstream:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise DecodeError("stream shorter than its header", offset=len(data))
    magic, kind, quality_index, k, height, width, hyper_len = struct.unpack(
        HEADER_FORMAT, data[:HEADER_SIZE]
    )
    try:
        model_kind = ModelKind(kind)
    except ValueError:
        raise FormatError(f"unknown model kind {kind}")
    if HEADER_SIZE + hyper_len > len(data):
        raise DecodeError("hyper-latent payload truncated", offset=len(data))
    hyper = data[HEADER_SIZE:HEADER_SIZE + hyper_len]
    latent = data[HEADER_SIZE + hyper_len:]
    if not latent:
        raise DecodeError("latent payload missing", offset=len(data))
    header = BitstreamHeader(model_kind, quality_index, k, height, width, hyper_len)
    return Bitstream(header, hyper, latent)


# ---------------------------------------------------------------------------
# Latent coding against a HyperpriorContextModel
# ---------------------------------------------------------------------------

def _int_symbols(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().to(torch.float64).round().numpy().astype(np.int64)


def _position_tables(params: GaussianParams) -> Tuple[List[List[int]], List[int]]:
    """Exact Gaussian tables for every channel at one latent position"""
    mu = params.mu.reshape(-1).detach().cpu().numpy()
    sigma = params.sigma.reshape(-1).detach().cpu().numpy()
    cdfs = gaussian_to_cdf(mu, sigma)
    return cdfs.tolist(), [cdfs.shape[1]] * cdfs.shape[0]


@torch.no_grad()
def encode_latents(
    entropy: HyperpriorContextModel,
    y: torch.Tensor,
) -> Tuple[bytes, bytes, torch.Tensor, torch.Tensor]:
    """Code one latent (1, M, h, w): hyper-latent through the EntropyBottleneck, then
    y_hat in raster order with context from already-coded neighbours.

    Returns (hyper_payload, latent_payload, y_hat, z_hat).
    """
    if y.dim() != 4 or y.shape[0] != 1:
        raise InvalidShape(f"encode one latent at a time, got {tuple(y.shape)}")
    _, m, h, w = y.shape
    bottleneck = entropy.entropy_bottleneck
    bottleneck.update(force=True)
    z = entropy.h_a(y)
    z_strings = bottleneck.compress(z)
    z_hat = bottleneck.decompress(z_strings, z.shape[-2:]).to(y.dtype)
    hyper_payload = seal(z_strings[0])

    y_hat = torch.round(y)
    y_symbols = _int_symbols(y_hat[0])
    hyper = entropy.hyper_features(z_hat, (h, w))
    pad = CONTEXT_KERNEL // 2
    buffer = y.new_zeros(1, m, h + 2 * pad, w + 2 * pad)
    channels = list(range(m))
    offsets = [SUPPORT_MIN] * m
    encoder = BufferedRansEncoder()
    for i in range(h):
        for j in range(w):
            cdfs, lengths = _position_tables(entropy.params_at(buffer, hyper, i, j))
            encoder.encode_with_indexes(y_symbols[:, i, j].tolist(), channels, cdfs, lengths, offsets)
            buffer[0, :, i + pad, j + pad] = y_hat[0, :, i, j]
    latent_payload = seal(encoder.flush())
    logger.debug(f"Coded latent {m}x{h}x{w}: hyper {len(hyper_payload)} B, latent {len(latent_payload)} B")
    return hyper_payload, latent_payload, y_hat, z_hat


@torch.no_grad()
def decode_latents(
    entropy: HyperpriorContextModel,
    hyper_payload: bytes,
    latent_payload: bytes,
    latent_size: Tuple[int, int],
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Inverse of encode_latents; returns (y_hat, z_hat)"""
    h, w = latent_size
    m = entropy.latent_channels
    zh, zw = _hyper_size(h), _hyper_size(w)
    bottleneck = entropy.entropy_bottleneck
    bottleneck.update(force=True)

    hyper_stream = unseal(hyper_payload, HEADER_SIZE)
    slack = bytes(DECODE_SLACK + DECODE_SLACK_PER_SYMBOL * entropy.hyper_channels * zh * zw)
    z_hat = bottleneck.decompress([hyper_stream + slack], (zh, zw)).to(dtype=dtype, device=device)

    hyper = entropy.hyper_features(z_hat, (h, w))
    pad = CONTEXT_KERNEL // 2
    buffer = torch.zeros(1, m, h + 2 * pad, w + 2 * pad, dtype=dtype, device=device)
    decoder = _decoder_for(unseal(latent_payload, HEADER_SIZE + len(hyper_payload)), m * h * w)
    channels = list(range(m))
    offsets = [SUPPORT_MIN] * m
    for i in range(h):
        for j in range(w):
            cdfs, lengths = _position_tables(entropy.params_at(buffer, hyper, i, j))
            values = decoder.decode_stream(channels, cdfs, lengths, offsets)
            buffer[0, :, i + pad, j + pad] = torch.tensor(values, dtype=dtype, device=device)
    y_hat = buffer[:, :, pad:pad + h, pad:pad + w].contiguous()
    return y_hat, z_hat


def _hyper_size(side: int) -> int:
    # two stride-2 convs with kernel 5, padding 2
    for _ in range(2):
        side = (side - 1) // 2 + 1
    return side
