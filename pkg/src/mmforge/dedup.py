"""Exact, perceptual-hash, and loss-percentile deduplication filters.

The perceptual hash is a fixed 64-bit DCT construction: area-average the
grayscale image to 32x32, take the 2-D orthonormal DCT-II, keep the 8x8
low-frequency block, quantize each coefficient to an integer (x1024,
rounded), and set one bit per non-DC coefficient that exceeds the median
of the 63 non-DC quantized coefficients. The DC bit (position 0) is always
clear, which makes the hash invariant under uniform brightness offsets
that do not clip. Quantizing before the comparison removes the last-ulp
floating noise on analytically-zero coefficients, so the hash is stable
across platforms and DCT implementations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

import numpy as np
from scipy.fft import dct

HASH_SIDE = 8
RESIZE_SIDE = 32
QUANT_SCALE = 1024.0
DEFAULT_NEAR_DUP_THRESHOLD = 4
DEFAULT_LOSS_DROP_FRACTION = 0.05


class DedupError(ValueError):
    """Raised for missing hashes, missing losses, or invalid parameters."""


@dataclass(frozen=True)
class PHash:
    """64-bit perceptual hash value."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < 1 << 64:
            raise DedupError(f"hash out of 64-bit range: {self.bits}")

    @property
    def hex(self) -> str:
        return f"{self.bits:016x}"

    @classmethod
    def from_hex(cls, text: str) -> "PHash":
        return cls(int(text, 16))


@dataclass(frozen=True)
class LossScore:
    """Mean per-token NLL of one record under the scoring endpoint."""

    record_id: str
    loss: float

    def __post_init__(self):
        if not math.isfinite(self.loss) or self.loss < 0:
            raise DedupError(
                f"loss for {self.record_id!r} must be finite and >= 0, "
                f"got {self.loss!r}")


@dataclass
class DedupStats:
    """Count conservation for one filter pass: seen = kept + dropped."""

    seen: int = 0
    kept: int = 0
    dropped: int = 0

    def __add__(self, other: "DedupStats") -> "DedupStats":
        return DedupStats(self.seen + other.seen, self.kept + other.kept,
                          self.dropped + other.dropped)


def _box_weights(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic area-overlap weights mapping n_in cells to n_out."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for j in range(n_out):
        lo, hi = j * scale, (j + 1) * scale
        i0, i1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
        for i in range(i0, i1):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                w[j, i] = overlap / scale
    return w


def area_resize(gray: np.ndarray, side: int = RESIZE_SIDE) -> np.ndarray:
    """Area-averaging (box) resize of a 2-D array to side x side."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 1 or gray.shape[1] < 1:
        raise DedupError(f"expected a non-empty 2-D array, got shape {gray.shape}")
    wr = _box_weights(side, gray.shape[0])
    wc = _box_weights(side, gray.shape[1])
    return wr @ gray @ wc.T


def phash64(gray: np.ndarray) -> PHash:
    """Perceptual hash of decoded grayscale pixels (2-D array, any size)."""
    small = area_resize(gray, RESIZE_SIDE)
    coeffs = dct(dct(small, axis=0, norm="ortho"), axis=1, norm="ortho")
    block = coeffs[:HASH_SIDE, :HASH_SIDE].reshape(-1)
    quant = np.round(block * QUANT_SCALE).astype(np.int64)
    median = np.median(quant[1:])  # 63 values, odd count: exact element
    mask = quant > median
    mask[0] = False  # DC carries overall brightness; excluded
    return PHash(int.from_bytes(np.packbits(mask).tobytes(), "big"))


def hamming(a: PHash, b: PHash) -> int:
    """Number of differing bits between two hashes (0..64)."""
    return (a.bits ^ b.bits).bit_count()


def _hamming_to_many(bits: int, others: np.ndarray) -> np.ndarray:
    """Vectorized Hamming distance from one hash to a uint64 array."""
    return np.bitwise_count(np.bitwise_xor(others, np.uint64(bits)))


R = TypeVar("R")


def dedup_exact(records: Iterable[R]) -> tuple[list[R], DedupStats]:
    """Keep the first occurrence of each record_id, preserving order."""
    stats = DedupStats()
    seen: set[str] = set()
    kept: list[R] = []
    for rec in records:
        stats.seen += 1
        rid = rec.record_id
        if rid in seen:
            stats.dropped += 1
            continue
        seen.add(rid)
        kept.append(rec)
        stats.kept += 1
    return kept, stats


def near_dup_filter(
    records: Iterable[R],
    hashes: Mapping[str, PHash],
    threshold: int = DEFAULT_NEAR_DUP_THRESHOLD,
) -> tuple[list[R], DedupStats]:
    """Greedy streaming near-duplicate filter over image-bearing records.

    A record is dropped iff its image hash is within ``threshold`` Hamming
    distance of the hash of any previously kept record. Records without an
    image are always kept. Deterministic given input order.
    """
    if not 0 <= threshold <= 64:
        raise DedupError(f"threshold must be in [0, 64], got {threshold}")
    stats = DedupStats()
    kept: list[R] = []
    kept_bits = np.empty(64, dtype=np.uint64)
    n_kept_hashes = 0
    for rec in records:
        stats.seen += 1
        image = rec.image
        if image is None:
            kept.append(rec)
            stats.kept += 1
            continue
        try:
            h = hashes[image.image_id]
        except KeyError:
            raise DedupError(
                f"no precomputed hash for image {image.image_id!r} "
                f"(record {rec.record_id!r})") from None
        if n_kept_hashes:
            dists = _hamming_to_many(h.bits, kept_bits[:n_kept_hashes])
            if bool((dists <= threshold).any()):
                stats.dropped += 1
                continue
        if n_kept_hashes == len(kept_bits):
            kept_bits = np.concatenate([kept_bits, np.empty_like(kept_bits)])
        kept_bits[n_kept_hashes] = h.bits
        n_kept_hashes += 1
        kept.append(rec)
        stats.kept += 1
    return kept, stats


def nearest_rank_cutoff(values: Sequence[float], fraction: float) -> float:
    """Nearest-rank (1 - fraction) percentile of ``values``.

    Rounds the rank position to 9 decimals before ceiling so that binary
    float artifacts (0.95 * 100 = 94.999...) cannot shift the rank.
    """
    if not 0 <= fraction < 1:
        raise DedupError(f"fraction must be in [0, 1), got {fraction}")
    if not values:
        raise DedupError("cannot take a percentile of no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(round((1.0 - fraction) * len(ordered), 9)))
    return ordered[rank - 1]


def loss_percentile_filter(
    records: Sequence[R],
    losses: Mapping[str, float] | Iterable[LossScore],
    fraction: float = DEFAULT_LOSS_DROP_FRACTION,
    id_of: Callable[[R], str] | None = None,
) -> tuple[list[R], DedupStats]:
    """Drop records whose loss is strictly above the nearest-rank cutoff.

    The cutoff is the (1 - fraction) nearest-rank percentile of the *loss
    table*, not of the current record subset, so re-applying the filter
    with the same table is a no-op (idempotence). With ``fraction`` 0.05
    this excludes the top 5% highest-loss entries; ties at the cutoff are
    kept, so an all-equal table drops nothing. ``id_of`` maps a record to
    its loss-table key (default: record_id).
    """
    if id_of is None:
        id_of = lambda rec: rec.record_id  # noqa: E731
    if not isinstance(losses, Mapping):
        losses = {score.record_id: score.loss for score in losses}
    stats = DedupStats(seen=len(records))
    if not records:
        return [], stats
    for key, loss in losses.items():
        if not math.isfinite(loss):
            raise DedupError(f"non-finite loss {loss!r} for record {key!r}")
    by_record: dict[int, float] = {}
    for idx, rec in enumerate(records):
        key = id_of(rec)
        if key not in losses:
            raise DedupError(f"no loss for record {key!r}")
        by_record[idx] = losses[key]
    cutoff = nearest_rank_cutoff(list(losses.values()), fraction)
    kept = [rec for idx, rec in enumerate(records) if by_record[idx] <= cutoff]
    stats.kept = len(kept)
    stats.dropped = stats.seen - stats.kept
    return kept, stats


# --- cache and table files -------------------------------------------------

def save_hash_cache(path: str | Path, hashes: Mapping[str, PHash]) -> None:
    """Write an image-hash cache as JSONL of {image_id, phash_hex}."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(hashes):
            fh.write(json.dumps({"image_id": image_id,
                                 "phash_hex": hashes[image_id].hex}) + "\n")


def load_hash_cache(path: str | Path) -> dict[str, PHash]:
    cache: dict[str, PHash] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            cache[row["image_id"]] = PHash.from_hex(row["phash_hex"])
    return cache


def save_loss_table(path: str | Path, losses: Iterable[LossScore]) -> None:
    """Write a loss table as JSONL of {record_id, loss}."""
    with open(path, "w", encoding="utf-8") as fh:
        for score in losses:
            fh.write(json.dumps({"record_id": score.record_id,
                                 "loss": score.loss}) + "\n")


def load_loss_table(path: str | Path) -> dict[str, float]:
    table: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            score = LossScore(row["record_id"], float(row["loss"]))
            table[score.record_id] = score.loss
    return table
