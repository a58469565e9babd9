"""Domain types and the vector/bit math shared by every other module.

All types are frozen and hold read-only float64 / uint64 arrays, so a single
instance can be shared by any number of query workers.
"""

import math
from dataclasses import dataclass
from typing import Any, Optional, Union

import numpy as np
import numpy.typing as npt

from slide_search_tool.errors import (
    DataError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    PreconditionError,
)

WORD_BITS = 64
# looser than l2_normalize's own guarantee so float32-stored vectors still load
UNIT_NORM_TOLERANCE = 1e-6


def _read_only(array: npt.ArrayLike, dtype: Any) -> np.ndarray:
    frozen = np.array(array, dtype=dtype, copy=True)
    frozen.setflags(write=False)
    return frozen


def words_per_code(bits: int) -> int:
    return (bits + WORD_BITS - 1) // WORD_BITS


def bytes_per_code(bits: int) -> int:
    return (bits + 7) // 8


def pack_bits(bits: npt.ArrayLike) -> np.ndarray:
    """Packs a (..., n_bits) boolean array into (..., ceil(n_bits/64)) uint64 words.

    Bit i lands in word i // 64 at position i % 64 (least significant first);
    trailing bits of the last word are zero.
    """
    bits = np.asarray(bits, dtype=bool)
    n_bits = bits.shape[-1]
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = words_per_code(n_bits) * 8 - packed.shape[-1]
    if pad:
        packed = np.pad(packed, [(0, 0)] * (packed.ndim - 1) + [(0, pad)])
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_bits(words: npt.ArrayLike, n_bits: int) -> np.ndarray:
    raw = np.ascontiguousarray(np.asarray(words, dtype=np.uint64).astype("<u8")).view(np.uint8)
    return np.unpackbits(raw, axis=-1, count=n_bits, bitorder="little").astype(bool)


@dataclass(frozen=True)
class PatchEmbeddingMatrix:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(
                f"patch embeddings must be a non-empty N x C matrix, got {data.shape}"
            )
        if not np.isfinite(data).all():
            raise NumericError("patch embeddings contain non-finite entries")
        object.__setattr__(self, "data", _read_only(data, np.float64))

    @property
    def n_patches(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True)
class MosaicSet:
    rows: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DimensionError(f"mosaics must be an M x C matrix with M >= 1, got {rows.shape}")
        object.__setattr__(self, "rows", _read_only(rows, np.float64))

    @property
    def m(self) -> int:
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])


@dataclass(frozen=True)
class BinaryMosaicCode:
    words: np.ndarray
    bits_per_code: int

    def __post_init__(self) -> None:
        words = np.asarray(self.words, dtype=np.uint64)
        expected_words = words_per_code(self.bits_per_code)
        if words.ndim != 2 or words.shape[0] < 1 or words.shape[1] != expected_words:
            raise DimensionError(
                f"expected M x {expected_words} words for {self.bits_per_code}-bit codes, "
                f"got {words.shape}"
            )
        tail = self.bits_per_code % WORD_BITS
        if tail and (words[:, -1] >> np.uint64(tail)).any():
            raise DataError("padding bits of a mosaic code must be zero")
        object.__setattr__(self, "words", _read_only(words, np.uint64))

    @property
    def m(self) -> int:
        return int(self.words.shape[0])

    @property
    def n_bytes(self) -> int:
        return self.m * bytes_per_code(self.bits_per_code)

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.bits_per_code)

    def to_bytes(self) -> bytes:
        per_code = bytes_per_code(self.bits_per_code)
        raw = np.ascontiguousarray(self.words.astype("<u8")).view(np.uint8)
        return raw.reshape(self.m, -1)[:, :per_code].tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, m: int, bits_per_code: int) -> "BinaryMosaicCode":
        per_code = bytes_per_code(bits_per_code)
        if len(data) != m * per_code:
            raise DimensionError(f"expected {m * per_code} code bytes, got {len(data)}")
        raw = np.frombuffer(data, dtype=np.uint8).reshape(m, per_code)
        pad = words_per_code(bits_per_code) * 8 - per_code
        if pad:
            raw = np.pad(raw, [(0, 0), (0, pad)])
        return cls(np.ascontiguousarray(raw).view("<u8").astype(np.uint64), bits_per_code)


@dataclass(frozen=True)
class SemanticVector:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] < 1:
            raise DimensionError(f"semantic vectors must be 1-D, got {values.shape}")
        norm = float(np.linalg.norm(values))
        if not math.isfinite(norm) or abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise PreconditionError(f"semantic vector is not unit-norm (norm={norm})")
        object.__setattr__(self, "values", _read_only(values, np.float64))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    label: Optional[int]
    mosaic_code: BinaryMosaicCode
    semantic: SemanticVector
    text_semantic: Optional[SemanticVector] = None

    def __post_init__(self) -> None:
        if self.mosaic_code.bits_per_code != self.semantic.dim:
            raise DimensionError(
                f"record {self.slide_id}: mosaic bits {self.mosaic_code.bits_per_code} "
                f"!= semantic dim {self.semantic.dim}"
            )
        if self.text_semantic is not None and self.text_semantic.dim != self.semantic.dim:
            raise DimensionError(f"record {self.slide_id}: text vector dim mismatch")


@dataclass(frozen=True)
class RetrievalResult:
    candidate_id: str
    fused_distance: float
    mosaic_distance: float
    semantic_distance: float
    rank: int


def hamming_distance(a: npt.ArrayLike, b: npt.ArrayLike) -> int:
    """Number of differing bits between two packed bit-vectors (XOR + popcount)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise DimensionError(f"bit-vector length mismatch: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def binarize(mosaics: MosaicSet) -> BinaryMosaicCode:
    """Strict sign rule: entry > 0 maps to 1, everything else (zero included) to 0."""
    if not np.isfinite(mosaics.rows).all():
        raise NumericError("cannot binarize non-finite mosaic entries")
    return BinaryMosaicCode(pack_bits(mosaics.rows > 0), mosaics.dim)


def l2_normalize(v: npt.ArrayLike) -> SemanticVector:
    values = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(values))
    if not math.isfinite(norm):
        raise DegenerateInputError("cannot normalize a vector with non-finite entries")
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return SemanticVector(values / norm)


def as_array(v: Union[SemanticVector, npt.ArrayLike]) -> np.ndarray:
    if isinstance(v, SemanticVector):
        return v.values
    return np.asarray(v, dtype=np.float64)


def euclidean_distance(
    u: Union[SemanticVector, npt.ArrayLike], v: Union[SemanticVector, npt.ArrayLike]
) -> float:
    left, right = as_array(u), as_array(v)
    if left.shape != right.shape:
        raise DimensionError(f"vector dim mismatch: {left.shape} vs {right.shape}")
    return float(np.sqrt(np.sum((left - right) ** 2)))
