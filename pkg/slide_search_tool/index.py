"""In-memory retrieval index and the query path.

Image-to-image retrieval scores every candidate with two distance families:

  * mosaic: median over the query's mosaic codes of the minimum Hamming
    distance to any of the candidate's codes (asymmetric);
  * semantic: Euclidean distance between the unit slide vectors.

Both families are optionally z-scored over the candidate set and fused as
D_mosaic + beta * D_semantic. Ties are broken by semantic distance, then by
slide id, so the ranking does not depend on record order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import numpy.typing as npt

from slide_search_tool.constants import (
    DEFAULT_BETA,
    DEFAULT_EPSILON,
    DEFAULT_FLOAT_WIDTH,
    DEFAULT_TOP_K,
    NO_LABEL,
    VALID_FLOAT_WIDTHS,
    RetrievalModes,
)
from slide_search_tool.core import (
    BinaryMosaicCode,
    PatchEmbeddingMatrix,
    RetrievalResult,
    SemanticVector,
    SlideRecord,
    binarize,
    words_per_code,
)
from slide_search_tool.embeddings import PairedDataset, PairedSample
from slide_search_tool.encoder import EncoderModel, TextEmbedder, embed_text, encode_slide
from slide_search_tool.errors import DataError, DimensionError, EmptyIndexError, UsageError

SCAN_CHUNK = 1024


@dataclass(frozen=True)
class FusionConfig:
    beta: float = DEFAULT_BETA
    normalize: bool = True
    epsilon: float = DEFAULT_EPSILON
    top_k: int = DEFAULT_TOP_K
    mode: str = RetrievalModes.FUSED
    # keep only this many candidates after the mosaic stage
    shortlist: Optional[int] = None
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.beta >= 0:
            raise UsageError(f"beta must be >= 0, got {self.beta}")
        if not self.epsilon > 0:
            raise UsageError(f"epsilon must be > 0, got {self.epsilon}")
        if self.top_k < 1:
            raise UsageError(f"top_k must be >= 1, got {self.top_k}")
        if self.mode not in RetrievalModes.ALL:
            raise UsageError(f"unknown retrieval mode {self.mode!r}")
        if self.shortlist is not None and self.shortlist < 1:
            raise UsageError(f"shortlist must be >= 1, got {self.shortlist}")
        if self.workers < 1:
            raise UsageError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class QuerySlide:
    mosaic_code: BinaryMosaicCode
    semantic: SemanticVector
    slide_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.mosaic_code.bits_per_code != self.semantic.dim:
            raise DimensionError(
                f"query mosaic bits {self.mosaic_code.bits_per_code} "
                f"!= semantic dim {self.semantic.dim}"
            )


@dataclass(frozen=True)
class RankedMatch:
    candidate_id: str
    distance: float
    rank: int


@dataclass
class OpCounter:
    """Distance operations performed by the scan code that was instrumented."""

    mosaic_comparisons: int = 0
    semantic_ops: int = 0
    candidates: int = 0

    def add(self, candidates: int, mosaic_comparisons: int, semantic_ops: int) -> None:
        self.candidates += candidates
        self.mosaic_comparisons += mosaic_comparisons
        self.semantic_ops += semantic_ops

    @property
    def total(self) -> int:
        return self.mosaic_comparisons + self.semantic_ops


@dataclass
class _Stacked:
    codes: np.ndarray
    semantic: np.ndarray
    text: np.ndarray
    text_mask: np.ndarray
    id_ranks: np.ndarray


class RetrievalIndex:
    """Append-only collection of SlideRecords sharing one (m, dim) shape."""

    def __init__(
        self,
        m: int,
        dim: int,
        label_names: Optional[Sequence[str]] = None,
        float_width: int = DEFAULT_FLOAT_WIDTH,
    ):
        if m < 1 or dim < 1:
            raise DimensionError(f"invalid index shape m={m} dim={dim}")
        if float_width not in VALID_FLOAT_WIDTHS:
            raise UsageError(f"float width must be one of {VALID_FLOAT_WIDTHS}, got {float_width}")
        self.m = m
        self.dim = dim
        self.float_width = float_width
        self.label_names: List[str] = []
        self.records: List[SlideRecord] = []
        self._positions: Dict[str, int] = {}
        self._stacked: Optional[_Stacked] = None
        for name in label_names or []:
            self.add_label(name)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, slide_id: object) -> bool:
        return slide_id in self._positions

    def add_label(self, name: str) -> int:
        if name in self.label_names:
            return self.label_names.index(name)
        if len(self.label_names) >= NO_LABEL:
            raise DataError(f"too many labels (max {NO_LABEL})")
        self.label_names.append(name)
        return len(self.label_names) - 1

    def append(self, record: SlideRecord) -> None:
        if record.mosaic_code.m != self.m or record.semantic.dim != self.dim:
            raise DimensionError(
                f"record {record.slide_id} has shape m={record.mosaic_code.m} "
                f"dim={record.semantic.dim}, index expects m={self.m} dim={self.dim}"
            )
        if record.slide_id in self._positions:
            raise DataError(f"duplicate slide id {record.slide_id}")
        if record.label is not None and not 0 <= record.label < len(self.label_names):
            raise DataError(f"record {record.slide_id} has unknown label id {record.label}")
        self._positions[record.slide_id] = len(self.records)
        self.records.append(record)
        self._stacked = None

    def position(self, slide_id: str) -> int:
        try:
            return self._positions[slide_id]
        except KeyError as err:
            raise DataError(f"slide id {slide_id} not in index") from err

    def record(self, slide_id: str) -> SlideRecord:
        return self.records[self.position(slide_id)]

    def label_name(self, record: SlideRecord) -> Optional[str]:
        return None if record.label is None else self.label_names[record.label]

    @property
    def ids(self) -> List[str]:
        return [r.slide_id for r in self.records]

    @property
    def has_text(self) -> bool:
        return any(r.text_semantic is not None for r in self.records)

    def stacked(self) -> _Stacked:
        if self._stacked is None:
            ids = self.ids
            ranks = np.empty(len(ids), dtype=np.int64)
            ranks[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
            text = np.zeros((len(self.records), self.dim))
            mask = np.zeros(len(self.records), dtype=bool)
            for i, record in enumerate(self.records):
                if record.text_semantic is not None:
                    text[i] = record.text_semantic.values
                    mask[i] = True
            self._stacked = _Stacked(
                codes=np.stack([r.mosaic_code.words for r in self.records])
                if self.records
                else np.zeros((0, self.m, words_per_code(self.dim)), dtype=np.uint64),
                semantic=np.stack([r.semantic.values for r in self.records])
                if self.records
                else np.zeros((0, self.dim)),
                text=text,
                text_mask=mask,
                id_ranks=ranks,
            )
        return self._stacked


def min_hamming_matrix(query_words: np.ndarray, candidate_words: np.ndarray) -> np.ndarray:
    """(Mq, W) x (S, Mc, W) -> (S, Mq) minimum Hamming distance per query mosaic."""
    xor = np.bitwise_xor(query_words[None, :, None, :], candidate_words[:, None, :, :])
    return np.bitwise_count(xor).sum(axis=-1, dtype=np.int64).min(axis=2)


def median_min_hamming(q: BinaryMosaicCode, c: BinaryMosaicCode) -> float:
    if q.m != c.m:
        raise DimensionError(f"mosaic count mismatch: {q.m} vs {c.m}")
    if q.bits_per_code != c.bits_per_code:
        raise DimensionError(
            f"code length mismatch: {q.bits_per_code} vs {c.bits_per_code} bits"
        )
    return float(np.median(min_hamming_matrix(q.words, c.words[None])[0]))


def zscore(values: npt.ArrayLike, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """(x - mean) / (population std + epsilon)."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise DataError("cannot z-score an empty list")
    return (array - array.mean()) / (array.std() + epsilon)


def _scan(
    distance: Callable[[np.ndarray], np.ndarray], positions: np.ndarray, workers: int
) -> np.ndarray:
    chunks = [positions[i : i + SCAN_CHUNK] for i in range(0, positions.size, SCAN_CHUNK)]
    if not chunks:
        return np.zeros(0)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(distance, chunks))
    else:
        parts = [distance(chunk) for chunk in chunks]
    return np.concatenate(parts)


def mosaic_distances(
    query: BinaryMosaicCode,
    codes: np.ndarray,
    positions: np.ndarray,
    workers: int = 1,
    counter: Optional[OpCounter] = None,
) -> np.ndarray:
    """Median-min Hamming distance from the query to codes[positions]."""
    if codes.ndim != 3 or codes.shape[1] != query.m:
        raise DimensionError(f"query has {query.m} mosaics, candidates have shape {codes.shape}")
    distances = _scan(
        lambda chunk: np.median(min_hamming_matrix(query.words, codes[chunk]), axis=1),
        positions,
        workers,
    )
    if counter is not None:
        counter.add(0, positions.size * query.m * codes.shape[1], 0)
    return distances.astype(np.float64)


def semantic_distances(
    query: npt.ArrayLike,
    vectors: np.ndarray,
    positions: np.ndarray,
    workers: int = 1,
    counter: Optional[OpCounter] = None,
) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    distances = _scan(
        lambda chunk: np.sqrt(np.sum((vectors[chunk] - q) ** 2, axis=1)), positions, workers
    )
    if counter is not None:
        counter.add(0, 0, positions.size * q.shape[0])
    return distances


def _truncate(count: int, top_k: int) -> int:
    if top_k > count:
        logging.warning("top_k %d exceeds the %d available candidates, truncating", top_k, count)
        return count
    return top_k


def rank_candidates(
    ids: Sequence[str],
    mosaic: npt.ArrayLike,
    semantic: npt.ArrayLike,
    cfg: FusionConfig,
    id_ranks: Optional[npt.ArrayLike] = None,
) -> List[RetrievalResult]:
    """Fuses the two distance families and returns the top_k results."""
    mosaic_d = np.asarray(mosaic, dtype=np.float64)
    semantic_d = np.asarray(semantic, dtype=np.float64)
    if not len(ids) == mosaic_d.size == semantic_d.size:
        raise DimensionError("ids and distance arrays differ in length")
    if not ids:
        raise EmptyIndexError("no candidates to rank")
    if cfg.normalize:
        mosaic_score = zscore(mosaic_d, cfg.epsilon)
        semantic_score = zscore(semantic_d, cfg.epsilon)
    else:
        mosaic_score, semantic_score = mosaic_d, semantic_d
    if cfg.mode == RetrievalModes.MOSAIC:
        fused = mosaic_score
    elif cfg.mode == RetrievalModes.SEMANTIC:
        fused = semantic_score
    else:
        fused = mosaic_score + cfg.beta * semantic_score
    if id_ranks is None:
        ranks = np.empty(len(ids), dtype=np.int64)
        ranks[sorted(range(len(ids)), key=list(ids).__getitem__)] = np.arange(len(ids))
    else:
        ranks = np.asarray(id_ranks)
    order = np.lexsort((ranks, semantic_d, fused))[: _truncate(len(ids), cfg.top_k)]
    return [
        RetrievalResult(
            candidate_id=ids[i],
            fused_distance=float(fused[i]),
            mosaic_distance=float(mosaic_d[i]),
            semantic_distance=float(semantic_d[i]),
            rank=rank,
        )
        for rank, i in enumerate(order, start=1)
    ]


def _candidate_positions(index: RetrievalIndex, exclude_id: Optional[str]) -> np.ndarray:
    if len(index) == 0:
        raise EmptyIndexError("index is empty")
    positions = np.arange(len(index))
    if exclude_id is not None and exclude_id in index:
        positions = positions[positions != index.position(exclude_id)]
    if positions.size == 0:
        raise EmptyIndexError("index holds no candidates other than the query")
    return positions


def query_image(
    q: QuerySlide,
    index: RetrievalIndex,
    cfg: FusionConfig,
    counter: Optional[OpCounter] = None,
) -> List[RetrievalResult]:
    """Image-to-image retrieval; a query whose id is indexed is left out."""
    if q.semantic.dim != index.dim:
        raise DimensionError(f"query dim {q.semantic.dim} does not match index dim {index.dim}")
    positions = _candidate_positions(index, q.slide_id)
    stacked = index.stacked()
    mosaic_d = mosaic_distances(q.mosaic_code, stacked.codes, positions, cfg.workers, counter)
    if cfg.shortlist is not None and cfg.shortlist < positions.size:
        keep = np.lexsort((stacked.id_ranks[positions], mosaic_d))[: cfg.shortlist]
        keep.sort()
        positions, mosaic_d = positions[keep], mosaic_d[keep]
    semantic_d = semantic_distances(
        q.semantic.values, stacked.semantic, positions, cfg.workers, counter
    )
    if counter is not None:
        counter.add(positions.size, 0, 0)
    ids = [index.records[i].slide_id for i in positions]
    return rank_candidates(ids, mosaic_d, semantic_d, cfg, stacked.id_ranks[positions])


def _rank_by_vector(
    query: SemanticVector,
    index: RetrievalIndex,
    vectors: np.ndarray,
    positions: np.ndarray,
    top_k: int,
) -> List[RankedMatch]:
    if query.dim != index.dim:
        raise DimensionError(f"query dim {query.dim} does not match index dim {index.dim}")
    distances = semantic_distances(query.values, vectors, positions)
    order = np.lexsort((index.stacked().id_ranks[positions], distances))
    order = order[: _truncate(positions.size, top_k)]
    return [
        RankedMatch(index.records[positions[i]].slide_id, float(distances[i]), rank)
        for rank, i in enumerate(order, start=1)
    ]


def _text_positions(index: RetrievalIndex, exclude_id: Optional[str]) -> np.ndarray:
    positions = _candidate_positions(index, exclude_id)
    positions = positions[index.stacked().text_mask[positions]]
    if positions.size == 0:
        raise EmptyIndexError("index holds no report embeddings")
    return positions


def query_text_to_image(
    text: SemanticVector, index: RetrievalIndex, top_k: int, exclude_id: Optional[str] = None
) -> List[RankedMatch]:
    positions = _candidate_positions(index, exclude_id)
    return _rank_by_vector(text, index, index.stacked().semantic, positions, top_k)


def query_image_to_text(
    semantic: SemanticVector,
    index: RetrievalIndex,
    top_k: int,
    exclude_id: Optional[str] = None,
) -> List[RankedMatch]:
    positions = _text_positions(index, exclude_id)
    return _rank_by_vector(semantic, index, index.stacked().text, positions, top_k)


def query_text_to_text(
    text: SemanticVector, index: RetrievalIndex, top_k: int, exclude_id: Optional[str] = None
) -> List[RankedMatch]:
    positions = _text_positions(index, exclude_id)
    return _rank_by_vector(text, index, index.stacked().text, positions, top_k)


def query_from_patches(
    patches: PatchEmbeddingMatrix, model: EncoderModel, slide_id: Optional[str] = None
) -> QuerySlide:
    mosaics, semantic = encode_slide(patches, model)
    return QuerySlide(mosaic_code=binarize(mosaics), semantic=semantic, slide_id=slide_id)


def query_from_record(record: SlideRecord) -> QuerySlide:
    return QuerySlide(record.mosaic_code, record.semantic, slide_id=record.slide_id)


def build_record(
    sample: PairedSample,
    model: EncoderModel,
    label: Optional[int],
    embedder: Optional[TextEmbedder] = None,
) -> SlideRecord:
    mosaics, semantic = encode_slide(sample.patches, model)
    text_semantic = None
    if embedder is not None and sample.report.strip():
        text_semantic = embed_text(sample.report, embedder, model)
    return SlideRecord(
        slide_id=sample.slide_id,
        label=label,
        mosaic_code=binarize(mosaics),
        semantic=semantic,
        text_semantic=text_semantic,
    )


def build_index(
    dataset: PairedDataset,
    model: EncoderModel,
    embedder: Optional[TextEmbedder] = None,
    float_width: int = DEFAULT_FLOAT_WIDTH,
) -> RetrievalIndex:
    index = RetrievalIndex(
        model.spec.m, model.spec.dim, dataset.label_names(), float_width=float_width
    )
    label_ids = dataset.label_ids()
    for sample in dataset.samples:
        label = None if sample.label is None else label_ids[sample.label]
        index.append(build_record(sample, model, label, embedder))
    logging.info("Indexed %d slides (m=%d, dim=%d)", len(index), index.m, index.dim)
    return index
