"""Retrieval accuracy, inter-rater agreement and paired significance tests."""

import logging
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
from schema import SchemaError
from scipy.special import erfc
from scipy.stats import binom

from slide_search_tool.constants import KAPPA_BANDS, MCNEMAR_EXACT_LIMIT
from slide_search_tool.errors import DataError, FormatError
from slide_search_tool.index import (
    FusionConfig,
    RetrievalIndex,
    query_from_record,
    query_image,
    query_image_to_text,
    query_text_to_image,
    query_text_to_text,
)
from slide_search_tool.schemas import RANKING_ROW_SCHEMA
from slide_search_tool.util import read_csv_dicts, write_csv

DEFAULT_KS = (1, 3, 5)
UNLABELED = "-"
RANKINGS_HEADER = ["query_id", "query_label", "rank", "candidate_id", "candidate_label", "distance"]


class Directions:
    IMAGE_TO_IMAGE = "image-to-image"
    TEXT_TO_IMAGE = "text-to-image"
    IMAGE_TO_TEXT = "image-to-text"
    TEXT_TO_TEXT = "text-to-text"

    ALL = (IMAGE_TO_IMAGE, TEXT_TO_IMAGE, IMAGE_TO_TEXT, TEXT_TO_TEXT)


@dataclass(frozen=True)
class LabeledRanking:
    query_label: Hashable
    retrieved_labels: Tuple[Hashable, ...]
    query_id: Optional[str] = None


@dataclass(frozen=True)
class RaterTable:
    """subjects x categories counts; every row sums to the number of raters."""

    counts: np.ndarray
    categories: Tuple[Hashable, ...] = ()

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.size == 0:
            raise DataError(f"rater table must be a non-empty 2-D matrix, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer) or (counts < 0).any():
            raise DataError("rater counts must be non-negative integers")
        if len(set(counts.sum(axis=1).tolist())) != 1:
            raise DataError("every subject must be rated by the same number of raters")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def n_subjects(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n_categories(self) -> int:
        return int(self.counts.shape[1])

    @property
    def n_raters(self) -> int:
        return int(self.counts[0].sum())


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    p_value: float
    exact: bool
    statistic: Optional[float] = None


def top_k_majority(r: LabeledRanking, k: int) -> bool:
    """True iff the modal label among the first k results is the query label.

    Ties between modal labels go to the label seen at the best rank.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    prefix = r.retrieved_labels[:k]
    if len(prefix) < k:
        logging.warning(
            "query %s has %d results, evaluating top-%d on the available prefix",
            r.query_id or "",
            len(prefix),
            k,
        )
    if not prefix:
        return False
    counts = Counter(prefix)
    best = max(counts.values())
    modal = next(label for label in prefix if counts[label] == best)
    return bool(modal == r.query_label)


def metric_name(k: int) -> str:
    return "acc@1" if k == 1 else f"mv@{k}"


def accuracy_suite(
    rankings: Sequence[LabeledRanking], ks: Sequence[int] = DEFAULT_KS
) -> Dict[str, float]:
    if not rankings:
        raise DataError("cannot compute accuracy over an empty set of rankings")
    return {
        metric_name(k): sum(top_k_majority(r, k) for r in rankings) / len(rankings) for k in ks
    }


def fleiss_kappa(t: RaterTable) -> Optional[float]:
    """Fleiss' kappa, or None when expected agreement is 1 (a single category used)."""
    if t.n_raters < 2 or t.n_subjects < 2:
        raise DataError(
            f"kappa needs >= 2 raters and >= 2 subjects, got {t.n_raters} and {t.n_subjects}"
        )
    n = t.n_raters
    counts = t.counts.astype(np.float64)
    p_i = ((counts**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / (t.n_subjects * n)
    p_e = float((p_j**2).sum())
    if math.isclose(p_e, 1.0, rel_tol=0.0, abs_tol=1e-12):
        logging.warning("all ratings fall in one category, kappa is undefined")
        return None
    return float((p_bar - p_e) / (1.0 - p_e))


def interpret_kappa(kappa: Optional[float]) -> str:
    if kappa is None:
        return "degenerate"
    if kappa < 0:
        return "poor"
    for upper, band in KAPPA_BANDS:
        if kappa <= upper:
            return band
    return KAPPA_BANDS[-1][1]


def rater_table_from_labels(labels: Sequence[Sequence[Hashable]]) -> RaterTable:
    """Builds category counts from a subjects x raters label matrix."""
    if not labels:
        raise DataError("no subjects to tabulate")
    categories = sorted({label for row in labels for label in row}, key=str)
    column = {label: j for j, label in enumerate(categories)}
    counts = np.zeros((len(labels), len(categories)), dtype=np.int64)
    for i, row in enumerate(labels):
        for label in row:
            counts[i, column[label]] += 1
    return RaterTable(counts, tuple(categories))


def panel_mv_accuracy(decisions: Sequence[Sequence[bool]], threshold: int = 3) -> float:
    """Fraction of subjects where at least `threshold` raters were correct."""
    matrix = np.asarray(decisions, dtype=bool)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise DataError("decisions must be a non-empty subjects x raters matrix")
    return float((matrix.sum(axis=1) >= threshold).mean())


def consistency_distribution(labels: Sequence[Sequence[Hashable]]) -> Dict[str, float]:
    """Share of subjects by size of their largest agreeing group.

    Keys run "2/n" .. "n/n"; subjects with no two raters agreeing land in "other".
    """
    if not labels:
        raise DataError("no subjects to summarize")
    n_raters = {len(row) for row in labels}
    if len(n_raters) != 1:
        raise DataError("every subject must be rated by the same number of raters")
    n = n_raters.pop()
    buckets = {f"{k}/{n}": 0 for k in range(2, n + 1)}
    buckets["other"] = 0
    for row in labels:
        largest = max(Counter(row).values()) if row else 0
        buckets[f"{largest}/{n}" if largest >= 2 else "other"] += 1
    return {key: count / len(labels) for key, count in buckets.items()}


def mcnemar(b: int, c: int) -> float:
    """Two-sided McNemar p-value for discordant counts b and c.

    Exact binomial below MCNEMAR_EXACT_LIMIT discordant pairs, otherwise the
    continuity-corrected chi-square with one degree of freedom.
    """
    return mcnemar_test(b, c).p_value


def mcnemar_test(b: int, c: int) -> McNemarResult:
    if b < 0 or c < 0:
        raise DataError(f"discordant counts must be non-negative, got b={b} c={c}")
    n = b + c
    if n == 0:
        return McNemarResult(b, c, 1.0, exact=True)
    if n < MCNEMAR_EXACT_LIMIT:
        p_value = min(1.0, 2.0 * float(binom.cdf(min(b, c), n, 0.5)))
        return McNemarResult(b, c, p_value, exact=True)
    statistic = (abs(b - c) - 1) ** 2 / n
    return McNemarResult(
        b, c, float(erfc(math.sqrt(statistic / 2.0))), exact=False, statistic=statistic
    )


def compare_outcomes(first: Sequence[bool], second: Sequence[bool]) -> McNemarResult:
    """McNemar test on paired per-query correctness of two methods."""
    if len(first) != len(second):
        raise DataError(f"outcome vectors differ in length: {len(first)} vs {len(second)}")
    b = sum(1 for x, y in zip(first, second) if x and not y)
    c = sum(1 for x, y in zip(first, second) if y and not x)
    return mcnemar_test(b, c)


def compare_rankings(
    first: Sequence[LabeledRanking],
    second: Sequence[LabeledRanking],
    ks: Sequence[int] = DEFAULT_KS,
) -> Dict[str, McNemarResult]:
    """Pairs rankings by query id and tests every metric."""
    by_id = {r.query_id: r for r in second}
    paired = [(r, by_id[r.query_id]) for r in first if r.query_id in by_id]
    if not paired:
        raise DataError("the two ranking sets share no query ids")
    if len(paired) < len(first) or len(paired) < len(second):
        logging.warning("comparing the %d queries present in both ranking sets", len(paired))
    return {
        metric_name(k): compare_outcomes(
            [top_k_majority(a, k) for a, _ in paired], [top_k_majority(b, k) for _, b in paired]
        )
        for k in ks
    }


def read_rankings(path: str) -> List[LabeledRanking]:
    """Groups a rankings CSV by query_id; rows may come in any order."""
    rows = read_csv_dicts(path, ["query_id", "query_label", "rank", "candidate_label"])
    grouped: Dict[str, List[Tuple[int, str]]] = defaultdict(list)
    labels: Dict[str, str] = {}
    for line_number, row in enumerate(rows, start=2):
        try:
            valid = RANKING_ROW_SCHEMA.validate(dict(row))
        except SchemaError as err:
            raise FormatError(f"line {line_number}: {err}", path=path) from err
        query_id = valid["query_id"]
        if labels.setdefault(query_id, valid["query_label"]) != valid["query_label"]:
            raise FormatError(f"line {line_number}: query {query_id} changes label", path=path)
        grouped[query_id].append((valid["rank"], valid["candidate_label"]))
    rankings = []
    for query_id, entries in grouped.items():
        entries.sort()
        rankings.append(
            LabeledRanking(labels[query_id], tuple(label for _, label in entries), query_id)
        )
    return rankings


@dataclass
class RaterStudy:
    subject_ids: List[str]
    labels: List[List[str]]
    rater_names: List[str]
    truth: Optional[List[str]] = None

    def decisions(self) -> List[List[bool]]:
        if self.truth is None:
            raise DataError("rater table has no truth column")
        return [[label == truth for label in row] for row, truth in zip(self.labels, self.truth)]


def read_rater_table(path: str) -> RaterStudy:
    """CSV with subject_id, an optional truth column and one column per rater."""
    rows = read_csv_dicts(path, ["subject_id"])
    if not rows:
        raise DataError(f"{path}: no subjects")
    raters = [name for name in rows[0] if name not in ("subject_id", "truth")]
    if len(raters) < 2:
        raise DataError(f"{path}: need at least 2 rater columns, got {raters}")
    has_truth = "truth" in rows[0]
    study = RaterStudy([], [], raters, [] if has_truth else None)
    for line_number, row in enumerate(rows, start=2):
        labels = [(row[name] or "").strip() for name in raters]
        if not all(labels):
            raise FormatError(f"line {line_number}: missing rater label", path=path)
        study.subject_ids.append(row["subject_id"])
        study.labels.append(labels)
        if study.truth is not None:
            study.truth.append((row["truth"] or "").strip())
    return study


@dataclass
class DirectionReport:
    direction: str
    rankings: List[LabeledRanking]
    metrics: Dict[str, float]
    seconds: float
    rows: List[List[object]] = field(default_factory=list)

    @property
    def queries(self) -> int:
        return len(self.rankings)


def _ranking_rows(
    query_id: str, query_label: str, matches: Sequence[Tuple[str, float]], labels: Dict[str, str]
) -> List[List[object]]:
    return [
        [
            query_id,
            query_label,
            rank,
            candidate_id,
            labels.get(candidate_id, UNLABELED),
            repr(distance),
        ]
        for rank, (candidate_id, distance) in enumerate(matches, start=1)
    ]


def evaluate_direction(
    index: RetrievalIndex,
    direction: str,
    cfg: FusionConfig,
    labels: Optional[Dict[str, str]] = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> DirectionReport:
    """Leave-one-out retrieval of every labeled record against the rest of the index."""
    if labels is None:
        labels = {
            r.slide_id: name
            for r in index.records
            if (name := index.label_name(r)) is not None
        }
    depth = max(ks)
    rankings: List[LabeledRanking] = []
    rows: List[List[object]] = []
    started = time.perf_counter()
    for record in index.records:
        if record.slide_id not in labels:
            continue
        query_text = record.text_semantic
        if direction in (Directions.TEXT_TO_IMAGE, Directions.TEXT_TO_TEXT) and query_text is None:
            continue
        if direction == Directions.IMAGE_TO_IMAGE:
            results = query_image(query_from_record(record), index, replace(cfg, top_k=depth))
            matches = [(r.candidate_id, r.fused_distance) for r in results]
        elif direction == Directions.TEXT_TO_IMAGE and query_text is not None:
            found = query_text_to_image(query_text, index, depth, exclude_id=record.slide_id)
            matches = [(m.candidate_id, m.distance) for m in found]
        elif direction == Directions.IMAGE_TO_TEXT:
            found = query_image_to_text(record.semantic, index, depth, exclude_id=record.slide_id)
            matches = [(m.candidate_id, m.distance) for m in found]
        elif direction == Directions.TEXT_TO_TEXT and query_text is not None:
            found = query_text_to_text(query_text, index, depth, exclude_id=record.slide_id)
            matches = [(m.candidate_id, m.distance) for m in found]
        else:
            raise DataError(f"unknown retrieval direction {direction!r}")
        query_label = labels[record.slide_id]
        rankings.append(
            LabeledRanking(
                query_label,
                tuple(labels.get(candidate_id, UNLABELED) for candidate_id, _ in matches),
                record.slide_id,
            )
        )
        rows.extend(_ranking_rows(record.slide_id, query_label, matches, labels))
    seconds = time.perf_counter() - started
    if not rankings:
        raise DataError(f"no labeled queries available for {direction}")
    logging.info("%s: %d queries in %.3f s", direction, len(rankings), seconds)
    return DirectionReport(direction, rankings, accuracy_suite(rankings, ks), seconds, rows)


def write_rankings(path: str, report: DirectionReport) -> None:
    write_csv(path, RANKINGS_HEADER, report.rows)


def read_labels(path: str) -> Dict[str, str]:
    rows = read_csv_dicts(path, ["slide_id", "label"])
    labels = {}
    for row in rows:
        if row["label"]:
            labels[row["slide_id"]] = row["label"]
    if not labels:
        raise DataError(f"{path}: no labeled slides")
    return labels
