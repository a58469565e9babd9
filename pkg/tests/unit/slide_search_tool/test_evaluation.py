import math
import os
import unittest
from collections import Counter

import numpy as np
from pyfakefs.fake_filesystem_unittest import TestCase as FakeFsTestCase

from slide_search_tool.core import BinaryMosaicCode, SlideRecord, l2_normalize, pack_bits
from slide_search_tool.errors import DataError, FormatError
from slide_search_tool.evaluation import (
    Directions,
    LabeledRanking,
    RaterTable,
    accuracy_suite,
    compare_outcomes,
    compare_rankings,
    consistency_distribution,
    evaluate_direction,
    fleiss_kappa,
    interpret_kappa,
    mcnemar,
    mcnemar_test,
    panel_mv_accuracy,
    rater_table_from_labels,
    read_labels,
    read_rankings,
    read_rater_table,
    top_k_majority,
    write_rankings,
)
from slide_search_tool.index import FusionConfig, RetrievalIndex

FIXTURES_PATH = os.path.abspath(os.path.join(os.path.dirname(__file__), "../../", "fixtures"))


def recount_majority(query: str, retrieved: list, k: int) -> bool:
    prefix = retrieved[:k]
    counts = Counter(prefix)
    best = max(counts.values())
    for label in prefix:
        if counts[label] == best:
            return label == query
    return False


class TestTopKMajority(unittest.TestCase):
    def test_examples(self) -> None:
        self.assertTrue(top_k_majority(LabeledRanking("A", ("A", "B")), 1))
        self.assertTrue(top_k_majority(LabeledRanking("A", ("B", "A", "A")), 3))
        self.assertTrue(top_k_majority(LabeledRanking("A", ("A", "B", "C")), 3))
        self.assertFalse(top_k_majority(LabeledRanking("A", ("B", "A", "C")), 3))
        self.assertFalse(top_k_majority(LabeledRanking("A", ("B", "B", "A", "A", "A")), 3))

    def test_short_prefix_warns(self) -> None:
        with self.assertLogs(level="WARNING"):
            self.assertTrue(top_k_majority(LabeledRanking("A", ("A", "B")), 5))

    def test_acc_at_one_equals_mv_at_one(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(200):
            ranking = LabeledRanking(int(rng.integers(3)), tuple(rng.integers(0, 3, 5).tolist()))
            self.assertEqual(
                top_k_majority(ranking, 1), ranking.retrieved_labels[0] == ranking.query_label
            )

    def test_matches_recount(self) -> None:
        rng = np.random.default_rng(1)
        rankings = []
        for _ in range(1000):
            rankings.append(
                LabeledRanking(int(rng.integers(4)), tuple(rng.integers(0, 4, 5).tolist()))
            )
        suite = accuracy_suite(rankings)
        for k, name in ((1, "acc@1"), (3, "mv@3"), (5, "mv@5")):
            expected = sum(
                recount_majority(r.query_label, list(r.retrieved_labels), k) for r in rankings
            )
            self.assertAlmostEqual(suite[name], expected / 1000)

    def test_suite_extremes(self) -> None:
        rankings = [LabeledRanking("A", ("A",) * 5), LabeledRanking("B", ("B",) * 5)]
        self.assertEqual(accuracy_suite(rankings), {"acc@1": 1.0, "mv@3": 1.0, "mv@5": 1.0})
        with self.assertRaises(DataError):
            accuracy_suite([])


class TestFleissKappa(unittest.TestCase):
    def test_hand_example(self) -> None:
        kappa = fleiss_kappa(RaterTable(np.array([[4, 0], [2, 2], [0, 4]])))
        self.assertAlmostEqual(kappa, 5 / 9, delta=1e-9)  # type: ignore[arg-type]

    def test_perfect_agreement(self) -> None:
        self.assertAlmostEqual(fleiss_kappa(RaterTable(np.array([[3, 0], [0, 3]]))), 1.0)

    def test_chance_agreement(self) -> None:
        # P_bar = 1/3 and P_e = 1/3
        kappa = fleiss_kappa(RaterTable(np.array([[2, 1, 0], [0, 2, 1], [1, 0, 2]])))
        self.assertAlmostEqual(kappa, 0.0, delta=1e-9)  # type: ignore[arg-type]

    def test_single_category_is_degenerate(self) -> None:
        with self.assertLogs(level="WARNING"):
            kappa = fleiss_kappa(RaterTable(np.array([[4], [4]])))
        self.assertIsNone(kappa)
        self.assertEqual(interpret_kappa(kappa), "degenerate")

    def test_never_above_one(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(200):
            labels = rng.integers(0, 3, (6, 4)).tolist()
            kappa = fleiss_kappa(rater_table_from_labels(labels))
            if kappa is not None:
                self.assertLessEqual(kappa, 1.0 + 1e-12)

    def test_invalid_tables(self) -> None:
        with self.assertRaises(DataError):
            RaterTable(np.array([[4, 0], [2, 1]]))
        with self.assertRaises(DataError):
            fleiss_kappa(RaterTable(np.array([[2, 2]])))

    def test_interpretation(self) -> None:
        self.assertEqual(interpret_kappa(-0.1), "poor")
        self.assertEqual(interpret_kappa(0.19), "slight")
        self.assertEqual(interpret_kappa(5 / 9), "moderate")
        self.assertEqual(interpret_kappa(1.0), "almost perfect")

    def test_table_from_labels(self) -> None:
        table = rater_table_from_labels([["a", "b", "a"], ["b", "b", "b"]])
        self.assertEqual(table.categories, ("a", "b"))
        np.testing.assert_array_equal(table.counts, [[2, 1], [0, 3]])
        self.assertEqual(table.n_raters, 3)


class TestPanelAndConsistency(unittest.TestCase):
    def test_panel_examples(self) -> None:
        self.assertEqual(panel_mv_accuracy([[True] * 4] * 3), 1.0)
        self.assertEqual(panel_mv_accuracy([[True, True, False, False]] * 5), 0.0)
        self.assertEqual(panel_mv_accuracy([[True, True, False, False]] * 5, threshold=2), 1.0)

    def test_panel_matches_recount(self) -> None:
        rng = np.random.default_rng(3)
        for _ in range(1000):
            decisions = rng.integers(0, 2, (7, 4)).astype(bool)
            expected = sum(1 for row in decisions.tolist() if sum(row) >= 3) / 7
            self.assertAlmostEqual(panel_mv_accuracy(decisions.tolist()), expected)

    def test_consistency_examples(self) -> None:
        identical = consistency_distribution([["a"] * 4] * 3)
        self.assertEqual(identical["4/4"], 1.0)
        distinct = consistency_distribution([["a", "b", "c", "d"]])
        self.assertEqual(distinct["other"], 1.0)
        self.assertEqual(set(distinct), {"2/4", "3/4", "4/4", "other"})

    def test_consistency_matches_recount(self) -> None:
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, (1000, 4)).tolist()
        shares = consistency_distribution(labels)
        largest = [max(Counter(row).values()) for row in labels]
        for size in (2, 3, 4):
            self.assertAlmostEqual(shares[f"{size}/4"], largest.count(size) / 1000)
        self.assertAlmostEqual(shares["other"], largest.count(1) / 1000)


class TestMcNemar(unittest.TestCase):
    def test_exact_example(self) -> None:
        result = mcnemar_test(5, 1)
        self.assertTrue(result.exact)
        self.assertAlmostEqual(result.p_value, 0.21875, delta=1e-9)

    def test_chi_square_example(self) -> None:
        result = mcnemar_test(40, 10)
        self.assertFalse(result.exact)
        self.assertAlmostEqual(result.statistic, 16.82)  # type: ignore[arg-type]
        self.assertLess(result.p_value, 0.001)

    def test_symmetric_and_capped(self) -> None:
        for b, c in ((3, 3), (0, 0), (7, 2), (30, 12)):
            self.assertEqual(mcnemar(b, c), mcnemar(c, b))
        self.assertEqual(mcnemar(3, 3), 1.0)
        self.assertEqual(mcnemar(0, 0), 1.0)

    def test_chi_square_tail(self) -> None:
        result = mcnemar_test(33, 16)
        self.assertAlmostEqual(result.statistic, 16**2 / 49)  # type: ignore[arg-type]
        self.assertAlmostEqual(
            result.p_value, math.erfc(math.sqrt(16**2 / 49 / 2)), delta=1e-12
        )

    def test_compare_outcomes(self) -> None:
        result = compare_outcomes([True, True, False, True], [False, True, True, False])
        self.assertEqual((result.b, result.c), (2, 1))
        with self.assertRaises(DataError):
            compare_outcomes([True], [])


class TestRaterFile(unittest.TestCase):
    def test_read_rater_table(self) -> None:
        study = read_rater_table(os.path.join(FIXTURES_PATH, "raters.csv"))
        self.assertEqual(study.rater_names, ["rater_a", "rater_b", "rater_c", "rater_d"])
        self.assertEqual(study.truth, ["tumor", "tumor", "normal", "normal"])
        self.assertEqual(panel_mv_accuracy(study.decisions()), 0.75)
        shares = consistency_distribution(study.labels)
        self.assertEqual(shares["4/4"], 0.5)
        self.assertEqual(shares["3/4"], 0.25)
        self.assertEqual(shares["2/4"], 0.25)


def labeled_index() -> RetrievalIndex:
    index = RetrievalIndex(1, 4, label_names=["x", "y"])
    vectors = {"x1": [1, 0.2, 0, 0], "x2": [1, 0.1, -0.1, 0], "x3": [0.9, 0.3, 0, -0.1]}
    vectors.update({"y1": [0, 0, 1, 0.2], "y2": [0, -0.1, 1, 0.1], "y3": [-0.1, 0, 0.9, 0.3]})
    for slide_id, vector in vectors.items():
        bits = [value > 0 for value in vector]
        index.append(
            SlideRecord(
                slide_id=slide_id,
                label=0 if slide_id.startswith("x") else 1,
                mosaic_code=BinaryMosaicCode(pack_bits([bits]), 4),
                semantic=l2_normalize(vector),
                text_semantic=l2_normalize(vector),
            )
        )
    return index


class TestEvaluateDirection(FakeFsTestCase):
    def setUp(self) -> None:
        self.setUpPyfakefs()
        self.index = labeled_index()

    def test_every_direction_separates_clusters(self) -> None:
        for direction in Directions.ALL:
            report = evaluate_direction(self.index, direction, FusionConfig(), ks=(1,))
            self.assertEqual(report.queries, 6, direction)
            self.assertEqual(report.metrics, {"acc@1": 1.0}, direction)

    def test_rankings_round_trip_through_csv(self) -> None:
        report = evaluate_direction(self.index, Directions.IMAGE_TO_IMAGE, FusionConfig())
        write_rankings("rankings.csv", report)
        rankings = read_rankings("rankings.csv")
        self.assertEqual(len(rankings), 6)
        self.assertEqual(accuracy_suite(rankings), report.metrics)
        self.assertEqual(len(rankings[0].retrieved_labels), 5)

    def test_label_override(self) -> None:
        self.fs.create_file("labels.csv", contents="slide_id,label\nx1,x\nx2,x\ny1,x\n")
        labels = read_labels("labels.csv")
        report = evaluate_direction(self.index, Directions.IMAGE_TO_IMAGE, FusionConfig(), labels)
        self.assertEqual(report.queries, 3)
        self.assertEqual(report.rankings[0].query_id, "x1")

    def test_compare_rankings(self) -> None:
        self.fs.create_file(
            "a.csv",
            contents="query_id,query_label,rank,candidate_label\n"
            + "q1,A,1,A\nq2,B,1,B\nq3,A,1,B\n",
        )
        self.fs.create_file(
            "b.csv",
            contents="query_id,query_label,rank,candidate_label\n"
            + "q1,A,1,B\nq2,B,1,B\nq3,A,1,A\n",
        )
        results = compare_rankings(read_rankings("a.csv"), read_rankings("b.csv"), ks=(1,))
        self.assertEqual((results["acc@1"].b, results["acc@1"].c), (1, 1))
        self.assertEqual(results["acc@1"].p_value, 1.0)

    def test_malformed_rankings(self) -> None:
        self.fs.create_file(
            "bad.csv", contents="query_id,query_label,rank,candidate_label\nq1,A,zero,A\n"
        )
        with self.assertRaises(FormatError):
            read_rankings("bad.csv")
        self.fs.create_file("short.csv", contents="query_id,rank\nq1,1\n")
        with self.assertRaises(DataError):
            read_rankings("short.csv")
