import math
import unittest

import numpy as np

from slide_search_tool.core import (
    BinaryMosaicCode,
    MosaicSet,
    PatchEmbeddingMatrix,
    SemanticVector,
    SlideRecord,
    binarize,
    bytes_per_code,
    euclidean_distance,
    hamming_distance,
    l2_normalize,
    pack_bits,
    unpack_bits,
)
from slide_search_tool.errors import (
    DataError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    PreconditionError,
)


def loop_hamming(a_bits: np.ndarray, b_bits: np.ndarray) -> int:
    count = 0
    for x, y in zip(a_bits.tolist(), b_bits.tolist()):
        if x != y:
            count += 1
    return count


class TestBitPacking(unittest.TestCase):
    def test_pack_unpack_keeps_bit_positions(self) -> None:
        bits = np.zeros(70, dtype=bool)
        bits[[0, 5, 63, 64, 69]] = True
        words = pack_bits(bits)
        self.assertEqual(words.shape, (2,))
        self.assertEqual(int(words[0]), (1 << 0) | (1 << 5) | (1 << 63))
        self.assertEqual(int(words[1]), (1 << 0) | (1 << 5))
        np.testing.assert_array_equal(unpack_bits(words, 70), bits)

    def test_code_of_768_bits_and_16_mosaics_is_1536_bytes(self) -> None:
        rng = np.random.default_rng(0)
        code = BinaryMosaicCode(pack_bits(rng.integers(0, 2, (16, 768)).astype(bool)), 768)
        self.assertEqual(bytes_per_code(768), 96)
        self.assertEqual(len(code.to_bytes()), 1536)
        self.assertEqual(code.n_bytes, 1536)

    def test_code_bytes_round_trip_with_padding(self) -> None:
        rng = np.random.default_rng(1)
        bits = rng.integers(0, 2, (3, 12)).astype(bool)
        code = BinaryMosaicCode(pack_bits(bits), 12)
        raw = code.to_bytes()
        self.assertEqual(len(raw), 6)
        np.testing.assert_array_equal(BinaryMosaicCode.from_bytes(raw, 3, 12).bits(), bits)

    def test_nonzero_padding_bits_rejected(self) -> None:
        words = np.array([[1 << 10]], dtype=np.uint64)
        with self.assertRaises(DataError):
            BinaryMosaicCode(words, 4)

    def test_wrong_word_count_rejected(self) -> None:
        with self.assertRaises(DimensionError):
            BinaryMosaicCode(np.zeros((2, 3), dtype=np.uint64), 64)


class TestHamming(unittest.TestCase):
    def test_identity_is_zero(self) -> None:
        x = pack_bits(np.random.default_rng(2).integers(0, 2, 768).astype(bool))
        self.assertEqual(hamming_distance(x, x), 0)

    def test_complement_differs_everywhere(self) -> None:
        bits = np.random.default_rng(3).integers(0, 2, 768).astype(bool)
        self.assertEqual(hamming_distance(pack_bits(bits), pack_bits(~bits)), 768)

    def test_small_example(self) -> None:
        # 0b1010 vs 0b0110
        a = pack_bits([False, True, False, True])
        b = pack_bits([False, True, True, False])
        self.assertEqual(hamming_distance(a, b), 2)

    def test_matches_bit_loop(self) -> None:
        rng = np.random.default_rng(4)
        for _ in range(10000):
            n_bits = int(rng.integers(1, 200))
            a_bits = rng.integers(0, 2, n_bits).astype(bool)
            b_bits = rng.integers(0, 2, n_bits).astype(bool)
            self.assertEqual(
                hamming_distance(pack_bits(a_bits), pack_bits(b_bits)),
                loop_hamming(a_bits, b_bits),
            )

    def test_metric_axioms(self) -> None:
        rng = np.random.default_rng(5)
        for _ in range(200):
            a, b, c = (pack_bits(rng.integers(0, 2, 96).astype(bool)) for _ in range(3))
            self.assertEqual(hamming_distance(a, b), hamming_distance(b, a))
            self.assertLessEqual(
                hamming_distance(a, c), hamming_distance(a, b) + hamming_distance(b, c)
            )

    def test_length_mismatch(self) -> None:
        with self.assertRaises(DimensionError):
            hamming_distance(np.zeros(1, dtype=np.uint64), np.zeros(2, dtype=np.uint64))


class TestBinarize(unittest.TestCase):
    def test_zero_maps_to_zero_bit(self) -> None:
        code = binarize(MosaicSet(np.array([[-1.0, 0.0, 2.5, -0.1]])))
        np.testing.assert_array_equal(code.bits()[0], [False, False, True, False])

    def test_all_positive_row(self) -> None:
        code = binarize(MosaicSet(np.full((1, 10), 0.5)))
        self.assertTrue(code.bits().all())

    def test_negation_complements(self) -> None:
        rows = np.random.default_rng(6).standard_normal((4, 100))
        bits = binarize(MosaicSet(rows)).bits()
        np.testing.assert_array_equal(binarize(MosaicSet(-rows)).bits(), ~bits)

    def test_non_finite_rejected(self) -> None:
        with self.assertRaises(NumericError):
            binarize(MosaicSet(np.array([[1.0, math.nan]])))


class TestVectors(unittest.TestCase):
    def test_l2_normalize(self) -> None:
        np.testing.assert_allclose(l2_normalize([3, 4]).values, [0.6, 0.8], atol=1e-12)
        np.testing.assert_allclose(l2_normalize([1, 1, 1, 1]).values, [0.5] * 4, atol=1e-12)
        unit = l2_normalize([0.0, 1.0])
        np.testing.assert_array_equal(l2_normalize(unit.values).values, unit.values)

    def test_zero_vector_is_degenerate(self) -> None:
        with self.assertRaises(DegenerateInputError):
            l2_normalize([0.0, 0.0])

    def test_semantic_vector_requires_unit_norm(self) -> None:
        with self.assertRaises(PreconditionError):
            SemanticVector(np.array([1.0, 1.0]))

    def test_euclidean_distance(self) -> None:
        v = l2_normalize([0.6, 0.8])
        self.assertEqual(euclidean_distance(v, v), 0.0)
        self.assertAlmostEqual(euclidean_distance([1.0, 0.0], [0.0, 1.0]), math.sqrt(2), 12)
        self.assertAlmostEqual(euclidean_distance([0.6, 0.8], [1.0, 0.0]), 0.894427191, 8)

    def test_distance_decreases_with_cosine(self) -> None:
        rng = np.random.default_rng(7)
        anchor = l2_normalize(rng.standard_normal(16))
        others = [l2_normalize(rng.standard_normal(16)) for _ in range(50)]
        others.sort(key=lambda v: float(anchor.values @ v.values))
        distances = [euclidean_distance(anchor, v) for v in others]
        self.assertEqual(distances, sorted(distances, reverse=True))

    def test_dim_mismatch(self) -> None:
        with self.assertRaises(DimensionError):
            euclidean_distance([1.0, 0.0], [1.0, 0.0, 0.0])


class TestTypes(unittest.TestCase):
    def test_patch_matrix_is_read_only(self) -> None:
        patches = PatchEmbeddingMatrix(np.ones((2, 3)))
        with self.assertRaises(ValueError):
            patches.data[0, 0] = 5.0

    def test_empty_patch_matrix_rejected(self) -> None:
        with self.assertRaises(DimensionError):
            PatchEmbeddingMatrix(np.zeros((0, 3)))

    def test_record_dims_must_agree(self) -> None:
        code = BinaryMosaicCode(pack_bits(np.ones((2, 4), dtype=bool)), 4)
        with self.assertRaises(DimensionError):
            SlideRecord("a", None, code, l2_normalize([1.0, 0.0, 0.0]))
