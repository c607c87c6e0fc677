import math
import unittest

import numpy as np
import pytest

from rarevar.models.pileup import MatchedPileup, PileupMatrix, RegionMap, observed_error_rate
from rarevar.tests.conftest import make_matrix
from rarevar.utils.error_handling import InputError, ValidationError
from rarevar.utils.pileup_parser import (
    load_matched,
    load_pileup,
    load_region_map,
    write_pileup,
    write_region_map,
)

pytestmark = pytest.mark.pipeline


def tsv(*rows):
    return "\n".join("\t".join(str(v) for v in row) for row in rows) + "\n"


UNMATCHED_HEADER = ("contig", "pos", "ref", "x_s1", "n_s1", "x_s2", "n_s2")
MATCHED_HEADER = ("contig", "pos", "ref", "xn_p1", "nn_p1", "xt_p1", "nt_p1")


@pytest.fixture
def unmatched_file(write_text):
    return write_text("pileup.tsv", tsv(
        UNMATCHED_HEADER,
        ("chr1", 10, "a", 1, 100, 0, 90),
        ("chr1", 11, "C", 3, 120, 0, 0),
        ("chr2", 5, "G", 0, 80, 7, 70),
    ))


def test_load_unmatched(unmatched_file):
    m = load_pileup(unmatched_file)
    assert m.samples == ["s1", "s2"]
    assert m.position_ids == ["chr1:10", "chr1:11", "chr2:5"]
    assert list(m.reference_base) == ["A", "C", "G"]
    np.testing.assert_array_equal(m.x, [[1, 0], [3, 0], [0, 7]])
    np.testing.assert_array_equal(m.n, [[100, 90], [120, 0], [80, 70]])


def test_zero_depth_cells_are_kept(unmatched_file):
    m = load_pileup(unmatched_file)
    rates = m.error_rates()
    assert math.isnan(rates[1, 1])
    assert rates[0, 0] == pytest.approx(0.01)
    assert math.isnan(observed_error_rate(m, 1, 1))


def test_small_chunks_give_the_same_matrix(unmatched_file):
    whole = load_pileup(unmatched_file)
    chunked = load_pileup(unmatched_file, chunksize=1)
    np.testing.assert_array_equal(whole.x, chunked.x)
    np.testing.assert_array_equal(whole.coords, chunked.coords)


def test_provenance_header_is_skipped(write_text):
    path = write_text("with_header.tsv", "# rarevar 0.1.0 seed=1\n" + tsv(
        UNMATCHED_HEADER,
        ("chr1", 1, "A", 0, 10, 0, 10),
        ("chr1", 2, "A", 11, 10, 0, 10),
    ))
    with pytest.raises(InputError) as excinfo:
        load_pileup(path)
    assert excinfo.value.code_name == "count_exceeds_depth"
    assert excinfo.value.line_number == 4


class TestMalformedFiles(unittest.TestCase):

    def setUp(self):
        import tempfile
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, text, name="bad.tsv"):
        path = f"{self.tmp.name}/{name}"
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def assert_input_error(self, path, code, line=None):
        with self.assertRaises(InputError) as ctx:
            load_pileup(path)
        self.assertEqual(ctx.exception.code_name, code)
        self.assertEqual(ctx.exception.resource_id, path)
        if line is not None:
            self.assertEqual(ctx.exception.line_number, line)
        self.assertEqual(ctx.exception.exit_code, 1)
        return ctx.exception

    def test_missing_file(self):
        error = self.assert_input_error(f"{self.tmp.name}/nope.tsv", "file_not_found")
        self.assertIn("nope.tsv", error.recovery_hint)

    def test_count_exceeds_depth(self):
        path = self.write(tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 0, 10, 0, 10), ("chr1", 2, "A", 0, 10, 12, 10)))
        self.assert_input_error(path, "count_exceeds_depth", line=3)

    def test_non_integer_count(self):
        path = self.write(tsv(UNMATCHED_HEADER, ("chr1", 1, "A", "x", 10, 0, 10)))
        error = self.assert_input_error(path, "malformed_line", line=2)
        self.assertIn("x_s1", error.message)

    def test_negative_depth(self):
        path = self.write(tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 0, -4, 0, 10)))
        self.assert_input_error(path, "malformed_line", line=2)

    def test_missing_depth_column(self):
        path = self.write(tsv(("contig", "pos", "ref", "x_s1", "n_s1", "x_s2"), ("chr1", 1, "A", 0, 10, 0)))
        self.assert_input_error(path, "inconsistent_samples", line=1)

    def test_unknown_column(self):
        path = self.write(tsv(("contig", "pos", "ref", "x_s1", "n_s1", "depth"), ("chr1", 1, "A", 0, 10, 0)))
        self.assert_input_error(path, "inconsistent_samples", line=1)

    def test_duplicate_position(self):
        path = self.write(tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 0, 10, 0, 10), ("chr1", 1, "A", 0, 10, 0, 10)))
        self.assert_input_error(path, "duplicate_position", line=3)

    def test_unsorted_positions(self):
        path = self.write(tsv(
            UNMATCHED_HEADER,
            ("chr1", 5, "A", 0, 10, 0, 10),
            ("chr1", 6, "A", 0, 10, 0, 10),
            ("chr1", 2, "A", 0, 10, 0, 10),
        ))
        self.assert_input_error(path, "unsorted_positions", line=4)

    def test_bad_reference_base(self):
        path = self.write(tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 0, 10, 0, 10), ("chr1", 2, "N", 0, 10, 0, 10)))
        self.assert_input_error(path, "malformed_line", line=3)


class TestMatched(unittest.TestCase):

    def setUp(self):
        import tempfile
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, name, text):
        path = f"{self.tmp.name}/{name}"
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_single_matched_file(self):
        path = self.write("matched.tsv", tsv(MATCHED_HEADER, ("chr1", 1, "T", 1, 50, 9, 60), ("chr1", 2, "G", 0, 40, 0, 0)))
        data = load_pileup(path, "matched")
        self.assertIsInstance(data, MatchedPileup)
        self.assertEqual(data.samples, ["p1"])
        np.testing.assert_array_equal(data.normal.x[:, 0], [1, 0])
        np.testing.assert_array_equal(data.tumor.n[:, 0], [60, 0])

    def test_tumor_count_exceeds_depth(self):
        path = self.write("matched.tsv", tsv(MATCHED_HEADER, ("chr1", 1, "T", 1, 50, 61, 60)))
        with self.assertRaises(InputError) as ctx:
            load_pileup(path, "matched")
        self.assertEqual(ctx.exception.code_name, "count_exceeds_depth")

    def test_paired_files(self):
        normal = self.write("normal.tsv", tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 0, 10, 1, 10)))
        tumor = self.write("tumor.tsv", tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 4, 12, 1, 11)))
        data = load_matched(normal, tumor)
        self.assertEqual(data.samples, ["s1", "s2"])
        self.assertEqual(int(data.tumor.x[0, 0]), 4)

    def test_position_sets_differ(self):
        normal = self.write("normal.tsv", tsv(UNMATCHED_HEADER, ("chr1", 1, "A", 0, 10, 1, 10)))
        tumor = self.write("tumor.tsv", tsv(UNMATCHED_HEADER, ("chr1", 2, "A", 4, 12, 1, 11)))
        with self.assertRaises(InputError) as ctx:
            load_matched(normal, tumor)
        self.assertEqual(ctx.exception.code_name, "position_sets_differ")

    def test_unpaired_samples(self):
        normal = make_matrix([[0, 0]], [[10, 10]], samples=["a", "b"])
        tumor = make_matrix([[0, 0]], [[10, 10]], samples=["b", "a"])
        with self.assertRaises(ValidationError) as ctx:
            MatchedPileup(normal, tumor)
        self.assertEqual(ctx.exception.code_name, "unpaired_samples")

    def test_control_pair_uses_one_sample_twice(self):
        m = make_matrix([[1, 2], [3, 4]], [[10, 10], [10, 10]], samples=["a", "b"])
        pair = MatchedPileup.from_control(m, "b")
        self.assertEqual(pair.samples, ["b"])
        np.testing.assert_array_equal(pair.normal.x, pair.tumor.x)


def test_write_then_load(tmp_path, small_matched):
    path = str(tmp_path / "matched.tsv")
    write_pileup(small_matched.data, path, header="# provenance")
    loaded = load_pileup(path, "matched")
    np.testing.assert_array_equal(loaded.tumor.x, small_matched.data.tumor.x)
    assert loaded.samples == small_matched.data.samples


class TestRegionMap(unittest.TestCase):

    def setUp(self):
        import tempfile
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.matrix = make_matrix([[0], [0], [0]], [[10], [10], [10]])

    def write(self, text):
        path = f"{self.tmp.name}/regions.tsv"
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_aligned_to_matrix_order(self):
        path = self.write(tsv(("contig", "pos", "region_id", "candidate"),
                              ("chr1", 3, 2, 0), ("chr1", 1, 1, 1), ("chr1", 2, 1, 0)))
        regions = load_region_map(path, self.matrix)
        np.testing.assert_array_equal(regions.region_ids, [1, 1, 2])
        np.testing.assert_array_equal(regions.candidates, [True, False, False])
        np.testing.assert_array_equal(regions.regions, [1, 2])

    def test_position_without_region(self):
        path = self.write(tsv(("contig", "pos", "region_id"), ("chr1", 1, 1), ("chr1", 2, 1)))
        with self.assertRaises(InputError) as ctx:
            load_region_map(path, self.matrix)
        self.assertEqual(ctx.exception.code_name, "missing_region")

    def test_position_in_two_regions(self):
        path = self.write(tsv(("contig", "pos", "region_id"), ("chr1", 1, 1), ("chr1", 1, 2), ("chr1", 2, 1)))
        with self.assertRaises(InputError) as ctx:
            load_region_map(path, self.matrix)
        self.assertEqual(ctx.exception.code_name, "duplicate_position")
        self.assertEqual(ctx.exception.line_number, 3)

    def test_written_map_loads_back(self):
        path = f"{self.tmp.name}/out.tsv"
        write_region_map(RegionMap([4, 4, 9], [False, True, False]), self.matrix, path)
        regions = load_region_map(path, self.matrix)
        np.testing.assert_array_equal(regions.region_ids, [4, 4, 9])


class TestPileupMatrix(unittest.TestCase):

    def test_count_exceeds_depth(self):
        with self.assertRaises(ValidationError) as ctx:
            make_matrix([[5]], [[4]])
        self.assertEqual(ctx.exception.code_name, "count_exceeds_depth")

    def test_unsorted_coordinates(self):
        with self.assertRaises(ValidationError):
            PileupMatrix(["chr1", "chr1"], [5, 2], ["s"], [[0], [0]], [[1], [1]], ["A", "A"])

    def test_duplicate_samples(self):
        with self.assertRaises(ValidationError):
            make_matrix([[0, 0]], [[1, 1]], samples=["s", "s"])

    def test_select_samples(self):
        m = make_matrix([[1, 2, 3]], [[10, 10, 10]], samples=["a", "b", "c"])
        picked = m.select_samples(["c", "a"])
        self.assertEqual(picked.samples, ["c", "a"])
        np.testing.assert_array_equal(picked.x, [[3, 1]])
        with self.assertRaises(ValidationError):
            m.select_samples(["z"])
