import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxducer.exceptions import DegenerateTestError, ShapeError, UndefinedMetricError
from ctxducer.metrics import (
    EvalReport,
    load_report,
    mapsswe,
    normal_cdf,
    paired_error_counts,
    save_report,
    wer,
)

words = st.lists(st.sampled_from("abcdex"), min_size=0, max_size=12)


def edit_distance_oracle(ref, hyp):
    """Independent rolling-array Levenshtein (distance only)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j - 1] + (r != h), prev[j] + 1, cur[-1] + 1))
        prev = cur
    return prev[-1]


class TestWer:
    def test_identical(self):
        out = wer(["a", "b"], ["a", "b"])
        assert out == {"sub": 0, "del": 0, "ins": 0, "errors": 0, "wer": 0.0}

    def test_hand_case(self):
        out = wer("a b c".split(), "a x c d".split())
        assert out["sub"] == 1 and out["ins"] == 1 and out["del"] == 0
        assert out["wer"] == pytest.approx(2 / 3)

    def test_single_deletion(self):
        out = wer(["a"], [])
        assert out["del"] == 1 and out["wer"] == 1.0

    def test_empty_reference_is_error(self):
        with pytest.raises(UndefinedMetricError):
            wer([], ["a"])

    def test_matches_independent_dp_on_random_pairs(self):
        rng = np.random.default_rng(0)
        alphabet = list("abcdefgh")
        for _ in range(1000):
            ref = [alphabet[i] for i in rng.integers(0, 8, rng.integers(1, 12))]
            hyp = [alphabet[i] for i in rng.integers(0, 8, rng.integers(0, 12))]
            assert wer(ref, hyp)["errors"] == edit_distance_oracle(ref, hyp)

    @given(words.filter(len), words.filter(len))
    @settings(max_examples=60, deadline=None)
    def test_symmetric_total_with_ins_del_swapped(self, a, b):
        ab = wer(a, b)
        ba = wer(b, a)
        assert ab["errors"] == ba["errors"]
        assert ab["sub"] == ba["sub"]
        assert ab["ins"] == ba["del"] and ab["del"] == ba["ins"]

    @given(words.filter(len), words)
    @settings(max_examples=60, deadline=None)
    def test_errors_bounded_by_longer_sequence(self, ref, hyp):
        assert wer(ref, hyp)["errors"] <= max(len(ref), len(hyp))


class TestNormalCdf:
    def test_zero(self):
        assert normal_cdf(0.0) == 0.5

    def test_975_quantile(self):
        assert normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)

    def test_symmetry(self):
        for x in (0.3, 1.1, 2.7, 5.0):
            assert normal_cdf(-x) == pytest.approx(1.0 - normal_cdf(x), abs=1e-15)

    def test_against_high_precision_series(self):
        import mpmath

        mpmath.mp.dps = 40
        for x in np.linspace(-6, 6, 25):
            ref = float(mpmath.ncdf(x))
            assert abs(normal_cdf(float(x)) - ref) <= 1e-7


class TestMapsswe:
    def test_worked_example(self):
        out = mapsswe([2, 0, 2, 0], [0, 0, 0, 0])
        assert out["W"] == pytest.approx(1.7321, abs=1e-3)
        assert out["p"] == pytest.approx(0.0833, abs=1e-3)
        assert not out["significant"]

    def test_antisymmetry(self):
        a = [4, 1, 3, 2, 5]
        b = [1, 2, 2, 2, 1]
        ab = mapsswe(a, b)
        ba = mapsswe(b, a)
        assert ba["W"] == -ab["W"]
        assert ba["p"] == ab["p"]

    def test_zero_variance_is_error(self):
        with pytest.raises(DegenerateTestError):
            mapsswe([3, 3, 3], [1, 1, 1])

    def test_identical_systems_are_degenerate_not_significant(self):
        with pytest.raises(DegenerateTestError):
            mapsswe([2, 1, 4], [2, 1, 4])

    def test_too_few_segments(self):
        with pytest.raises(DegenerateTestError):
            mapsswe([1], [0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mapsswe([1, 2], [1])

    def test_clearly_significant_case(self):
        out = mapsswe([5, 6, 7, 5, 6, 7, 8, 6], [1, 2, 1, 2, 1, 2, 1, 2])
        assert out["significant"] and out["p"] < 0.05


class TestEvalReport:
    def test_aggregate(self):
        report = EvalReport()
        report.add("u1", ["a", "b"], ["a", "b"])
        report.add("u2", ["a", "b", "c"], ["a", "x", "c", "d"])
        assert report.aggregate_wer == pytest.approx(2 / 5)
        d = report.to_dict()
        assert d["aggregate"]["errors"] == 2 and d["aggregate"]["ref_len"] == 5

    def test_row_fields(self):
        report = EvalReport()
        row = report.add("u1", ["a"], [])
        assert row == {"utterance_id": "u1", "ref_len": 1, "sub": 0, "del": 1,
                       "ins": 0, "errors": 1}

    def test_report_file_round_trip_and_pairing(self, tmp_path):
        ra, rb = EvalReport(), EvalReport()
        ra.add("u1", ["a", "b"], ["a"])
        ra.add("u2", ["c"], ["c"])
        rb.add("u2", ["c"], ["x"])
        rb.add("u1", ["a", "b"], ["a", "b"])
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        save_report(ra.to_dict(), pa)
        save_report(rb.to_dict(), pb)
        errs_a, errs_b = paired_error_counts(load_report(pa), load_report(pb))
        assert errs_a == [1, 0] and errs_b == [0, 1]

    def test_pairing_rejects_mismatched_sets(self):
        ra, rb = EvalReport(), EvalReport()
        ra.add("u1", ["a"], ["a"])
        rb.add("u2", ["a"], ["a"])
        with pytest.raises(ShapeError):
            paired_error_counts(ra.to_dict(), rb.to_dict())
