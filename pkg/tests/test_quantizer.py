import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctxducer.exceptions import (
    FormatError,
    InsufficientDataError,
    ShapeError,
    UndefinedMetricError,
)
from ctxducer.quantizer import (
    TokenQuantizer,
    load_codebook,
    pnmi,
    quantize,
    save_codebook,
    train_codebook,
)


def blobs(seed=0, n_per=40, k=3, dim=5, spread=6.0, noise=0.4):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, spread, (k, dim))
    return np.concatenate([c + noise * rng.normal(size=(n_per, dim)) for c in centers])


class TestTrainCodebook:
    def test_two_separated_clusters(self):
        frames = np.concatenate([np.zeros((10, 2)), np.full((10, 2), 9.0)])
        cb = train_codebook(frames, k=2, seed=0)
        got = {tuple(c) for c in cb.centroids}
        assert got == {(0.0, 0.0), (9.0, 9.0)}
        assert cb.final_distortion == 0.0

    def test_k1_gives_coordinate_mean(self):
        frames = np.random.default_rng(1).uniform(-3, 3, (17, 4))
        cb = train_codebook(frames, k=1, seed=0)
        assert np.allclose(cb.centroids[0], frames.mean(axis=0))

    def test_distortion_matches_exhaustive_oracle(self):
        frames = blobs(seed=2)
        cb = train_codebook(frames, k=3, seed=0)
        # brute-force nearest-centroid scan
        oracle = 0.0
        for f in frames:
            oracle += min(float(((f - c) ** 2).sum()) for c in cb.centroids)
        oracle /= len(frames)
        assert abs(cb.final_distortion - oracle) <= 1e-9

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError):
            train_codebook(np.zeros((3, 2)), k=4)

    def test_distortion_non_increasing(self):
        for seed in range(5):
            frames = blobs(seed=seed, k=4, n_per=30)
            cb = train_codebook(frames, k=4, seed=seed)
            hist = cb.distortion_history
            assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_retraining_from_converged_centroids_changes_nothing(self):
        frames = blobs(seed=3)
        cb = train_codebook(frames, k=3, seed=1, max_iters=100)
        again = train_codebook(frames, k=3, init_centroids=cb.centroids, max_iters=100)
        assert np.array_equal(again.centroids, cb.centroids)

    def test_same_seed_bit_identical(self):
        frames = blobs(seed=4)
        a = train_codebook(frames, k=3, seed=7)
        b = train_codebook(frames, k=3, seed=7)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_centroids_distinct_on_distinct_data(self):
        frames = blobs(seed=5, k=4, n_per=25)
        cb = train_codebook(frames, k=4, seed=0)
        assert len({tuple(c) for c in cb.centroids}) == 4


class TestQuantize:
    def test_frame_equal_to_centroid(self):
        frames = blobs(seed=6)
        cb = train_codebook(frames, k=4, seed=0)
        token = quantize(cb.centroids[3:4], cb)
        assert token[0] == 3

    def test_equidistant_tie_prefers_lowest_index(self):
        cb = train_codebook(np.array([[0.0], [2.0], [4.0]]), k=3, seed=0)
        order = np.argsort(cb.centroids[:, 0])
        # rebuild a codebook with known centroid order 0,2,4
        cb.centroids = cb.centroids[order]
        assert quantize(np.array([[3.0]]), cb)[0] == 1  # tie between 2.0 and 4.0

    def test_matches_linear_scan_oracle(self):
        frames = np.random.default_rng(8).uniform(-5, 5, (100, 6))
        cb = train_codebook(frames, k=7, seed=0)
        tokens = quantize(frames, cb)
        oracle = np.array(
            [int(np.argmin([((f - c) ** 2).sum() for c in cb.centroids])) for f in frames]
        )
        assert np.array_equal(tokens, oracle)

    def test_dim_mismatch(self):
        cb = train_codebook(np.zeros((4, 3)) + np.arange(4)[:, None], k=2, seed=0)
        with pytest.raises(ShapeError):
            quantize(np.zeros((2, 5)), cb)


class TestPnmi:
    def test_identical_maps_to_one(self):
        labels = np.array([0, 1, 2, 0, 1, 2, 2])
        assert pnmi(labels, labels) == pytest.approx(1.0)

    def test_independent_is_zero(self):
        # product-of-marginals joint by construction
        labels = np.repeat([0, 1], 50)
        tokens = np.tile([0, 1], 50)
        assert pnmi(labels, tokens) == pytest.approx(0.0, abs=1e-9)

    def test_hand_counted_zero_information(self):
        assert pnmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_zero_label_entropy_is_error(self):
        with pytest.raises(UndefinedMetricError):
            pnmi([3, 3, 3], [0, 1, 2])

    @given(st.permutations(range(5)))
    @settings(max_examples=20, deadline=None)
    def test_invariant_under_token_relabeling(self, perm):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 3, 60)
        tokens = rng.integers(0, 5, 60)
        relabeled = np.array([perm[t] for t in tokens])
        assert pnmi(labels, tokens) == pytest.approx(pnmi(labels, relabeled), abs=1e-12)

    def test_always_in_unit_interval(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            labels = rng.integers(0, 4, 40)
            if len(set(labels.tolist())) < 2:
                continue
            tokens = rng.integers(0, 6, 40)
            assert 0.0 <= pnmi(labels, tokens) <= 1.0


class TestCodebookFile:
    def test_round_trip_bit_exact(self, tmp_path):
        cb = train_codebook(blobs(seed=11), k=5, seed=3)
        path = tmp_path / "cb.ctxk"
        save_codebook(cb, path)
        back = load_codebook(path)
        assert back.k == cb.k and back.dim == cb.dim
        assert back.centroids.tobytes() == cb.centroids.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ctxk"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError):
            load_codebook(path)

    def test_truncated(self, tmp_path):
        cb = train_codebook(blobs(seed=12), k=2, seed=0)
        path = tmp_path / "cb.ctxk"
        save_codebook(cb, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_codebook(path)


class TestEstimator:
    def test_fit_transform(self):
        frames = blobs(seed=13)
        q = TokenQuantizer(n_clusters=3, random_state=0).fit(frames)
        tokens = q.transform(frames)
        assert tokens.shape == (len(frames),)
        assert set(tokens.tolist()) <= set(range(3))
        assert q.n_iter_ >= 1 and q.distortion_ >= 0

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            TokenQuantizer().predict(np.zeros((2, 2)))

    def test_get_params_and_clone(self):
        q = TokenQuantizer(n_clusters=8, max_iter=12, random_state=42)
        assert q.get_params() == {"n_clusters": 8, "max_iter": 12, "random_state": 42}
        q2 = clone(q)
        assert q2.get_params() == q.get_params()
