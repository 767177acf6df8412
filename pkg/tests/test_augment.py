import numpy as np
import pytest

from ctxducer.augment import AugmentConfig, augment
from ctxducer.autodiff import Tensor
from ctxducer.exceptions import ConfigError
from ctxducer.seeding import derive_rng


def embedded(t=12, e=6, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (t, e)))


class TestIdentity:
    def test_inert_settings_are_bitwise_identity(self):
        cfg = AugmentConfig(enabled=True, warp_max_shift=0, time_mask_num=0,
                            time_mask_max_width=0, embed_mask_num=0,
                            embed_mask_max_width=0, noise_sigma=0.0)
        x = embedded()
        out = augment(x, cfg, derive_rng(0, "aug"))
        assert out is x

    def test_disabled_is_bitwise_identity(self):
        cfg = AugmentConfig(enabled=False)
        x = embedded()
        assert augment(x, cfg, derive_rng(0, "aug")) is x


class TestMasks:
    def test_time_mask_zeroes_exact_rows(self):
        cfg = AugmentConfig(warp_max_shift=0, time_mask_num=1, time_mask_max_width=2,
                            embed_mask_num=0, noise_sigma=0.0)
        x = embedded(t=8)
        # find an rng whose single mask covers rows 2-3
        for probe in range(200):
            rng = derive_rng(probe, "probe")
            width = int(rng.integers(0, 3))
            if width != 2:
                continue
            start = int(rng.integers(0, 8 - width + 1))
            if start == 2:
                out = augment(x, cfg, derive_rng(probe, "probe"))
                assert np.all(out.values[2:4] == 0.0)
                untouched = np.delete(np.arange(8), [2, 3])
                assert np.array_equal(out.values[untouched], x.values[untouched])
                return
        pytest.fail("no probe seed produced the target mask")

    def test_widths_clamped_never_error(self):
        cfg = AugmentConfig(warp_max_shift=0, time_mask_max_width=1000,
                            embed_mask_max_width=1000, noise_sigma=0.0)
        out = augment(embedded(t=4, e=3), cfg, derive_rng(1, "aug"))
        assert out.shape == (4, 3)


class TestNoise:
    def test_empirical_variance(self):
        cfg = AugmentConfig(warp_max_shift=0, time_mask_num=0, embed_mask_num=0,
                            noise_sigma=0.1)
        x = Tensor(np.zeros((10_000, 1)))
        out = augment(x, cfg, derive_rng(2, "aug"))
        var = float(out.values.var())
        assert 0.008 <= var <= 0.012


class TestWarp:
    def test_shape_preserved_and_values_interpolated(self):
        cfg = AugmentConfig(warp_max_shift=3, time_mask_num=0, embed_mask_num=0,
                            noise_sigma=0.0)
        x = embedded(t=16, e=4, seed=3)
        out = augment(x, cfg, derive_rng(3, "aug"))
        assert out.shape == x.shape
        # linear interpolation keeps values inside the per-column envelope
        assert np.all(out.values <= x.values.max(axis=0) + 1e-12)
        assert np.all(out.values >= x.values.min(axis=0) - 1e-12)
        # endpoints are fixed points of the piecewise-linear remap
        assert np.allclose(out.values[0], x.values[0])
        assert np.allclose(out.values[-1], x.values[-1])


class TestDeterminism:
    def test_same_rng_state_same_output(self):
        cfg = AugmentConfig()
        x = embedded(seed=4)
        a = augment(x, cfg, derive_rng(7, "aug", 0))
        b = augment(x, cfg, derive_rng(7, "aug", 0))
        assert a.values.tobytes() == b.values.tobytes()

    def test_independent_streams_differ(self):
        cfg = AugmentConfig(noise_sigma=0.2)
        x = embedded(seed=5)
        a = augment(x, cfg, derive_rng(7, "aug", 0))
        b = augment(x, cfg, derive_rng(7, "aug", 1))
        assert a.values.tobytes() != b.values.tobytes()


class TestGradientsFlow:
    def test_backward_reaches_input(self):
        from ctxducer import autodiff as ad

        cfg = AugmentConfig(noise_sigma=0.05)
        x = embedded(seed=6)
        out = augment(x, cfg, derive_rng(8, "aug"))
        ad.reduce_sum(ad.mul(out, out)).backward()
        assert x.grad is not None and np.any(x.grad != 0)


def test_negative_width_rejected():
    with pytest.raises(ConfigError):
        augment(embedded(), AugmentConfig(time_mask_max_width=-1), derive_rng(0, "a"))


def test_shape_always_preserved():
    cfg = AugmentConfig(warp_max_shift=2, noise_sigma=0.1)
    for t, e in [(4, 3), (9, 5), (20, 2)]:
        out = augment(embedded(t=t, e=e, seed=t), cfg, derive_rng(t, "aug"))
        assert out.shape == (t, e)
