"""
Tests for paired low-light synthesis.
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from darkpix.calibration import estimate_dark, estimate_gain, estimate_read_sigma, fit_time_law
from darkpix.noisemodel import NoiseModelConfig, PixelParamMap, TimeLaw
from darkpix.rawio import FrameStack, RawFrame, SensorMeta, StackKind, save_frame
from darkpix.synthesis import (SynthesisConfig, build_condition, condition_from_noisy, darken,
                               load_pairs, synthesize_directory, synthesize_pair)
from darkpix.utils import DimensionMismatchError, ValidationError

BLACK = 64
WHITE = 16383


def clean_frame(signal, shape=(8, 8)):
    meta = SensorMeta(iso=100, exposure_s=1.0, black_level=BLACK, white_level=WHITE)
    return RawFrame(np.full(shape, BLACK) + np.asarray(signal), meta)


def flat_params(shape=(8, 8), gain=1.0, read=0.0, dark=0.0):
    return PixelParamMap(
        gain_K=np.full(shape, gain),
        fpn_f=np.zeros(shape),
        dark_rate_a=np.full(shape, dark),
        read_sigma=np.full(shape, read),
    )


class TestSynthesisConfig:
    """Test ratio/exposure draws and validation."""

    def test_fixed_values(self):
        sc = SynthesisConfig(ratio=150.0, exposure_s=0.5)
        assert sc.draw(0) == (150.0, 0.5)
        assert sc.draw(7) == (150.0, 0.5)

    def test_ranges_are_respected(self):
        sc = SynthesisConfig(ratio_range=[100, 300], exposure_range=[0.1, 2.0], seed=3)
        for index in range(50):
            ratio, exposure = sc.draw(index)
            assert 100 <= ratio <= 300
            assert 0.1 <= exposure <= 2.0

    def test_draws_are_deterministic_per_index(self):
        sc = SynthesisConfig(ratio_range=[100, 300], seed=3)
        assert sc.draw(4) == sc.draw(4)
        assert sc.draw(4) != sc.draw(5)

    @pytest.mark.parametrize("kwargs", [
        {'ratio': 0.5},
        {'exposure_s': 0.0},
        {'ratio_range': [300, 100]},
        {'ratio_range': [0.5, 10]},
        {'exposure_range': [0.0, 1.0]},
    ])
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ValidationError):
            SynthesisConfig(**kwargs)


class TestDarken:
    """Test exposure darkening."""

    def test_scales_by_gain_and_ratio(self):
        electrons = darken(clean_frame(1000), ratio=100.0, gain_K=2.0)
        np.testing.assert_allclose(electrons, np.full((8, 8), 5.0))

    def test_zero_gain_gives_zero(self):
        gain = np.ones((8, 8))
        gain[0, 0] = 0.0
        electrons = darken(clean_frame(1000), ratio=10.0, gain_K=gain)
        assert electrons[0, 0] == 0.0
        assert electrons[1, 1] == pytest.approx(100.0)

    def test_ratio_below_one(self):
        with pytest.raises(ValidationError):
            darken(clean_frame(10), ratio=0.9)


class TestSynthesizePair:
    """Test single-pair synthesis."""

    def test_noise_free_pair_is_exact_darkening(self):
        rng = np.random.default_rng(1)
        params = flat_params()
        params.gain_K = rng.uniform(0.5, 2.0, (8, 8))
        sc = SynthesisConfig(ratio=100.0, cfg=NoiseModelConfig.disabled())
        noisy, clean = synthesize_pair(clean_frame(400), params, sc)
        np.testing.assert_array_equal(noisy.signal(), np.full((8, 8), 4.0))
        assert clean == clean_frame(400)

    def test_attrs_record_draw(self):
        sc = SynthesisConfig(ratio=50.0, exposure_s=2.0, seed=9)
        noisy, _ = synthesize_pair(clean_frame(500), flat_params(), sc, index=3)
        assert noisy.attrs == {'ratio': 50.0, 'exposure_s': 2.0, 'seed': 9, 'index': 3}
        assert noisy.meta.exposure_s == 2.0

    def test_deterministic(self):
        sc = SynthesisConfig(ratio=20.0, seed=5)
        params = flat_params(read=2.0, dark=1.0)
        a, _ = synthesize_pair(clean_frame(1000), params, sc, index=1)
        b, _ = synthesize_pair(clean_frame(1000), params, sc, index=1)
        c, _ = synthesize_pair(clean_frame(1000), params, sc, index=2)
        assert a == b
        assert not np.array_equal(a.data, c.data)

    def test_shot_noise_mean(self):
        shape = (64, 64)
        sc = SynthesisConfig(ratio=10.0, seed=2, cfg=NoiseModelConfig.from_label("P"))
        noisy, _ = synthesize_pair(clean_frame(1000, shape), flat_params(shape), sc)
        assert noisy.signal().mean() == pytest.approx(100.0, abs=1.0)
        assert noisy.signal().var() == pytest.approx(100.0, rel=0.1)

    def test_single_pixel_moments(self):
        params = PixelParamMap(
            gain_K=np.full((1, 1), 2.0),
            fpn_f=np.full((1, 1), 0.5),
            dark_rate_a=np.full((1, 1), 3.0),
            read_sigma=np.full((1, 1), 1.0),
            time_law=TimeLaw.SQRT,
        )
        sc = SynthesisConfig(ratio=100.0, exposure_s=4.0, seed=17,
                             cfg=NoiseModelConfig.from_label("P+G+F+A"))
        clean = clean_frame(1000, (1, 1))
        values = np.array([synthesize_pair(clean, params, sc, index=i)[0].signal()[0, 0]
                           for i in range(10_000)])
        # K*I/r = 2 * 5 = 10, (1 + f) * a * sqrt(t) = 1.5 * 6 = 9
        expected_mean = 19.0
        expected_var = 2.0 ** 2 * 5.0 + 1.5 ** 2 * 6.0 + 1.0 + 1.0 / 12.0
        se = np.sqrt(expected_var / values.size)
        assert abs(values.mean() - expected_mean) < 4 * se
        assert values.var(ddof=1) == pytest.approx(expected_var, rel=0.06)

    def test_clean_is_cropped_to_params(self):
        sc = SynthesisConfig(ratio=10.0)
        noisy, clean = synthesize_pair(clean_frame(100, (20, 20)), flat_params((8, 8)), sc)
        assert noisy.shape == (8, 8)
        assert clean.shape == (8, 8)

    def test_uncroppable_params(self):
        with pytest.raises(DimensionMismatchError):
            synthesize_pair(clean_frame(100, (20, 20)), flat_params((8, 6)), SynthesisConfig())


class TestCondition:
    """Test the conditioning input."""

    def test_compensated_condition(self):
        sc = SynthesisConfig(ratio=100.0, cfg=NoiseModelConfig.disabled())
        condition = build_condition(clean_frame(400), flat_params(), sc)
        np.testing.assert_allclose(condition, np.full((8, 8), 400.0 / (WHITE - BLACK)))

    def test_uncompensated_condition(self):
        sc = SynthesisConfig(ratio=100.0, cfg=NoiseModelConfig.disabled(), compensate=False)
        condition = build_condition(clean_frame(400), flat_params(), sc)
        np.testing.assert_allclose(condition, np.full((8, 8), 4.0 / (WHITE - BLACK)))

    def test_uncompensated_is_clipped(self):
        frame = clean_frame(0)
        frame.data[0, 0] = 0
        condition = condition_from_noisy(frame, ratio=100.0, compensate=False)
        assert condition.min() == 0.0

    def test_compensated_condition_is_floored(self):
        shape = (32, 32)
        sc = SynthesisConfig(ratio=200.0, seed=4, cfg=NoiseModelConfig.from_label("P+G"))
        noisy, _ = synthesize_pair(clean_frame(200, shape), flat_params(shape, read=3.0), sc)
        assert noisy.data.min() < BLACK
        condition = condition_from_noisy(noisy, 200.0, compensate=True)
        assert condition.min() >= 0.0
        assert condition.max() <= 200.0
        np.testing.assert_array_equal(condition[noisy.data <= BLACK], 0.0)


class TestCalibrationOracle:
    """Calibrating synthesized frames recovers the parameters that generated them."""

    def setup_method(self):
        rng = np.random.default_rng(8)
        self.shape = (16, 16)
        self.truth = PixelParamMap(
            gain_K=rng.uniform(1.5, 2.5, self.shape),
            fpn_f=rng.uniform(-0.2, 0.2, self.shape),
            dark_rate_a=np.full(self.shape, 2.0),
            read_sigma=rng.uniform(2.0, 4.0, self.shape),
            time_law=TimeLaw.SQRT,
        )
        self.cfg = NoiseModelConfig.from_label("P+G+F+A")

    def stack(self, kind, signal, count, exposure_s, seed):
        sc = SynthesisConfig(ratio=1.0, exposure_s=exposure_s, seed=seed, cfg=self.cfg)
        clean = clean_frame(signal, self.shape)
        return FrameStack([synthesize_pair(clean, self.truth, sc, index=i)[0] for i in range(count)],
                          kind)

    def test_gain_and_read_noise(self):
        flat = self.stack(StackKind.FLAT, 1000, 400, 1e-4, seed=1)
        bias = self.stack(StackKind.BIAS, 0, 400, 1e-4, seed=2)
        gain = estimate_gain(flat)
        sigma = estimate_read_sigma(bias, row_sigma=0.0)
        assert np.median(np.abs(gain - self.truth.gain_K) / self.truth.gain_K) <= 0.1
        assert np.median(np.abs(sigma - self.truth.read_sigma) / self.truth.read_sigma) <= 0.05

    def test_dark_rate_and_time_law(self):
        points = []
        for k, t in enumerate((1.0, 4.0, 16.0)):
            dark = self.stack(StackKind.DARK, 0, 400, t, seed=10 + k)
            points.append((t, estimate_dark(dark, self.truth.fpn_f)))
        fit = fit_time_law(points)
        assert fit.law == TimeLaw.SQRT
        assert np.median(np.abs(fit.coefficient_a - 2.0)) / 2.0 <= 0.05


class TestPairDirectories:
    """Test writing and loading pair directories."""

    def setup_method(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.clean_dir = self.temp_dir / "clean"
        self.clean_dir.mkdir()
        for i, level in enumerate((300, 600)):
            save_frame(clean_frame(level), self.clean_dir / f"scene{i}.pgm")

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_directory_roundtrip(self):
        out = self.temp_dir / "pairs"
        written = synthesize_directory(self.clean_dir, flat_params(read=1.0),
                                       SynthesisConfig(ratio=10.0, seed=1), out)
        assert len(written) == 8
        pairs = load_pairs(out)
        assert [stem for stem, _, _ in pairs] == ["scene0", "scene1"]
        assert pairs[1][2] == clean_frame(600)
        assert pairs[0][1].attrs['index'] == 0

    def test_clean_not_opened_when_not_required(self):
        out = self.temp_dir / "pairs"
        synthesize_directory(self.clean_dir, flat_params(), SynthesisConfig(), out)
        for path in out.glob("*_clean.pgm*"):
            path.unlink()
        pairs = load_pairs(out, require_clean=False)
        assert all(clean is None for _, _, clean in pairs)
        with pytest.raises(ValidationError):
            load_pairs(out)

    def test_empty_directories(self):
        empty = self.temp_dir / "empty"
        empty.mkdir()
        with pytest.raises(ValidationError):
            synthesize_directory(empty, flat_params(), SynthesisConfig(), self.temp_dir / "out")
        with pytest.raises(ValidationError):
            load_pairs(empty)
