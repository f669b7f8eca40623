"""
Tests for raw frame I/O, stacks and per-pixel statistics.
"""

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from darkpix.rawio import (CFAPattern, FrameStack, RawFrame, SensorMeta, StackKind, center_crop,
                           crop_window, load_frame, load_stack, pixel_mean_map, pixel_var_map,
                           save_frame, save_stack, sidecar_path)
from darkpix.utils import (DimensionMismatchError, InsufficientFramesError, RawFormatError,
                           ValidationError)


def make_meta(**kwargs):
    defaults = dict(iso=100, exposure_s=0.5, black_level=64, white_level=4095)
    defaults.update(kwargs)
    return SensorMeta(**defaults)


class TestSensorMeta:
    """Test sensor metadata validation."""

    def test_valid_meta(self):
        meta = make_meta(cfa="RGGB", camera_id="cam0")
        assert meta.cfa == CFAPattern.RGGB
        assert meta.dynamic_range == 4095 - 64

    def test_black_above_white(self):
        with pytest.raises(ValidationError):
            make_meta(black_level=5000)

    def test_non_positive_exposure(self):
        with pytest.raises(ValidationError):
            make_meta(exposure_s=0)

    def test_dict_roundtrip(self):
        meta = make_meta(camera_id="abc")
        assert SensorMeta.from_dict(meta.to_dict()) == meta

    def test_from_dict_missing_key(self):
        with pytest.raises(RawFormatError):
            SensorMeta.from_dict({'iso': 100})


class TestRawFrame:
    """Test raw frame construction and conversions."""

    def test_signal_and_normalized(self):
        meta = make_meta(black_level=100, white_level=1100)
        frame = RawFrame(np.array([[100, 600], [1100, 350]]), meta)
        np.testing.assert_array_equal(frame.signal(), [[0, 500], [1000, 250]])
        np.testing.assert_allclose(frame.normalized(), [[0, 0.5], [1.0, 0.25]])

    def test_value_above_white_rejected(self):
        with pytest.raises(ValidationError):
            RawFrame(np.array([[5000]]), make_meta())

    def test_non_2d_rejected(self):
        with pytest.raises(ValidationError):
            RawFrame(np.zeros((2, 2, 2)), make_meta())

    def test_non_integral_values_rejected(self):
        with pytest.raises(ValidationError):
            RawFrame(np.array([[3.7, 4.0]]), make_meta())
        with pytest.raises(ValidationError):
            RawFrame(np.array([[np.nan]]), make_meta())

    def test_integral_floats_accepted(self):
        frame = RawFrame(np.array([[3.0, 4.0]]), make_meta())
        np.testing.assert_array_equal(frame.data, [[3, 4]])
        assert frame.data.dtype == np.uint16

    def test_equality(self):
        a = RawFrame(np.ones((3, 3)), make_meta())
        b = RawFrame(np.ones((3, 3)), make_meta())
        c = RawFrame(np.zeros((3, 3)), make_meta())
        assert a == b
        assert a != c


class TestPgmIO:
    """Test PGM + sidecar reading and writing."""

    def setup_method(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_single_pixel_frame(self):
        path = self.temp_dir / "one.pgm"
        save_frame(RawFrame(np.array([[1234]]), make_meta()), path)
        data = path.read_bytes()
        assert data == b"P5\n1 1\n65535\n" + bytes([0x04, 0xD2])
        assert load_frame(path).data[0, 0] == 1234

    def test_roundtrip_preserves_values_and_attrs(self):
        rng = np.random.default_rng(0)
        data = rng.integers(0, 4096, size=(7, 5))
        frame = RawFrame(data, make_meta(cfa="RGGB"), attrs={'ratio': 250.0})
        path = self.temp_dir / "frame.pgm"
        save_frame(frame, path)
        loaded = load_frame(path)
        assert loaded == frame
        assert loaded.shape == (7, 5)

    def test_byte_deterministic(self):
        frame = RawFrame(np.arange(12).reshape(3, 4), make_meta())
        save_frame(frame, self.temp_dir / "a.pgm")
        save_frame(frame, self.temp_dir / "b.pgm")
        assert (self.temp_dir / "a.pgm").read_bytes() == (self.temp_dir / "b.pgm").read_bytes()
        assert (self.temp_dir / "a.pgm.json").read_bytes() == (self.temp_dir / "b.pgm.json").read_bytes()

    def test_8bit_rejected(self):
        path = self.temp_dir / "eight.pgm"
        path.write_bytes(b"P5\n2 1\n255\n" + bytes([1, 2]))
        sidecar_path(path).write_text(json.dumps(make_meta().to_dict()))
        with pytest.raises(RawFormatError, match="unsupported bit depth"):
            load_frame(path)

    def test_wrong_magic_rejected(self):
        path = self.temp_dir / "ascii.pgm"
        path.write_bytes(b"P2\n1 1\n65535\n5\n")
        with pytest.raises(RawFormatError):
            load_frame(path)

    def test_truncated_payload_rejected(self):
        path = self.temp_dir / "short.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + bytes(6))
        sidecar_path(path).write_text(json.dumps(make_meta().to_dict()))
        with pytest.raises(RawFormatError):
            load_frame(path)

    def test_header_comments_skipped(self):
        path = self.temp_dir / "comment.pgm"
        path.write_bytes(b"P5\n# made by hand\n1 1\n65535\n" + bytes([0, 7]))
        sidecar_path(path).write_text(json.dumps(make_meta().to_dict()))
        assert load_frame(path).data[0, 0] == 7

    def test_missing_sidecar(self):
        path = self.temp_dir / "bare.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n" + bytes(2))
        with pytest.raises(RawFormatError, match="sidecar"):
            load_frame(path)

    def test_value_above_white_level_in_file(self):
        path = self.temp_dir / "hot.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n" + (5000).to_bytes(2, 'big'))
        sidecar_path(path).write_text(json.dumps(make_meta().to_dict()))
        with pytest.raises(RawFormatError):
            load_frame(path)


class TestFrameStack:
    """Test stacks, cropping and per-pixel statistics."""

    def setup_method(self):
        self.meta = make_meta(black_level=10)
        self.frames = [RawFrame(np.full((4, 6), 10 + v), self.meta) for v in (1, 2, 3, 6)]

    def test_empty_stack(self):
        with pytest.raises(InsufficientFramesError):
            FrameStack([], StackKind.BIAS)

    def test_shape_mismatch(self):
        frames = self.frames + [RawFrame(np.zeros((3, 6)), self.meta)]
        with pytest.raises(DimensionMismatchError):
            FrameStack(frames, StackKind.BIAS)

    def test_mean_and_variance(self):
        stack = FrameStack(self.frames, StackKind.BIAS)
        np.testing.assert_allclose(pixel_mean_map(stack), np.full((4, 6), 3.0))
        np.testing.assert_allclose(pixel_var_map(stack), np.full((4, 6), np.var([1, 2, 3, 6], ddof=1)))

    def test_variance_needs_two_frames(self):
        stack = FrameStack(self.frames[:1], StackKind.BIAS)
        with pytest.raises(InsufficientFramesError):
            pixel_var_map(stack)

    def test_permutation_invariance(self):
        stack = FrameStack(self.frames, StackKind.BIAS)
        shuffled = FrameStack(self.frames[::-1], StackKind.BIAS)
        np.testing.assert_allclose(pixel_mean_map(stack), pixel_mean_map(shuffled))
        np.testing.assert_allclose(pixel_var_map(stack), pixel_var_map(shuffled))

    def test_require_kind(self):
        stack = FrameStack(self.frames, StackKind.BIAS)
        with pytest.raises(ValidationError):
            stack.require(StackKind.FLAT)

    def test_center_crop(self):
        image = np.arange(5 * 7).reshape(5, 7)
        cropped = center_crop(image, 3)
        np.testing.assert_array_equal(cropped, image[1:4, 2:5])
        assert crop_window(4, 4, 3) == (slice(0, 3), slice(0, 3))

    def test_center_crop_is_idempotent(self):
        image = np.arange(9 * 12).reshape(9, 12)
        once = center_crop(image, 5)
        np.testing.assert_array_equal(center_crop(once, 5), once)
        frame = center_crop(self.frames[0], 4)
        assert center_crop(frame, 4) == frame

    def test_crop_too_large(self):
        with pytest.raises(DimensionMismatchError):
            center_crop(np.zeros((4, 4)), 5)

    def test_crop_stack(self):
        stack = center_crop(FrameStack(self.frames, StackKind.DARK), 4)
        assert stack.shape == (4, 4)
        assert stack.kind == StackKind.DARK

    def test_stack_directory_roundtrip(self):
        temp_dir = Path(tempfile.mkdtemp())
        try:
            stack = FrameStack(self.frames, StackKind.FLAT)
            paths = save_stack(stack, temp_dir / "flat")
            assert len(paths) == 4
            loaded = load_stack(temp_dir / "flat")
            assert loaded.kind == StackKind.FLAT
            assert all(a == b for a, b in zip(loaded.frames, stack.frames))
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)
