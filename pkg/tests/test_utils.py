"""
Tests for configuration, logging helpers and the run manifest.
"""

import json
import logging
import os
import shutil
import tempfile
from pathlib import Path

import pytest

from darkpix.manifest import MANIFEST_NAME, RunManifest, digest_file, digest_tree
from darkpix.utils import (ColorFormatter, Config, ValidationError, format_duration, parse_range)


class TestConfig:
    """Test configuration functionality."""

    def test_default_config(self):
        config = Config()
        assert config.log_level == "INFO"
        assert config.threads == 1
        assert config.seed is None
        assert config.ratio_range == [200.0, 300.0]
        assert config.hidden == [128, 128]
        assert config.search_step == 0.1
        assert config.search_count == 9

    def test_config_serialization(self):
        config = Config(seed=42, patch=4, exposure_range=[0.1, 1.0])
        restored = Config.from_dict(config.to_dict())
        assert restored == config

    def test_unknown_keys_are_ignored(self, caplog):
        with caplog.at_level(logging.WARNING):
            config = Config.from_dict({'seed': 1, 'sample_rate': 44100})
        assert config.seed == 1
        assert "sample_rate" in caplog.text

    def test_merged_skips_none(self):
        config = Config(seed=1, patch=8)
        merged = config.merged(seed=None, patch=4)
        assert merged.seed == 1
        assert merged.patch == 4
        assert config.patch == 8

    def test_invalid_values(self):
        with pytest.raises(ValidationError):
            Config(threads=0)
        with pytest.raises(ValidationError):
            Config(ratio_range=[300.0, 200.0])
        with pytest.raises(ValidationError):
            Config(exposure_range=[1.0])

    def test_config_file_operations(self):
        with tempfile.NamedTemporaryFile(mode='w', suffix='.json', delete=False) as f:
            config_file = f.name

        try:
            config = Config(seed=7, learning_rate=1e-3)
            config.save(config_file)
            assert Config.load(config_file) == config
        finally:
            os.unlink(config_file)

    def test_load_invalid_file(self):
        with tempfile.NamedTemporaryFile(mode='w', suffix='.json', delete=False) as f:
            f.write("{not json")
            config_file = f.name

        try:
            with pytest.raises(ValidationError):
                Config.load(config_file)
        finally:
            os.unlink(config_file)


class TestHelpers:
    """Test small utility functions."""

    def test_parse_range(self):
        assert parse_range(None) is None
        assert parse_range((1, 2)) == [1.0, 2.0]
        with pytest.raises(ValidationError):
            parse_range((3, 2))

    def test_format_duration(self):
        assert format_duration(30.5) == "30.5s"
        assert format_duration(90) == "1m 30.0s"
        assert format_duration(3661).startswith("1h 1m")

    def test_color_formatter_restores_level(self):
        formatter = ColorFormatter('%(levelname)s %(message)s')
        record = logging.LogRecord("darkpix", logging.WARNING, __file__, 1, "careful", None, None)
        text = formatter.format(record)
        assert "WARNING" in text and "careful" in text
        assert record.levelname == "WARNING"


class TestManifest:
    """Test content digests and manifest files."""

    def setup_method(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_known_digest(self):
        path = self.temp_dir / "abc.txt"
        path.write_bytes(b"abc")
        assert digest_file(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

    def test_tree_keys(self):
        stack = self.temp_dir / "bias"
        stack.mkdir()
        (stack / "frame_0000.pgm").write_bytes(b"x")
        (stack / MANIFEST_NAME).write_text("{}")
        single = self.temp_dir / "params.pxcal"
        single.write_bytes(b"y")
        digests = digest_tree([stack, single, self.temp_dir / "missing"])
        assert list(digests) == ["bias/frame_0000.pgm", "params.pxcal"]

    def test_write_and_load(self):
        manifest = RunManifest(command="calibrate", config=Config(seed=3).to_dict(), seed=3,
                               version="1.0.0", outputs={'params.pxcal': "00"})
        path = manifest.write(self.temp_dir)
        assert path.name == MANIFEST_NAME
        assert RunManifest.load(path) == manifest
        assert json.loads(path.read_text())['seed'] == 3
