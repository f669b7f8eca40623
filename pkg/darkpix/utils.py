"""
Utility classes and functions for DarkPix.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Optional, Dict, Any, List, Tuple
import json

from colorama import Fore, Style


class DarkPixError(Exception):
    """Base class for all DarkPix errors."""


class ValidationError(DarkPixError, ValueError):
    """Raised when an input violates a documented precondition."""


class RawFormatError(ValidationError):
    """Raised for malformed PGM payloads, sidecars or parameter files."""


class InsufficientFramesError(ValidationError):
    """Raised when a stack holds too few frames for an estimator."""


class DimensionMismatchError(ValidationError):
    """Raised when grids that must align do not."""


class NumericalError(DarkPixError, ArithmeticError):
    """Raised on divergence or non-finite intermediate values."""


@dataclass
class Config:
    """Configuration for DarkPix."""

    # Logging / runtime settings
    log_level: str = "INFO"
    log_file: Optional[str] = None
    progress: bool = False
    threads: int = 1
    seed: Optional[int] = None

    # Calibration settings
    crop_size: Optional[int] = None
    gain_min_mean: float = 1.0
    dark_floor: float = 0.01
    fpn_floor: float = -0.95
    exact_gain: bool = False
    destripe_read: bool = True
    ppcc_pixels: int = 5

    # Synthesis settings
    ratio_range: List[float] = field(default_factory=lambda: [200.0, 300.0])
    exposure_range: Optional[List[float]] = None
    compensate: bool = True

    # Rectified flow settings
    patch: int = 8
    hidden: List[int] = field(default_factory=lambda: [128, 128])
    embed: int = 16
    learning_rate: float = 1e-4
    batch_size: int = 12
    train_steps: int = 5000
    search_step: float = 0.1
    search_count: int = 9

    def __post_init__(self):
        """Validate configuration values."""
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")
        if len(self.ratio_range) != 2 or self.ratio_range[0] > self.ratio_range[1]:
            raise ValidationError("ratio_range must be [lo, hi] with lo <= hi")
        if self.exposure_range is not None:
            if len(self.exposure_range) != 2 or self.exposure_range[0] > self.exposure_range[1]:
                raise ValidationError("exposure_range must be [lo, hi] with lo <= hi")

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Config':
        """Create config from dictionary, ignoring unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            logging.getLogger(__name__).warning(f"Ignoring unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def merged(self, **overrides) -> 'Config':
        """Return a copy with every non-None override applied."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return Config.from_dict(data)

    def save(self, file_path: str):
        """Save config to file."""
        try:
            with open(file_path, 'w') as f:
                json.dump(self.to_dict(), f, indent=2)
        except OSError as e:
            raise ValidationError(f"Failed to save config: {e}")

    @classmethod
    def load(cls, file_path: str) -> 'Config':
        """Load config from file."""
        try:
            with open(file_path, 'r') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"Failed to load config: {e}")
        return cls.from_dict(data)


class ColorFormatter(logging.Formatter):
    """Formatter that colours the level name on terminals."""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.MAGENTA,
    }

    def format(self, record: logging.LogRecord) -> str:
        color = self.COLORS.get(record.levelname, "")
        original = record.levelname
        record.levelname = f"{color}{original}{Style.RESET_ALL}"
        try:
            return super().format(record)
        finally:
            record.levelname = original


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(config: Config):
    """Setup logging configuration."""
    handlers = []

    # Console handler (stderr, so JSON on stdout stays clean)
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(ColorFormatter(LOG_FORMAT))
    handlers.append(console_handler)

    # File handler (if specified)
    if config.log_file:
        file_handler = logging.FileHandler(config.log_file)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handlers.append(file_handler)

    logging.basicConfig(level=getattr(logging, config.log_level.upper()),
                        handlers=handlers, force=True)


def parse_range(values: Optional[Tuple[float, float]]) -> Optional[List[float]]:
    """Turn a click two-value option into a [lo, hi] list, or None."""
    if not values:
        return None
    lo, hi = values
    if lo > hi:
        raise ValidationError(f"range lower bound {lo} exceeds upper bound {hi}")
    return [float(lo), float(hi)]


def format_duration(seconds: float) -> str:
    """
    Format duration in human-readable format.

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted duration string
    """
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        minutes = int(seconds // 60)
        secs = seconds % 60
        return f"{minutes}m {secs:.1f}s"
    else:
        hours = int(seconds // 3600)
        minutes = int((seconds % 3600) // 60)
        secs = seconds % 60
        return f"{hours}h {minutes}m {secs:.1f}s"
