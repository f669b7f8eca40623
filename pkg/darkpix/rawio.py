"""
Raw frame I/O for DarkPix: 16-bit binary PGM payloads with JSON sidecars,
frame stacks, and the cropping / per-pixel statistics calibration runs on.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .utils import RawFormatError, InsufficientFramesError, DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

PGM_MAXVAL = 65535
SIDECAR_SUFFIX = ".json"
STACK_FILE = "stack.json"


class CFAPattern(str, Enum):
    """Colour filter array layout (carried through, never demosaiced)."""
    MONO = "MONO"
    RGGB = "RGGB"


class StackKind(str, Enum):
    """Calibration stack type."""
    FLAT = "FLAT"
    BIAS = "BIAS"
    DARK = "DARK"


@dataclass(frozen=True)
class SensorMeta:
    """Acquisition metadata shared by every frame of a stack."""

    iso: int
    exposure_s: float
    black_level: int
    white_level: int
    cfa: CFAPattern = CFAPattern.MONO
    camera_id: str = ""

    def __post_init__(self):
        """Validate metadata."""
        object.__setattr__(self, 'cfa', CFAPattern(self.cfa))
        if not 0 <= self.black_level < self.white_level <= PGM_MAXVAL:
            raise ValidationError(
                f"need 0 <= black_level < white_level <= {PGM_MAXVAL}, "
                f"got {self.black_level}/{self.white_level}")
        if not self.exposure_s > 0:
            raise ValidationError(f"exposure_s must be positive, got {self.exposure_s}")

    @property
    def dynamic_range(self) -> int:
        """Pedestal-relative range in DN."""
        return self.white_level - self.black_level

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iso': int(self.iso),
            'exposure_s': float(self.exposure_s),
            'black_level': int(self.black_level),
            'white_level': int(self.white_level),
            'cfa': self.cfa.value,
            'camera_id': self.camera_id,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SensorMeta':
        try:
            return cls(
                iso=int(data['iso']),
                exposure_s=float(data['exposure_s']),
                black_level=int(data['black_level']),
                white_level=int(data['white_level']),
                cfa=CFAPattern(data.get('cfa', 'MONO')),
                camera_id=str(data.get('camera_id', '')),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise RawFormatError(f"invalid sensor metadata: {e}")


@dataclass(eq=False)
class RawFrame:
    """A single sensor readout: row-major DN grid plus metadata."""

    data: np.ndarray
    meta: SensorMeta
    attrs: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"frame data must be 2D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > self.meta.white_level):
            raise ValidationError(
                f"frame values must lie in [0, {self.meta.white_level}], "
                f"got [{data.min()}, {data.max()}]")
        if data.dtype.kind not in "uib" and not np.array_equal(data, np.rint(data)):
            raise ValidationError("frame values must be integral DN")
        self.data = data.astype(np.uint16, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def signal(self) -> np.ndarray:
        """Black-level-subtracted values as signed reals."""
        return self.data.astype(np.float64) - self.meta.black_level

    def normalized(self) -> np.ndarray:
        """Values mapped to [0, 1] by (DN - black) / (white - black)."""
        return self.signal() / self.meta.dynamic_range

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawFrame):
            return NotImplemented
        return (self.meta == other.meta and self.attrs == other.attrs
                and np.array_equal(self.data, other.data))


@dataclass(eq=False)
class FrameStack:
    """Ordered, pre-aligned frames of one kind sharing shape and metadata."""

    frames: List[RawFrame]
    kind: StackKind

    def __post_init__(self):
        self.kind = StackKind(self.kind)
        if not self.frames:
            raise InsufficientFramesError(f"{self.kind.value} stack is empty")
        first = self.frames[0]
        for i, frame in enumerate(self.frames[1:], start=1):
            if frame.shape != first.shape:
                raise DimensionMismatchError(
                    f"frame {i} has shape {frame.shape}, expected {first.shape}")
            if frame.meta != first.meta:
                raise ValidationError(f"frame {i} metadata differs from frame 0")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def meta(self) -> SensorMeta:
        return self.frames[0].meta

    @property
    def shape(self):
        return self.frames[0].shape

    @property
    def exposure_s(self) -> float:
        return self.meta.exposure_s

    def cube(self) -> np.ndarray:
        """(n, height, width) black-level-subtracted signal, in frame order."""
        return np.stack([frame.signal() for frame in self.frames])

    def require(self, kind: StackKind, min_frames: int = 1):
        """Check kind and frame count before an estimator runs."""
        if self.kind != kind:
            raise ValidationError(f"expected a {kind.value} stack, got {self.kind.value}")
        if len(self) < min_frames:
            raise InsufficientFramesError(
                f"{kind.value} stack needs at least {min_frames} frames, got {len(self)}")


def _read_token(buf: bytes, pos: int):
    """Return the next whitespace-delimited header token, skipping comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RawFormatError("truncated PGM header")
    return buf[start:pos], pos


def _parse_pgm(buf: bytes):
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise RawFormatError(f"unsupported PGM magic {magic!r}, expected P5")
    try:
        width_tok, pos = _read_token(buf, pos)
        height_tok, pos = _read_token(buf, pos)
        maxval_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError:
        raise RawFormatError("malformed PGM header")
    if width <= 0 or height <= 0:
        raise RawFormatError(f"invalid PGM dimensions {width}x{height}")
    if maxval != PGM_MAXVAL:
        raise RawFormatError(f"unsupported bit depth: maxval {maxval}, expected {PGM_MAXVAL}")
    # exactly one whitespace byte separates the header from the raster
    payload = buf[pos + 1:]
    expected = width * height * 2
    if len(payload) != expected:
        raise RawFormatError(f"PGM payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype='>u2').reshape(height, width).astype(np.uint16)


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def load_frame(path: Union[str, Path]) -> RawFrame:
    """
    Load a raw frame from a P5 PGM and its JSON sidecar.

    Args:
        path: Path to the ``.pgm`` file; metadata is read from ``<path>.json``

    Returns:
        RawFrame with untouched DN values (no black-level subtraction)
    """
    path = Path(path)
    with open(path, 'rb') as f:
        data = _parse_pgm(f.read())

    side = sidecar_path(path)
    if not side.exists():
        raise RawFormatError(f"missing sidecar {side}")
    try:
        with open(side, 'r') as f:
            sidecar = json.load(f)
    except json.JSONDecodeError as e:
        raise RawFormatError(f"invalid sidecar {side}: {e}")
    if not isinstance(sidecar, dict):
        raise RawFormatError(f"invalid sidecar {side}: expected an object")

    meta = SensorMeta.from_dict(sidecar)
    if data.size and int(data.max()) > meta.white_level:
        raise RawFormatError(f"{path}: value {int(data.max())} exceeds white_level {meta.white_level}")
    return RawFrame(data=data, meta=meta, attrs=dict(sidecar.get('attrs', {})))


def save_frame(frame: RawFrame, path: Union[str, Path]):
    """
    Write a frame as P5 PGM (big-endian 16-bit) plus JSON sidecar.

    Output is byte-deterministic for a given frame.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{frame.width} {frame.height}\n{PGM_MAXVAL}\n".encode('ascii')
    with open(path, 'wb') as f:
        f.write(header + frame.data.astype('>u2').tobytes())

    sidecar = frame.meta.to_dict()
    if frame.attrs:
        sidecar['attrs'] = frame.attrs
    with open(sidecar_path(path), 'w') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_stack(directory: Union[str, Path]) -> FrameStack:
    """Load every ``*.pgm`` of a stack directory in file-name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"stack directory not found: {directory}")
    try:
        with open(directory / STACK_FILE, 'r') as f:
            kind = StackKind(json.load(f)['kind'])
    except FileNotFoundError:
        raise ValidationError(f"{directory} has no {STACK_FILE}")
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise RawFormatError(f"invalid {directory / STACK_FILE}: {e}")

    paths = sorted(directory.glob("*.pgm"))
    frames = [load_frame(p) for p in paths]
    logger.info(f"Loaded {kind.value} stack of {len(frames)} frames from {directory}")
    return FrameStack(frames=frames, kind=kind)


def save_stack(stack: FrameStack, directory: Union[str, Path]) -> List[Path]:
    """Write a stack directory; returns the frame paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / STACK_FILE, 'w') as f:
        json.dump({'kind': stack.kind.value}, f, sort_keys=True)
        f.write("\n")
    paths = []
    for i, frame in enumerate(stack.frames):
        path = directory / f"frame_{i:04d}.pgm"
        save_frame(frame, path)
        paths.append(path)
    return paths


def crop_window(height: int, width: int, size: int):
    """Slices of the centered size x size window; odd remainders drop bottom/right."""
    if size <= 0 or size > min(height, width):
        raise DimensionMismatchError(f"crop size {size} exceeds frame {width}x{height}")
    top = (height - size) // 2
    left = (width - size) // 2
    return slice(top, top + size), slice(left, left + size)


def center_crop(item, size: int):
    """
    Centered size x size crop of a frame, stack or 2D array.

    Args:
        item: RawFrame, FrameStack or 2D numpy array
        size: Side length of the window in pixels

    Returns:
        Object of the same kind
    """
    if isinstance(item, FrameStack):
        return FrameStack(frames=[center_crop(f, size) for f in item.frames], kind=item.kind)
    if isinstance(item, RawFrame):
        rows, cols = crop_window(item.height, item.width, size)
        return replace(item, data=item.data[rows, cols].copy(), attrs=dict(item.attrs))
    arr = np.asarray(item)
    rows, cols = crop_window(arr.shape[0], arr.shape[1], size)
    return arr[rows, cols].copy()


def pixel_mean_map(stack: FrameStack) -> np.ndarray:
    """Temporal mean of black-level-subtracted values at each pixel."""
    return stack.cube().mean(axis=0)


def pixel_var_map(stack: FrameStack) -> np.ndarray:
    """Unbiased (n-1) temporal variance of black-level-subtracted values."""
    if len(stack) < 2:
        raise InsufficientFramesError(f"variance needs at least 2 frames, got {len(stack)}")
    return stack.cube().var(axis=0, ddof=1)
