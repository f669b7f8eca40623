"""
CMOS noise model for DarkPix.

Seeded samplers for photon shot, dark-current shot, row, source-follower and
quantization noise, the physical dark-current rate law, the composite
per-pixel observation model, and the PXCAL1 parameter file format.
"""

import json
import logging
import struct
from dataclasses import dataclass, fields, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .rawio import center_crop
from .utils import ValidationError, DimensionMismatchError, RawFormatError

logger = logging.getLogger(__name__)

BOLTZMANN_EV = 8.617333262e-5
POISSON_GAUSSIAN_THRESHOLD = 1000.0

PXCAL_MAGIC = b"PXCAL1\n"
PLANE_NAMES = ("gain_K", "fpn_f", "dark_rate_a", "read_sigma")


class TimeLaw(str, Enum):
    """Dark-current growth with exposure time."""
    LINEAR = "LINEAR"
    SQRT = "SQRT"

    def basis(self, exposure_s):
        """Time factor g(t) so that lambda = a * g(t)."""
        t = np.asarray(exposure_s, dtype=np.float64)
        return t if self is TimeLaw.LINEAR else np.sqrt(t)


class NoiseTerm(IntEnum):
    """Stream ids; each term draws from its own generator."""
    DRAWS = 0
    SHOT = 1
    DARK = 2
    ROW = 3
    READ = 4
    QUANT = 5


class NoiseStreams:
    """
    Counter-based random streams keyed by (seed, term, frame index).

    Every term gets an independent Philox generator, so the output of one
    sampler never depends on which other samplers ran or in which order.
    Pixels are drawn in row-major order from their term's stream.
    """

    def __init__(self, seed: int, frame_index: int = 0):
        if seed < 0:
            raise ValidationError("seed must be non-negative")
        self.seed = int(seed)
        self.frame_index = int(frame_index)

    def for_term(self, term: NoiseTerm) -> np.random.Generator:
        key = np.random.SeedSequence([self.seed, int(term), self.frame_index])
        return np.random.Generator(np.random.Philox(key))

    def __repr__(self):
        return f"NoiseStreams(seed={self.seed}, frame_index={self.frame_index})"


@dataclass(frozen=True)
class NoiseModelConfig:
    """Which noise terms are active, and per-pixel vs global calibration."""

    enable_shot: bool = True   # P
    enable_read: bool = True   # G
    enable_row: bool = True    # H
    enable_quant: bool = True  # Q
    enable_fpn: bool = True    # F
    enable_dark: bool = True   # A
    per_pixel: bool = True

    _LETTERS = (("P", "enable_shot"), ("G", "enable_read"), ("H", "enable_row"),
                ("Q", "enable_quant"), ("F", "enable_fpn"), ("A", "enable_dark"))

    @classmethod
    def from_label(cls, label: str) -> 'NoiseModelConfig':
        """
        Parse an ablation label such as ``"P+G+F+H+Q+A"`` or ``"P+G+noD"``.

        Letters switch terms on; ``noD`` selects global calibration.
        """
        tokens = [t.strip() for t in label.replace(",", "+").split("+") if t.strip()]
        letters = dict(cls._LETTERS)
        kwargs = {name: False for name in letters.values()}
        kwargs['per_pixel'] = True
        for token in tokens:
            if token.lower() == "nod":
                kwargs['per_pixel'] = False
            elif token.upper() in letters:
                kwargs[letters[token.upper()]] = True
            else:
                raise ValidationError(f"unknown noise term {token!r} in label {label!r}")
        return cls(**kwargs)

    def to_label(self) -> str:
        parts = [letter for letter, name in self._LETTERS if getattr(self, name)]
        if not self.per_pixel:
            parts.append("noD")
        return "+".join(parts)

    @classmethod
    def disabled(cls) -> 'NoiseModelConfig':
        return cls(False, False, False, False, False, False, True)


@dataclass(frozen=True)
class DarkPhysicalParams:
    """Inputs of the thermal dark-current rate law."""

    pixel_area_Q: float          # cm^2
    temperature_T: float         # K
    figure_of_merit_C: float     # nA/cm^2 at 300 K
    band_gap_E: float            # eV
    boltzmann_k: float = BOLTZMANN_EV

    def __post_init__(self):
        if not self.temperature_T > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature_T}")
        if not self.pixel_area_Q > 0:
            raise ValidationError(f"pixel area must be positive, got {self.pixel_area_Q}")


def physical_dark_rate(p: DarkPhysicalParams) -> float:
    """S = Q * T^(3/2) * C * exp(-E_gap / (2 k T)), electrons per second."""
    return float(p.pixel_area_Q * p.temperature_T ** 1.5 * p.figure_of_merit_C
                 * np.exp(-p.band_gap_E / (2.0 * p.boltzmann_k * p.temperature_T)))


@dataclass(eq=False)
class PixelParamMap:
    """Per-pixel calibrated parameters plus the global row/quantization terms."""

    gain_K: np.ndarray
    fpn_f: np.ndarray
    dark_rate_a: np.ndarray
    read_sigma: np.ndarray
    row_sigma: float = 0.0
    quant_step_q: float = 1.0
    time_law: TimeLaw = TimeLaw.SQRT
    iso: int = 0

    def __post_init__(self):
        self.time_law = TimeLaw(self.time_law)
        for name in PLANE_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shape = self.gain_K.shape
        if len(shape) != 2:
            raise DimensionMismatchError(f"parameter planes must be 2D, got {shape}")
        for name in PLANE_NAMES:
            plane = getattr(self, name)
            if plane.shape != shape:
                raise DimensionMismatchError(f"{name} has shape {plane.shape}, expected {shape}")
            if not np.all(np.isfinite(plane)):
                raise ValidationError(f"{name} contains non-finite values")
        for name in ("gain_K", "dark_rate_a", "read_sigma"):
            if np.any(getattr(self, name) < 0):
                raise ValidationError(f"{name} must be non-negative")
        if np.any(1.0 + self.fpn_f <= 0):
            raise ValidationError("1 + fpn_f must be positive everywhere")
        if self.row_sigma < 0:
            raise ValidationError("row_sigma must be non-negative")
        if not self.quant_step_q > 0:
            raise ValidationError("quant_step_q must be positive")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gain_K.shape

    def globalized(self) -> 'PixelParamMap':
        """Replace every plane by its spatial median (global calibration)."""
        planes = {name: np.full(self.shape, float(np.median(getattr(self, name))))
                  for name in PLANE_NAMES}
        return replace(self, **planes)

    def crop(self, size: int) -> 'PixelParamMap':
        return replace(self, **{name: center_crop(getattr(self, name), size) for name in PLANE_NAMES})

    def __eq__(self, other) -> bool:
        if not isinstance(other, PixelParamMap):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name))
                   if f.name in PLANE_NAMES else getattr(self, f.name) == getattr(other, f.name)
                   for f in fields(self))


def _poisson(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts; above the threshold a rounded N(lam, lam) stands in."""
    lam = np.asarray(lam, dtype=np.float64)
    out = np.empty(lam.shape, dtype=np.float64)
    large = lam > POISSON_GAUSSIAN_THRESHOLD
    if np.any(~large):
        out[~large] = rng.poisson(lam[~large])
    if np.any(large):
        big = lam[large]
        out[large] = np.maximum(np.rint(rng.normal(big, np.sqrt(big))), 0.0)
    return out


def sample_shot(signal_e, gain_K, rng: np.random.Generator) -> np.ndarray:
    """Photon shot noise: Poisson(signal_e) scaled by the gain, in DN."""
    signal_e = np.asarray(signal_e, dtype=np.float64)
    if np.any(signal_e < 0):
        raise ValidationError("signal must be non-negative for shot-noise sampling")
    return _poisson(signal_e, rng) * np.asarray(gain_K, dtype=np.float64)


def sample_dark(exposure_s: float, dark_rate_a, fpn_f, time_law: TimeLaw,
                rng: np.random.Generator) -> np.ndarray:
    """Dark-current shot counts Poisson(a * g(t)) scaled by (1 + f), in DN."""
    if not exposure_s > 0:
        raise ValidationError(f"exposure must be positive, got {exposure_s}")
    lam = np.asarray(dark_rate_a, dtype=np.float64) * TimeLaw(time_law).basis(exposure_s)
    return _poisson(lam, rng) * (1.0 + np.asarray(fpn_f, dtype=np.float64))


def sample_row(height: int, width: int, row_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """One N(0, row_sigma^2) offset per row, broadcast across the row."""
    if row_sigma < 0:
        raise ValidationError("row_sigma must be non-negative")
    offsets = rng.normal(0.0, 1.0, size=height) * row_sigma
    return np.repeat(offsets[:, None], width, axis=1)


def sample_read(read_sigma, rng: np.random.Generator) -> np.ndarray:
    """Independent zero-mean Gaussian source-follower noise per pixel."""
    read_sigma = np.asarray(read_sigma, dtype=np.float64)
    if np.any(read_sigma < 0):
        raise ValidationError("read_sigma must be non-negative")
    return rng.standard_normal(read_sigma.shape) * read_sigma


def sample_quant(shape, quant_step_q: float, rng: np.random.Generator) -> np.ndarray:
    """Independent U(-q/2, q/2) quantization error per pixel."""
    if not quant_step_q > 0:
        raise ValidationError("quant_step_q must be positive")
    return (rng.random(shape) - 0.5) * quant_step_q


def compose(clean_e, params: PixelParamMap, cfg: NoiseModelConfig, exposure_s: float,
            rng: NoiseStreams) -> np.ndarray:
    """
    Composite observation D = K(I + N_s) + N_RS(1 + N_FP) + N_H + N_r + N_q.

    Args:
        clean_e: Expected photo-electrons per pixel
        params: Calibrated parameter map (same shape as clean_e)
        cfg: Active terms; per_pixel=False collapses every plane to its median
        exposure_s: Exposure time driving the dark-current term
        rng: Per-term random streams for this frame

    Returns:
        Noisy signal in DN, pedestal not included
    """
    clean_e = np.asarray(clean_e, dtype=np.float64)
    if clean_e.shape != params.shape:
        raise DimensionMismatchError(
            f"signal shape {clean_e.shape} does not match parameter shape {params.shape}")
    if not cfg.per_pixel:
        params = params.globalized()

    height, width = params.shape
    if cfg.enable_shot:
        out = sample_shot(clean_e, params.gain_K, rng.for_term(NoiseTerm.SHOT))
    else:
        out = params.gain_K * clean_e
    if cfg.enable_dark:
        fpn = params.fpn_f if cfg.enable_fpn else np.zeros(params.shape)
        out = out + sample_dark(exposure_s, params.dark_rate_a, fpn, params.time_law,
                                rng.for_term(NoiseTerm.DARK))
    if cfg.enable_row:
        out = out + sample_row(height, width, params.row_sigma, rng.for_term(NoiseTerm.ROW))
    if cfg.enable_read:
        out = out + sample_read(params.read_sigma, rng.for_term(NoiseTerm.READ))
    if cfg.enable_quant:
        out = out + sample_quant(params.shape, params.quant_step_q, rng.for_term(NoiseTerm.QUANT))
    return out


def expected_moments(clean_e, params: PixelParamMap, cfg: NoiseModelConfig,
                     exposure_s: float) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic per-pixel mean and variance of ``compose``."""
    if not cfg.per_pixel:
        params = params.globalized()
    clean_e = np.asarray(clean_e, dtype=np.float64)
    K = params.gain_K
    mean = K * clean_e
    var = K ** 2 * clean_e if cfg.enable_shot else np.zeros(params.shape)
    if cfg.enable_dark:
        scale = 1.0 + (params.fpn_f if cfg.enable_fpn else 0.0)
        lam = params.dark_rate_a * params.time_law.basis(exposure_s)
        mean = mean + scale * lam
        var = var + scale ** 2 * lam
    if cfg.enable_row:
        var = var + params.row_sigma ** 2
    if cfg.enable_read:
        var = var + params.read_sigma ** 2
    if cfg.enable_quant:
        var = var + params.quant_step_q ** 2 / 12.0
    return mean, var


def save_params(params: PixelParamMap, path: Union[str, Path]):
    """Write the PXCAL1 format: magic, LE header length, JSON header, LE float32 planes."""
    height, width = params.shape
    header = json.dumps({
        'width': width,
        'height': height,
        'planes': list(PLANE_NAMES),
        'row_sigma': float(params.row_sigma),
        'quant_step_q': float(params.quant_step_q),
        'time_law': params.time_law.value,
        'iso': int(params.iso),
    }, sort_keys=True).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(PXCAL_MAGIC)
        f.write(struct.pack('<I', len(header)))
        f.write(header)
        for name in PLANE_NAMES:
            f.write(getattr(params, name).astype('<f4').tobytes())
    logger.info(f"Saved {width}x{height} parameter map to {path}")


def load_params(path: Union[str, Path]) -> PixelParamMap:
    """Read a PXCAL1 parameter file."""
    with open(path, 'rb') as f:
        buf = f.read()
    if not buf.startswith(PXCAL_MAGIC):
        raise RawFormatError(f"{path} is not a PXCAL1 file")
    offset = len(PXCAL_MAGIC)
    try:
        (length,) = struct.unpack_from('<I', buf, offset)
        offset += 4
        header = json.loads(buf[offset:offset + length].decode('utf-8'))
        offset += length
        width, height = int(header['width']), int(header['height'])
        names = header['planes']
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise RawFormatError(f"invalid PXCAL1 header in {path}: {e}")
    if set(names) != set(PLANE_NAMES):
        raise RawFormatError(f"{path} planes {names} do not match {list(PLANE_NAMES)}")

    plane_bytes = width * height * 4
    if len(buf) - offset != plane_bytes * len(names):
        raise RawFormatError(f"{path} has a truncated plane payload")
    planes: Dict[str, np.ndarray] = {}
    for name in names:
        raw = np.frombuffer(buf, dtype='<f4', count=width * height, offset=offset)
        planes[name] = raw.reshape(height, width).astype(np.float64)
        offset += plane_bytes
    return PixelParamMap(
        row_sigma=float(header['row_sigma']),
        quant_step_q=float(header['quant_step_q']),
        time_law=TimeLaw(header['time_law']),
        iso=int(header['iso']),
        **planes,
    )
