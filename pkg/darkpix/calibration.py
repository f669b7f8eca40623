"""
Per-pixel noise calibration for DarkPix.

Estimates every PixelParamMap field from flat, bias and dark frame stacks:
conversion gain from the flat-field variance/mean relation, FPN and read
noise from bias frames, a global row-noise sigma, dark-current rates and
their exposure-time law, plus PPCC goodness-of-fit reports.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .noisemodel import PixelParamMap, TimeLaw
from .rawio import FrameStack, StackKind, center_crop, pixel_mean_map, pixel_var_map
from .utils import Config, DimensionMismatchError, InsufficientFramesError, ValidationError

logger = logging.getLogger(__name__)

MIN_ROW_WIDTH = 16
MIN_PPCC_SAMPLES = 8


@dataclass
class TimeLawFit:
    """Through-origin least-squares fits of y = a*t and y = a*sqrt(t)."""

    coefficient_a: Union[float, np.ndarray]
    law: TimeLaw
    residual_sse: Dict[TimeLaw, float]
    coefficients: Dict[TimeLaw, Union[float, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'law': self.law.value,
            'residual_sse': {law.value: float(sse) for law, sse in self.residual_sse.items()},
        }


@dataclass
class PpccReport:
    """Probability-plot fit of one sample against the normal distribution."""

    pixel_coords: Optional[Tuple[int, int]]
    r_squared: float
    n_samples: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'pixel_coords': list(self.pixel_coords) if self.pixel_coords is not None else None,
            'r_squared': float(self.r_squared),
            'n_samples': int(self.n_samples),
        }


def estimate_fpn(bias: FrameStack) -> np.ndarray:
    """Per-pixel temporal mean of the bias stack (additive FPN offset in DN)."""
    bias.require(StackKind.BIAS, 1)
    return pixel_mean_map(bias)


def estimate_row_sigma(bias: FrameStack) -> float:
    """
    Global row-noise sigma from the temporal spread of per-row means.

    The row mean of FPN-removed residuals carries the full row variance plus
    the per-pixel variance attenuated by the width W; with v the mean raw
    pixel variance, sigma_H^2 = (var_rows - v / W) / (1 - 1 / W).
    """
    bias.require(StackKind.BIAS, 2)
    height, width = bias.shape
    if width < MIN_ROW_WIDTH:
        raise DimensionMismatchError(
            f"row-noise estimation needs width >= {MIN_ROW_WIDTH}, got {width}")

    cube = bias.cube()
    residual = cube - cube.mean(axis=0)
    row_means = residual.mean(axis=2)
    var_rows = float(row_means.var(axis=0, ddof=1).mean())
    pixel_var = float(cube.var(axis=0, ddof=1).mean())
    row_var = max(0.0, (var_rows - pixel_var / width) / (1.0 - 1.0 / width))
    logger.info(f"Row noise: sigma_H = {np.sqrt(row_var):.4f} DN over {height} rows")
    return float(np.sqrt(row_var))


def _destriped_read_variance(bias: FrameStack) -> np.ndarray:
    """Per-pixel variance after removing each frame's row offsets, bias-corrected for finite W."""
    cube = bias.cube()
    width = cube.shape[2]
    destriped = cube - cube.mean(axis=2, keepdims=True)
    v = destriped.var(axis=0, ddof=1)
    row_total = v.sum(axis=1, keepdims=True) / (1.0 - 1.0 / width)
    return (v - row_total / width ** 2) / (1.0 - 2.0 / width)


def estimate_read_sigma(bias: FrameStack, row_sigma: Optional[float] = None,
                        destripe: bool = False) -> np.ndarray:
    """
    Per-pixel source-follower noise sigma from bias-frame temporal variance.

    Args:
        bias: BIAS stack with at least 2 frames
        row_sigma: Global row sigma to subtract; None returns the raw temporal std
        destripe: Remove per-frame row offsets instead of subtracting row_sigma^2

    Returns:
        Sigma grid in DN
    """
    bias.require(StackKind.BIAS, 2)
    if destripe:
        if bias.shape[1] < MIN_ROW_WIDTH:
            raise DimensionMismatchError(
                f"destriping needs width >= {MIN_ROW_WIDTH}, got {bias.shape[1]}")
        return np.sqrt(np.maximum(_destriped_read_variance(bias), 0.0))

    var = pixel_var_map(bias)
    if row_sigma is None:
        logger.warning("Row correction skipped; returning raw temporal std as read sigma")
        return np.sqrt(var)
    return np.sqrt(np.maximum(var - row_sigma ** 2, 0.0))


def estimate_gain(flat: FrameStack, bias_var: Optional[np.ndarray] = None,
                  min_mean: float = 1.0) -> np.ndarray:
    """
    Per-pixel conversion gain K = Var(D) / mean(D) from a flat-field stack.

    With ``bias_var`` the exposure-independent variance is subtracted first;
    otherwise Var(D) >> Var(N) is assumed. Pixels whose mean is at most
    ``min_mean`` DN get K = 0 (see ``gain_flags``).
    """
    flat.require(StackKind.FLAT, 2)
    mean = pixel_mean_map(flat)
    var = pixel_var_map(flat)
    if bias_var is not None:
        if np.shape(bias_var) != mean.shape:
            raise DimensionMismatchError(
                f"bias variance shape {np.shape(bias_var)} does not match flat {mean.shape}")
        var = np.maximum(var - bias_var, 0.0)
    valid = mean > min_mean
    gain = np.zeros_like(mean)
    gain[valid] = var[valid] / mean[valid]
    return gain


def gain_flags(flat: FrameStack, gain: np.ndarray, min_mean: float = 1.0) -> np.ndarray:
    """Boolean mask of pixels whose gain estimate is degenerate."""
    return (pixel_mean_map(flat) <= min_mean) | (gain <= 0)


def estimate_dark(dark: FrameStack, fpn: np.ndarray, offset: Optional[np.ndarray] = None,
                  floor: float = 0.01) -> np.ndarray:
    """
    Per-pixel dark-current count for the stack's exposure.

    lambda = |mean_dark - offset| / (1 + fpn); estimates below ``floor`` are
    set to 0. With no offset this is |mean_dark| / (1 + fpn). SensorCalibrator
    passes the bias FPN offset, since dark frames carry that offset too.
    """
    dark.require(StackKind.DARK, 1)
    fpn = np.asarray(fpn, dtype=np.float64)
    if fpn.shape != dark.shape:
        raise DimensionMismatchError(f"fpn shape {fpn.shape} does not match dark {dark.shape}")
    scale = 1.0 + fpn
    if np.any(scale <= 0):
        raise ValidationError(f"1 + fpn must be positive; {int(np.sum(scale <= 0))} pixels violate it")

    mean = pixel_mean_map(dark)
    if offset is not None:
        mean = mean - offset
    lam = np.abs(mean) / scale
    lam[lam < floor] = 0.0
    return lam


def dark_variance_crosscheck(dark: FrameStack, bias: FrameStack,
                             offset: Optional[np.ndarray] = None,
                             min_mean: float = 1.0) -> np.ndarray:
    """
    Variance-based K2 = (Var(dark) - Var(bias)) / mean(dark) per pixel.

    Independent of the bias-derived FPN; pixels with dark mean at most
    ``min_mean`` are NaN.
    """
    dark.require(StackKind.DARK, 2)
    bias.require(StackKind.BIAS, 2)
    if dark.shape != bias.shape:
        raise DimensionMismatchError(f"dark {dark.shape} and bias {bias.shape} differ in shape")
    mean = pixel_mean_map(dark)
    if offset is not None:
        mean = mean - offset
    excess = pixel_var_map(dark) - pixel_var_map(bias)
    k2 = np.full(mean.shape, np.nan)
    valid = mean > min_mean
    k2[valid] = excess[valid] / mean[valid]
    return k2


def fit_time_law(points: Sequence[Tuple[float, Union[float, np.ndarray]]]) -> TimeLawFit:
    """
    Fit both dark-current time laws through the origin and pick the better one.

    Args:
        points: (exposure_s, lambda) pairs; lambda is a scalar or a grid

    Returns:
        TimeLawFit; SQRT wins ties
    """
    if not points:
        raise InsufficientFramesError("time-law fit needs at least 2 exposures")
    exposures = np.array([float(t) for t, _ in points])
    if np.any(exposures <= 0):
        raise ValidationError("exposures must be positive")
    if np.unique(exposures).size < 2:
        raise InsufficientFramesError("time-law fit needs at least 2 distinct exposures")

    first = np.asarray(points[0][1], dtype=np.float64)
    Y = np.stack([np.asarray(y, dtype=np.float64).ravel() for _, y in points])

    coefficients: Dict[TimeLaw, Union[float, np.ndarray]] = {}
    residual_sse: Dict[TimeLaw, float] = {}
    for law in (TimeLaw.LINEAR, TimeLaw.SQRT):
        g = law.basis(exposures)[:, None]
        a, _, _, _ = np.linalg.lstsq(g, Y, rcond=None)
        residual_sse[law] = float(np.sum((Y - g @ a) ** 2))
        a = a[0]
        coefficients[law] = float(a[0]) if first.ndim == 0 else a.reshape(first.shape)

    law = TimeLaw.LINEAR if residual_sse[TimeLaw.LINEAR] < residual_sse[TimeLaw.SQRT] else TimeLaw.SQRT
    logger.debug(f"Time-law fit SSE: linear={residual_sse[TimeLaw.LINEAR]:.4g}, "
                 f"sqrt={residual_sse[TimeLaw.SQRT]:.4g}")
    return TimeLawFit(coefficient_a=coefficients[law], law=law,
                      residual_sse=residual_sse, coefficients=coefficients)


def ppcc_fit(samples, distribution: str = "GAUSSIAN",
             pixel_coords: Optional[Tuple[int, int]] = None) -> PpccReport:
    """
    Probability plot correlation against the normal distribution.

    Sorted samples are paired with normal quantiles at Blom plotting
    positions (i - 0.375) / (n + 0.25); R^2 is the squared Pearson
    correlation of that plot.
    """
    if distribution.upper() != "GAUSSIAN":
        raise ValidationError(f"unsupported distribution {distribution!r}")
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n < MIN_PPCC_SAMPLES:
        raise InsufficientFramesError(f"PPCC needs at least {MIN_PPCC_SAMPLES} samples, got {n}")
    if np.all(x == x[0]):
        raise ValidationError("PPCC undefined for a constant sample")

    positions = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    quantiles = stats.norm.ppf(positions)
    r = np.corrcoef(quantiles, x)[0, 1]
    return PpccReport(pixel_coords=pixel_coords, r_squared=float(np.clip(r * r, 0.0, 1.0)),
                      n_samples=int(n))


def ppcc_pixel(stack: FrameStack, x: int, y: int) -> PpccReport:
    """PPCC of one pixel's values across the frames of a stack."""
    height, width = stack.shape
    if not (0 <= x < width and 0 <= y < height):
        raise DimensionMismatchError(f"pixel ({x}, {y}) outside {width}x{height} frame")
    samples = [frame.signal()[y, x] for frame in stack.frames]
    return ppcc_fit(samples, pixel_coords=(x, y))


def ppcc_frame(stack: FrameStack, index: int = 0) -> PpccReport:
    """PPCC of every pixel of a single frame pooled together."""
    if not 0 <= index < len(stack):
        raise ValidationError(f"frame index {index} outside stack of {len(stack)}")
    return ppcc_fit(stack.frames[index].signal())


def ppcc_coords(shape: Tuple[int, int], count: int) -> List[Tuple[int, int]]:
    """Evenly spaced pixels along the frame diagonal."""
    height, width = shape
    return [((i + 1) * width // (count + 1), (i + 1) * height // (count + 1))
            for i in range(count)]


@dataclass
class VarianceSpread:
    """Per-pixel read variance of sampled pixels and its amplification by ratio^2."""

    coords: List[Tuple[int, int]]
    variance: np.ndarray
    amplified: Dict[float, np.ndarray]

    @property
    def spread(self) -> float:
        return float(self.variance.max() - self.variance.min())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'pixels': len(self.coords),
            'variance_min': float(self.variance.min()),
            'variance_max': float(self.variance.max()),
            'amplified_spread': {str(r): float(v.max() - v.min()) for r, v in self.amplified.items()},
        }


def variance_spread(read_sigma: np.ndarray, ratios: Sequence[float] = (100.0, 200.0, 300.0),
                    count: int = 100, seed: int = 0) -> VarianceSpread:
    """Sample ``count`` pixels and report how exposure compensation widens their variance spread."""
    read_sigma = np.asarray(read_sigma, dtype=np.float64)
    height, width = read_sigma.shape
    count = min(count, read_sigma.size)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    flat_idx = np.sort(rng.choice(read_sigma.size, size=count, replace=False))
    coords = [(int(i % width), int(i // width)) for i in flat_idx]
    variance = read_sigma.ravel()[flat_idx] ** 2
    return VarianceSpread(coords=coords, variance=variance,
                          amplified={float(r): variance * r ** 2 for r in ratios})


@dataclass
class CalibrationReport:
    """Everything a calibration run produced."""

    params: PixelParamMap
    fpn_offset: np.ndarray
    flags: Dict[str, Any] = field(default_factory=dict)
    time_law_fit: Optional[TimeLawFit] = None
    ppcc: List[PpccReport] = field(default_factory=list)
    spread: Optional[VarianceSpread] = None

    def summary(self) -> Dict[str, Any]:
        """Human-readable JSON summary of the run."""
        p = self.params
        out = {
            'gain_median': float(np.median(p.gain_K)),
            'fpn_std': float(np.std(p.fpn_f)),
            'k2_median': float(np.median(1.0 + p.fpn_f)),
            'read_sigma_median': float(np.median(p.read_sigma)),
            'row_sigma': float(p.row_sigma),
            'dark_a_median': float(np.median(p.dark_rate_a)),
            'time_law': p.time_law.value,
            'ppcc_samples': [r.to_dict() for r in self.ppcc],
            'width': p.shape[1],
            'height': p.shape[0],
            'iso': p.iso,
            'flags': self.flags,
        }
        if self.time_law_fit is not None:
            out['time_law_sse'] = self.time_law_fit.to_dict()['residual_sse']
        if self.spread is not None:
            out['variance_spread'] = self.spread.to_dict()
        return out


class SensorCalibrator:
    """
    Runs the estimators in dependency order and assembles a PixelParamMap.

    Independent estimators run on a thread pool; results are collected in
    submission order so the output does not depend on the thread count.
    """

    def __init__(self, config: Optional[Config] = None):
        """
        Initialize calibrator.

        Args:
            config: Configuration object
        """
        self.config = config or Config()

    def _prepare(self, stacks: List[FrameStack]) -> List[FrameStack]:
        if self.config.crop_size:
            stacks = [center_crop(s, self.config.crop_size) for s in stacks]
        shape = stacks[0].shape
        for s in stacks[1:]:
            if s.shape != shape:
                raise DimensionMismatchError(
                    f"{s.kind.value} stack shape {s.shape} does not match {shape}")
        return stacks

    def calibrate(self, flat: FrameStack, bias: FrameStack, dark_stacks: Sequence[FrameStack],
                  global_mode: bool = False) -> CalibrationReport:
        """
        Calibrate a sensor from its three kinds of stacks.

        Args:
            flat: FLAT stack (>= 2 frames)
            bias: BIAS stack (>= 2 frames)
            dark_stacks: One DARK stack per exposure time
            global_mode: Collapse every plane to its spatial median

        Returns:
            CalibrationReport
        """
        cfg = self.config
        if not dark_stacks:
            raise InsufficientFramesError("calibration needs at least one dark stack")
        flat.require(StackKind.FLAT, 2)
        bias.require(StackKind.BIAS, 2)
        for d in dark_stacks:
            d.require(StackKind.DARK, 1)
        flat, bias, *darks = self._prepare([flat, bias, *dark_stacks])
        flags: Dict[str, Any] = {}
        logger.info(f"Calibrating {bias.shape[1]}x{bias.shape[0]} sensor: {len(flat)} flat, "
                    f"{len(bias)} bias, {len(darks)} dark stacks")

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            fpn_job = pool.submit(estimate_fpn, bias)
            bias_var_job = pool.submit(pixel_var_map, bias)
            row_ok = bias.shape[1] >= MIN_ROW_WIDTH
            row_job = pool.submit(estimate_row_sigma, bias) if row_ok else None

            fpn_offset = fpn_job.result()
            bias_var = bias_var_job.result()
            if row_job is not None:
                row_sigma = row_job.result()
            else:
                logger.warning(f"Frame width {bias.shape[1]} < {MIN_ROW_WIDTH}; row noise not estimated")
                row_sigma = None
                flags['row_correction_skipped'] = True

            destripe = cfg.destripe_read and row_ok
            read_job = pool.submit(estimate_read_sigma, bias, row_sigma, destripe)
            gain_job = pool.submit(estimate_gain, flat, bias_var if cfg.exact_gain else None,
                                   cfg.gain_min_mean)

            k2 = fpn_offset
            clamped = fpn_offset < cfg.fpn_floor
            if np.any(clamped):
                logger.warning(f"Clamping {int(clamped.sum())} FPN estimates at {cfg.fpn_floor}")
                k2 = np.maximum(fpn_offset, cfg.fpn_floor)
            flags['fpn_clamped_pixels'] = int(clamped.sum())

            dark_jobs = [pool.submit(estimate_dark, d, k2, fpn_offset, cfg.dark_floor) for d in darks]
            read_sigma = read_job.result()
            gain = gain_job.result()
            lams = [(d.exposure_s, job.result()) for d, job in zip(darks, dark_jobs)]

        degenerate = gain_flags(flat, gain, cfg.gain_min_mean)
        flags['degenerate_gain_pixels'] = int(degenerate.sum())
        if degenerate.any():
            logger.warning(f"{int(degenerate.sum())} pixels have degenerate gain estimates")
        flags['gain_mode'] = 'exact' if cfg.exact_gain else 'approximate'
        if destripe:
            flags['read_mode'] = 'destriped'
        else:
            flags['read_mode'] = 'raw' if row_sigma is None else 'row-subtracted'

        fit = None
        if len({t for t, _ in lams}) >= 2:
            fit = fit_time_law(lams)
            law = fit.law
            dark_rate = np.maximum(fit.coefficient_a, 0.0)
        else:
            logger.warning("Single dark exposure; defaulting to the sqrt time law")
            law = TimeLaw.SQRT
            t, lam = lams[0]
            dark_rate = lam / np.sqrt(t)

        params = PixelParamMap(
            gain_K=gain,
            fpn_f=k2,
            dark_rate_a=dark_rate,
            read_sigma=read_sigma,
            row_sigma=row_sigma or 0.0,
            quant_step_q=1.0,
            time_law=law,
            iso=flat.meta.iso,
        )
        if global_mode:
            params = params.globalized()
            flags['global'] = True

        reports = []
        if len(bias) >= MIN_PPCC_SAMPLES:
            for x, y in ppcc_coords(bias.shape, cfg.ppcc_pixels):
                try:
                    reports.append(ppcc_pixel(bias, x, y))
                except ValidationError as e:
                    logger.warning(f"PPCC skipped at ({x}, {y}): {e}")

        logger.info(f"Calibration done: gain median {np.median(params.gain_K):.4f}, "
                    f"read sigma median {np.median(params.read_sigma):.4f}, law {law.value}")
        return CalibrationReport(params=params, fpn_offset=fpn_offset, flags=flags,
                                 time_law_fit=fit, ppcc=reports,
                                 spread=variance_spread(read_sigma, seed=cfg.seed or 0))


def calibrate_all(flat: FrameStack, bias: FrameStack, dark_stacks: Sequence[FrameStack],
                  config: Optional[Config] = None, global_mode: bool = False) -> PixelParamMap:
    """Calibrate and return only the parameter map."""
    return SensorCalibrator(config).calibrate(flat, bias, dark_stacks, global_mode).params
