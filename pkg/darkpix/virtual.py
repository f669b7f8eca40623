"""
Virtual sensor: a random sensor with known noise parameters whose captures
are generated through the composite noise model. Calibration round trips
and the CLI ``simulate`` command use it as ground truth.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .noisemodel import NoiseModelConfig, NoiseStreams, PixelParamMap, TimeLaw, compose
from .rawio import FrameStack, RawFrame, SensorMeta, StackKind, save_stack
from .utils import ValidationError

logger = logging.getLogger(__name__)

BIAS_EXPOSURE_S = 1.0 / 8000.0
FLAT_EXPOSURE_S = 0.01
_KIND_STREAM = {StackKind.FLAT: 1, StackKind.BIAS: 2, StackKind.DARK: 3}


@dataclass
class VirtualSensor:
    """
    Sensor with frozen ground-truth parameters.

    Every capture is ``round(compose(...) + f + black_level)``: the bias-frame
    FPN offset ``f`` is added to each frame, and integer rounding stands in
    for the quantization term.
    """

    truth: PixelParamMap
    black_level: int = 64
    white_level: int = 16383
    seed: int = 0
    cfg: NoiseModelConfig = field(default_factory=lambda: NoiseModelConfig(enable_quant=False))
    progress: bool = False

    @classmethod
    def random(cls, height: int = 64, width: int = 64, seed: int = 0,
               gain_range: Tuple[float, float] = (0.8, 1.2), fpn_std: float = 0.1,
               read_range: Tuple[float, float] = (1.0, 5.0), row_sigma: float = 2.0,
               dark_range: Tuple[float, float] = (0.0, 3.0), time_law: TimeLaw = TimeLaw.SQRT,
               iso: int = 100, **kwargs) -> 'VirtualSensor':
        """Draw a sensor with uniform gain/read/dark maps and a Gaussian FPN map."""
        if height <= 0 or width <= 0:
            raise ValidationError(f"invalid sensor size {width}x{height}")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xCA1])))
        shape = (height, width)
        truth = PixelParamMap(
            gain_K=rng.uniform(*gain_range, size=shape),
            fpn_f=np.clip(rng.normal(0.0, 1.0, size=shape) * fpn_std, -0.9, None),
            dark_rate_a=rng.uniform(*dark_range, size=shape),
            read_sigma=rng.uniform(*read_range, size=shape),
            row_sigma=row_sigma,
            quant_step_q=1.0,
            time_law=time_law,
            iso=iso,
        )
        return cls(truth=truth, seed=seed, **kwargs)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.truth.shape

    def meta(self, exposure_s: float) -> SensorMeta:
        return SensorMeta(iso=self.truth.iso, exposure_s=exposure_s, black_level=self.black_level,
                          white_level=self.white_level, camera_id=f"virtual-{self.seed}")

    def frame(self, clean_e: np.ndarray, exposure_s: float, frame_index: int) -> RawFrame:
        """One capture of the electron grid ``clean_e``."""
        noisy = compose(clean_e, self.truth, self.cfg, exposure_s,
                        NoiseStreams(self.seed, frame_index))
        if self.cfg.enable_fpn:
            noisy = noisy + self.truth.fpn_f
        dn = np.clip(np.rint(noisy + self.black_level), 0, self.white_level)
        return RawFrame(data=dn.astype(np.uint16), meta=self.meta(exposure_s))

    def capture(self, kind: StackKind, n_frames: int, exposure_s: Optional[float] = None,
                illumination_e: float = 0.0, stream: int = 0) -> FrameStack:
        """
        Capture a calibration stack.

        Args:
            kind: FLAT, BIAS or DARK
            n_frames: Number of frames
            exposure_s: Exposure time (defaults: flat 1/100 s, bias 1/8000 s; required for dark)
            illumination_e: Uniform photo-electrons per pixel (flat frames)
            stream: Distinguishes stacks of the same kind

        Returns:
            FrameStack of ``n_frames`` frames
        """
        kind = StackKind(kind)
        if n_frames < 1:
            raise ValidationError("n_frames must be at least 1")
        if exposure_s is None:
            if kind == StackKind.DARK:
                raise ValidationError("dark captures need an exposure time")
            exposure_s = FLAT_EXPOSURE_S if kind == StackKind.FLAT else BIAS_EXPOSURE_S
        clean = np.full(self.shape, illumination_e if kind == StackKind.FLAT else 0.0)

        base = (_KIND_STREAM[kind] * 1000 + stream) * 1_000_000
        frames = [self.frame(clean, exposure_s, base + i)
                  for i in tqdm(range(n_frames), desc=f"{kind.value} t={exposure_s:g}s",
                                disable=not self.progress)]
        logger.debug(f"Captured {n_frames} {kind.value} frames at {exposure_s:g}s")
        return FrameStack(frames=frames, kind=kind)

    def flat(self, n_frames: int, illumination_e: float = 500.0) -> FrameStack:
        return self.capture(StackKind.FLAT, n_frames, illumination_e=illumination_e)

    def bias(self, n_frames: int) -> FrameStack:
        return self.capture(StackKind.BIAS, n_frames)

    def dark(self, n_frames: int, exposure_s: float) -> FrameStack:
        return self.capture(StackKind.DARK, n_frames, exposure_s=exposure_s,
                            stream=int(round(exposure_s * 1000)))

    def write_stacks(self, directory: Union[str, Path], n_flat: int = 200, n_bias: int = 200,
                     n_dark: int = 100, dark_exposures: Sequence[float] = (1.0, 4.0, 16.0),
                     illumination_e: float = 500.0) -> Dict[str, List[Path]]:
        """
        Write ``flat/``, ``bias/`` and ``dark_<t>s/`` stack directories.

        Returns:
            Mapping of stack directory name to the frame paths written
        """
        directory = Path(directory)
        written = {
            'flat': save_stack(self.flat(n_flat, illumination_e), directory / "flat"),
            'bias': save_stack(self.bias(n_bias), directory / "bias"),
        }
        for t in dark_exposures:
            name = f"dark_{t:g}s"
            written[name] = save_stack(self.dark(n_dark, t), directory / name)
        logger.info(f"Wrote virtual sensor stacks to {directory}")
        return written
