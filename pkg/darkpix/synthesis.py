"""
Paired low-light data synthesis for DarkPix.

Darkens a clean frame by an exposure ratio, injects calibrated noise through
the composite model, and builds the exposure-compensated conditioning input
for the flow engine.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .noisemodel import NoiseModelConfig, NoiseStreams, NoiseTerm, PixelParamMap, compose
from .rawio import RawFrame, center_crop, load_frame, save_frame
from .utils import DimensionMismatchError, ValidationError

logger = logging.getLogger(__name__)

NOISY_SUFFIX = "_noisy.pgm"
CLEAN_SUFFIX = "_clean.pgm"


@dataclass
class SynthesisConfig:
    """Darkening ratio, exposure and noise terms for one synthesis run."""

    ratio: float = 200.0
    ratio_range: Optional[List[float]] = None
    exposure_s: float = 1.0
    exposure_range: Optional[List[float]] = None
    seed: int = 0
    cfg: NoiseModelConfig = field(default_factory=NoiseModelConfig)
    compensate: bool = True

    def __post_init__(self):
        if self.ratio < 1:
            raise ValidationError(f"ratio must be >= 1, got {self.ratio}")
        if not self.exposure_s > 0:
            raise ValidationError(f"exposure_s must be positive, got {self.exposure_s}")
        if self.ratio_range is not None:
            lo, hi = self.ratio_range
            if lo > hi or lo < 1:
                raise ValidationError(f"invalid ratio range {self.ratio_range}")
        if self.exposure_range is not None:
            lo, hi = self.exposure_range
            if lo > hi or lo <= 0:
                raise ValidationError(f"invalid exposure range {self.exposure_range}")

    def draw(self, index: int = 0) -> Tuple[float, float]:
        """Ratio and exposure for pair ``index``; uniform draws when ranges are set."""
        rng = NoiseStreams(self.seed, index).for_term(NoiseTerm.DRAWS)
        u_ratio, u_exposure = rng.random(2)
        ratio = self.ratio
        if self.ratio_range is not None:
            lo, hi = self.ratio_range
            ratio = lo + (hi - lo) * u_ratio
        exposure = self.exposure_s
        if self.exposure_range is not None:
            lo, hi = self.exposure_range
            exposure = lo + (hi - lo) * u_exposure
        return float(ratio), float(exposure)


def darken(clean: RawFrame, ratio: float, gain_K=1.0) -> np.ndarray:
    """
    Expected photo-electrons of a shot ``ratio`` times darker.

    Args:
        clean: Long-exposure reference frame
        ratio: Darkening factor (>= 1)
        gain_K: Scalar or per-pixel conversion gain in DN per electron

    Returns:
        Real electron grid, clamped at 0; pixels with zero gain give 0
    """
    if ratio < 1:
        raise ValidationError(f"ratio must be >= 1, got {ratio}")
    signal = clean.signal()
    gain = np.broadcast_to(np.asarray(gain_K, dtype=np.float64), signal.shape)
    electrons = np.zeros_like(signal)
    valid = gain > 0
    electrons[valid] = signal[valid] / gain[valid] / ratio
    return np.maximum(electrons, 0.0)


def _match(clean: RawFrame, params: PixelParamMap) -> RawFrame:
    if clean.shape == params.shape:
        return clean
    if params.shape[0] != params.shape[1] or params.shape[0] > min(clean.shape):
        raise DimensionMismatchError(
            f"clean frame {clean.shape} cannot be cropped to parameter shape {params.shape}")
    return center_crop(clean, params.shape[0])


def synthesize_pair(clean: RawFrame, params: PixelParamMap, sc: SynthesisConfig,
                    index: int = 0) -> Tuple[RawFrame, RawFrame]:
    """
    Synthesize a (noisy, clean) pair from a clean frame.

    The clean frame is center-cropped to the parameter map when they differ.
    The noisy frame's sidecar records the drawn ratio, exposure and seed.
    """
    clean = _match(clean, params)
    ratio, exposure = sc.draw(index)
    electrons = darken(clean, ratio, params.gain_K)
    signal = compose(electrons, params, sc.cfg, exposure, NoiseStreams(sc.seed, index))

    meta = clean.meta
    dn = np.clip(np.rint(signal + meta.black_level), 0, meta.white_level)
    noisy = RawFrame(
        data=dn.astype(np.uint16),
        meta=replace(meta, exposure_s=exposure),
        attrs={'ratio': ratio, 'exposure_s': exposure, 'seed': sc.seed, 'index': index},
    )
    return noisy, clean


def build_condition(clean: RawFrame, params: PixelParamMap, sc: SynthesisConfig,
                    index: int = 0) -> np.ndarray:
    """Normalized noisy frame, scaled back up by the ratio when compensating."""
    noisy, _ = synthesize_pair(clean, params, sc, index)
    return condition_from_noisy(noisy, noisy.attrs['ratio'], sc.compensate)


def condition_from_noisy(noisy: RawFrame, ratio: float, compensate: bool = True) -> np.ndarray:
    """Conditioning tensor of an already synthesized (or captured) noisy frame."""
    normalized = np.clip(noisy.normalized(), 0.0, 1.0)
    if compensate:
        return normalized * ratio
    return normalized


def synthesize_directory(clean_dir: Union[str, Path], params: PixelParamMap, sc: SynthesisConfig,
                         out_dir: Union[str, Path], progress: bool = False) -> List[Path]:
    """
    Write ``<stem>_noisy.pgm`` / ``<stem>_clean.pgm`` pairs for every clean frame.

    Returns:
        Paths of all files written (frames and sidecars)
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    paths = sorted(clean_dir.glob("*.pgm"))
    if not paths:
        raise ValidationError(f"no .pgm frames in {clean_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for index, path in enumerate(tqdm(paths, desc="synthesize", disable=not progress)):
        noisy, clean = synthesize_pair(load_frame(path), params, sc, index)
        for frame, suffix in ((noisy, NOISY_SUFFIX), (clean, CLEAN_SUFFIX)):
            target = out_dir / f"{path.stem}{suffix}"
            save_frame(frame, target)
            written.extend([target, Path(str(target) + ".json")])
    logger.info(f"Synthesized {len(paths)} pairs into {out_dir}")
    return written


def load_pairs(pair_dir: Union[str, Path], require_clean: bool = True
               ) -> List[Tuple[str, RawFrame, Optional[RawFrame]]]:
    """
    Load ``(stem, noisy, clean)`` triples from a pair directory.

    With ``require_clean=False`` the clean frame is never opened and is None.
    """
    pair_dir = Path(pair_dir)
    noisy_paths = sorted(pair_dir.glob(f"*{NOISY_SUFFIX}"))
    if not noisy_paths:
        raise ValidationError(f"no *{NOISY_SUFFIX} frames in {pair_dir}")
    pairs = []
    for noisy_path in noisy_paths:
        stem = noisy_path.name[:-len(NOISY_SUFFIX)]
        clean = None
        if require_clean:
            clean_path = pair_dir / f"{stem}{CLEAN_SUFFIX}"
            if not clean_path.exists():
                raise ValidationError(f"missing clean frame {clean_path}")
            clean = load_frame(clean_path)
        pairs.append((stem, load_frame(noisy_path), clean))
    return pairs
