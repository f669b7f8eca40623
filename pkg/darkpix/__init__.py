"""
DarkPix: Per-Pixel Low-Light Sensor Noise Toolkit

Calibrates CMOS noise parameters pixel by pixel from flat, bias and dark
frames, synthesizes paired low-light RAW data from them, and restores
noisy frames with a small conditional rectified-flow model.
"""

__version__ = "1.0.0"
__author__ = "DarkPix Team"

from .rawio import RawFrame, FrameStack, SensorMeta, StackKind, load_frame, save_frame
from .noisemodel import NoiseModelConfig, PixelParamMap, TimeLaw, compose
from .calibration import SensorCalibrator, calibrate_all
from .synthesis import SynthesisConfig, synthesize_pair, build_condition
from .velocity import FieldArchitecture, VelocityField
from .rectflow import train, sample_search, two_stage_sample, infer
from .quality import psnr, ssim
from .virtual import VirtualSensor
from .utils import Config

__all__ = [
    'RawFrame',
    'FrameStack',
    'SensorMeta',
    'StackKind',
    'load_frame',
    'save_frame',
    'NoiseModelConfig',
    'PixelParamMap',
    'TimeLaw',
    'compose',
    'SensorCalibrator',
    'calibrate_all',
    'SynthesisConfig',
    'synthesize_pair',
    'build_condition',
    'FieldArchitecture',
    'VelocityField',
    'train',
    'sample_search',
    'two_stage_sample',
    'infer',
    'psnr',
    'ssim',
    'VirtualSensor',
    'Config',
]
