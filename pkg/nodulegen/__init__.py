"""
Two-stage lung-nodule synthesis

Stage 1 generates six-class semantic masks with a progressively grown,
style-based GAN; stage 2 translates masks into grayscale images with an
attention-augmented UNet. Includes the metric suite, a phantom paired
dataset and a gradient-check harness.

Main components:
- config: Format constants and run configuration
- models: Data models for samples, boxes and results
- maskcodec, attention, maskgan, translator, metrics, phantomdata: the library
- stages: Individual processing stages
- pipeline: Pipeline orchestration
- workflows: One entry point per CLI command
"""

__version__ = '0.1.0'

from .config import PipelineConfig, RunConfig, PhantomConfig, MaskGanConfig, TranslatorConfig, MetricConfig
from .errors import NoduleGenError, ConfigError, NumericError, ShapeError, FormatError, IoError, PairingError
from .models import BoundingBox, Detection, GroundTruth, PairedSample, ProcessingResult, RunContext
from .pipeline import Pipeline, PipelineBuilder, ConditionalPipeline
from .workflows import (
    cmd_synth_data,
    cmd_train_maskgan,
    cmd_sample_masks,
    cmd_train_translator,
    cmd_translate,
    cmd_compose,
    cmd_eval,
    cmd_gradcheck,
    cmd_augment,
)

__all__ = [
    # Config
    'PipelineConfig',
    'RunConfig',
    'PhantomConfig',
    'MaskGanConfig',
    'TranslatorConfig',
    'MetricConfig',

    # Errors
    'NoduleGenError',
    'ConfigError',
    'NumericError',
    'ShapeError',
    'FormatError',
    'IoError',
    'PairingError',

    # Models
    'BoundingBox',
    'Detection',
    'GroundTruth',
    'PairedSample',
    'ProcessingResult',
    'RunContext',

    # Pipeline
    'Pipeline',
    'PipelineBuilder',
    'ConditionalPipeline',

    # Commands
    'cmd_synth_data',
    'cmd_train_maskgan',
    'cmd_sample_masks',
    'cmd_train_translator',
    'cmd_translate',
    'cmd_compose',
    'cmd_eval',
    'cmd_gradcheck',
    'cmd_augment',
]
