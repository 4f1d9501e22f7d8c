"""
Pipeline stages module.
Exports all available processing stages.
"""

from .base import PipelineStage, ValidationStage
from .run_setup import EffectiveConfigStage
from .dataset import (PhantomGenerationStage, DatasetWriteStage, DatasetLoadStage,
                      DatasetValidationStage, DatasetMixStage)
from .training import MaskGanTrainingStage, TranslatorTrainingStage, LossLog
from .synthesis import MaskSamplingStage, TranslationStage
from .evaluation import (EvaluationStage, DetectionEvaluationStage, ReportWriteStage,
                         GradCheckStage, OperatorFixtureStage)

__all__ = [
    'PipelineStage',
    'ValidationStage',
    'EffectiveConfigStage',
    'PhantomGenerationStage',
    'DatasetWriteStage',
    'DatasetLoadStage',
    'DatasetValidationStage',
    'DatasetMixStage',
    'MaskGanTrainingStage',
    'TranslatorTrainingStage',
    'LossLog',
    'MaskSamplingStage',
    'TranslationStage',
    'EvaluationStage',
    'DetectionEvaluationStage',
    'ReportWriteStage',
    'GradCheckStage',
    'OperatorFixtureStage',
]
