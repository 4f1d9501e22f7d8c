"""
Command workflows.
One pipeline factory and one cmd_* entry point per CLI command; every
command echoes its effective config into the output directory first.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from .config import RunConfig
from .models import RunContext
from .pipeline import Pipeline, PipelineBuilder
from .stages import (
    DatasetLoadStage,
    DatasetMixStage,
    DatasetValidationStage,
    DatasetWriteStage,
    DetectionEvaluationStage,
    EffectiveConfigStage,
    EvaluationStage,
    GradCheckStage,
    MaskGanTrainingStage,
    MaskSamplingStage,
    OperatorFixtureStage,
    PhantomGenerationStage,
    ReportWriteStage,
    TranslationStage,
    TranslatorTrainingStage,
)
from .stages.base import describe_error


def create_synth_data_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    """
    Phantom dataset generation.

    Pipeline stages:
    1. Effective config echo
    2. Phantom generation
    3. Dataset write (masks, images, manifest, COCO annotations)
    4. Dataset validation
    """
    return (PipelineBuilder("SynthData", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(PhantomGenerationStage(logger=logger))
            .add_stage(DatasetWriteStage(source="phantom", logger=logger))
            .add_stage(DatasetValidationStage(logger=logger))
            .build())


def create_train_maskgan_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("TrainMaskGan", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(DatasetLoadStage('dataset', split='train', load_images=False, logger=logger))
            .add_stage(MaskGanTrainingStage(logger=logger))
            .build())


def create_sample_masks_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("SampleMasks", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(MaskSamplingStage(write=True, logger=logger))
            .build())


def create_train_translator_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("TrainTranslator", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(DatasetLoadStage('dataset', split='train', logger=logger))
            .add_stage(TranslatorTrainingStage(logger=logger))
            .build())


def create_translate_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("Translate", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(TranslationStage(write=True, logger=logger))
            .build())


def create_compose_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    """
    Full two-stage synthesis.

    Pipeline stages:
    1. Effective config echo
    2. Mask sampling (mask GAN checkpoint)
    3. Translation (translator checkpoint)
    4. Dataset write, boxes and annotations derived from the sampled masks
    5. Dataset validation
    """
    return (PipelineBuilder("Compose", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(MaskSamplingStage(write=False, logger=logger))
            .add_stage(TranslationStage(write=False, logger=logger))
            .add_stage(DatasetWriteStage(source="synthetic", split=False, logger=logger))
            .add_stage(DatasetValidationStage(logger=logger))
            .build())


def create_eval_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("Evaluate", conditional=True, logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(EvaluationStage(logger=logger))
            .add_stage(DetectionEvaluationStage(logger=logger),
                       condition_fn=lambda context, data: data.get('detections') is not None)
            .add_stage(ReportWriteStage(logger=logger))
            .build())


def create_gradcheck_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("GradCheck", conditional=True, logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(GradCheckStage(logger=logger))
            .add_stage(OperatorFixtureStage(logger=logger),
                       condition_fn=lambda context, data: bool(data.get('fixtures')))
            .build())


def create_augment_pipeline(logger: Optional[logging.Logger] = None) -> Pipeline:
    return (PipelineBuilder("Augment", logger=logger)
            .add_stage(EffectiveConfigStage(logger=logger))
            .add_stage(DatasetMixStage(logger=logger))
            .build())


def _run(pipeline: Pipeline, command: str, config: RunConfig, **inputs) -> Dict[str, Any]:
    """Execute a command pipeline and attach its outputs and first error to the summary."""
    context = RunContext(command=command, config=config, out_dir=Path(config.out_dir), seed=config.seed)
    inputs = {k: v for k, v in inputs.items() if v is not None}
    summary = pipeline.execute(context, **inputs)
    summary['out_dir'] = str(context.out_dir)
    summary['outputs'] = {r.stage_name: r.data for r in pipeline.results if r.data}

    error = pipeline.first_exception()
    if error is not None:
        summary['error'] = describe_error(error)
        summary['error_key'] = getattr(error, 'key', None)
    elif not summary['overall_success']:
        failed = next(r for r in pipeline.results if not r.success)
        summary['error'] = failed.errors[0] if failed.errors else failed.message
    return summary


def cmd_synth_data(config: RunConfig, n: Optional[int] = None,
                   logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """
    Generate a phantom dataset into config.out_dir.

    Args:
        config: Validated run config (seed and out_dir already overridden)
        n: Sample count (default: phantom.n_samples)

    Returns:
        Pipeline execution summary
    """
    return _run(create_synth_data_pipeline(logger), "synth-data", config, n=n)


def cmd_train_maskgan(config: RunConfig, dataset: Path, resume: Optional[str] = None,
                      max_steps: Optional[int] = None, logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """
    Train the mask GAN on a dataset's train split.

    Args:
        dataset: Dataset directory
        resume: Checkpoint directory or "latest"
        max_steps: Stop after this global step (the run stays resumable)
    """
    return _run(create_train_maskgan_pipeline(logger), "train-maskgan", config,
                dataset=dataset, resume=resume, max_steps=max_steps)


def cmd_sample_masks(config: RunConfig, checkpoint: Path, n: int,
                     logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """Sample n masks from a mask GAN checkpoint with the run seed."""
    return _run(create_sample_masks_pipeline(logger), "sample-masks", config,
                mask_checkpoint=checkpoint, n=n)


def cmd_train_translator(config: RunConfig, dataset: Path, resume: Optional[str] = None,
                         stop_epoch: Optional[int] = None,
                         logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """
    Train the translator on a dataset's train split.

    Args:
        dataset: Dataset directory
        resume: Checkpoint directory or "latest"
        stop_epoch: Stop once this many epochs are complete
    """
    return _run(create_train_translator_pipeline(logger), "train-translator", config,
                dataset=dataset, resume=resume, stop_epoch=stop_epoch)


def cmd_translate(config: RunConfig, checkpoint: Path, masks_dir: Path,
                  logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """Translate every label PNG of masks_dir into images/{id}.png."""
    return _run(create_translate_pipeline(logger), "translate", config,
                translator_checkpoint=checkpoint, masks_dir=masks_dir)


def cmd_compose(config: RunConfig, mask_checkpoint: Path, translator_checkpoint: Path, n: int,
                logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """Sample n masks, translate them and write a synthetic dataset with annotations."""
    return _run(create_compose_pipeline(logger), "compose", config,
                mask_checkpoint=mask_checkpoint, translator_checkpoint=translator_checkpoint, n=n)


def cmd_eval(config: RunConfig, real: Path, synth: Path, detections: Optional[Path] = None,
             logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """
    Write report.json comparing a synthetic directory with a real dataset.

    Args:
        real: Real dataset directory
        synth: Synthetic dataset (or image) directory
        detections: Optional detections JSON scored against real/annotations.json
    """
    return _run(create_eval_pipeline(logger), "eval", config,
                real=real, synth=synth, detections=detections)


def cmd_gradcheck(config: RunConfig, select: str = "all", fixtures: bool = False,
                  logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """Run the gradient checks (and optionally the operator fixtures) with the run seed."""
    return _run(create_gradcheck_pipeline(logger), "gradcheck", config,
                select=select, fixtures=fixtures or None)


def cmd_augment(config: RunConfig, real: Path, synth: Path, n: int,
                logger: Optional[logging.Logger] = None) -> Dict[str, Any]:
    """Merge a real dataset with n synthetic samples into a new manifest."""
    return _run(create_augment_pipeline(logger), "augment", config, real=real, synth=synth, n=n)
