"""
Stages that create, read, validate and merge paired mask/image datasets.
"""
import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .base import PipelineStage, ValidationStage
from ..config import PipelineConfig
from ..maskcodec import nodule_bboxes, validate_mask
from ..models import PairedSample, ProcessingResult, RunContext
from ..phantomdata import (export_coco, generate_dataset, load_dataset, load_manifest, mix_datasets,
                           validate_coco, write_dataset, write_manifest)


class PhantomGenerationStage(PipelineStage):
    """Draw phantom (mask, image) pairs from the run seed."""

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - n: number of samples (default: phantom.n_samples)
        """
        cfg = context.config.phantom
        n = kwargs.get('n') or cfg.n_samples
        samples = generate_dataset(cfg, n=n, seed=context.seed, prefix=PipelineConfig.REAL_ID_PREFIX)
        nodules = sum(len(s.boxes) for s in samples)
        self.logger.info(f"Generated {len(samples)} phantoms with {nodules} nodules")
        result.data.update({'n_samples': len(samples), 'n_nodules': nodules})
        result.artifacts['samples'] = samples


class DatasetWriteStage(PipelineStage):
    """
    Write samples as a dataset directory under the run output.

    Takes ``samples`` or builds them from ``masks`` / ``images`` / ``sample_ids``.
    """

    def __init__(self, source: str = "phantom", split_ratio: Optional[Tuple[int, int]] = None,
                 split: bool = True, **kwargs):
        super().__init__(**kwargs)
        self.source = source
        self.split_ratio = split_ratio
        self.split = split

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        samples = kwargs.get('samples')
        if samples is None:
            masks = self.require(kwargs, 'masks', result)
            if masks is None:
                return
            images = kwargs.get('images')
            if images is None:
                images = [None] * len(masks)
            ids = kwargs.get('sample_ids') or [
                PipelineConfig.format_sample_id(i, PipelineConfig.SYNTH_ID_PREFIX) for i in range(len(masks))]
            samples = [PairedSample(mask=m, image=img, boxes=nodule_bboxes(m), sample_id=i)
                       for m, img, i in zip(masks, images, ids)]

        ratio = None
        if self.split:
            ratio = self.split_ratio or context.config.phantom.split_ratio
        manifest = write_dataset(
            context.out_dir, samples, seed=context.seed,
            config_hash=context.config.config_hash(), split_ratio=ratio, source=self.source)
        result.data.update({
            'dataset_dir': str(context.out_dir),
            'n_samples': len(manifest.entries),
            'n_train': len(manifest.split('train')),
            'n_test': len(manifest.split('test')),
        })
        result.artifacts['manifest'] = manifest


class DatasetLoadStage(PipelineStage):
    """
    Load a dataset directory named by a pipeline input.

    Args:
        input_key: pipeline input holding the dataset path
        split: optional split tag to keep
        artifact: artifact name for the loaded samples
    """

    def __init__(self, input_key: str = 'dataset', split: Optional[str] = None,
                 artifact: str = 'samples', load_images: bool = True, **kwargs):
        super().__init__(**kwargs)
        self.input_key = input_key
        self.split = split
        self.artifact = artifact
        self.load_images = load_images

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        root = self.require(kwargs, self.input_key, result)
        if root is None:
            return
        manifest, samples = load_dataset(Path(root), self.split, self.load_images)
        if not samples:
            result.add_error(f"Dataset {root} has no samples in split {self.split or 'any'}")
            return
        self.logger.info(f"Loaded {len(samples)} samples from {root}")
        result.data.update({'dataset_dir': str(root), 'n_samples': len(samples)})
        result.artifacts[self.artifact] = samples
        result.artifacts[f'{self.artifact}_manifest'] = manifest


class DatasetValidationStage(ValidationStage):
    """Re-read the written dataset and check masks, boxes, images and COCO schema."""

    def validate(self, context: RunContext, result: ProcessingResult, **kwargs) -> bool:
        root = context.out_dir
        _, samples = load_dataset(root)
        for sample in samples:
            report = validate_mask(sample.mask)
            if not report.valid:
                result.add_error(f"{sample.sample_id}: invalid labels {report.invalid_values}")
            if sample.image is not None and (np.min(sample.image) < -1.0 or np.max(sample.image) > 1.0):
                result.add_error(f"{sample.sample_id}: image outside [-1, 1]")
        with open(root / PipelineConfig.ANNOTATIONS_NAME) as f:
            problems = validate_coco(json.load(f))
        for problem in problems:
            result.add_error(f"annotations: {problem}")
        result.data['n_validated'] = len(samples)
        return result.success


class DatasetMixStage(PipelineStage):
    """
    Merge a real dataset with n synthetic samples into a training manifest.

    The merged manifest and its COCO annotations are written to the run
    output; sample files stay where they are (absolute paths).
    """

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        real_dir = self.require(kwargs, 'real', result)
        synth_dir = self.require(kwargs, 'synth', result)
        if real_dir is None or synth_dir is None:
            return
        n = int(kwargs.get('n') or 0)
        real = load_manifest(Path(real_dir))
        synthetic = load_manifest(Path(synth_dir))
        mixed = mix_datasets(real, synthetic, n, seed=context.seed, root=context.out_dir)
        write_manifest(mixed)
        doc = export_coco(mixed, context.out_dir / PipelineConfig.ANNOTATIONS_NAME)
        for problem in validate_coco(doc):
            result.add_error(f"annotations: {problem}")
        result.data.update({
            'n_real': len(real.entries),
            'n_synthetic': n,
            'n_train': len(mixed.split('train')),
            'n_test': len(mixed.split('test')),
        })
        result.artifacts['manifest'] = mixed
