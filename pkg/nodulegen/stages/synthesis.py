"""
Stages that run trained models: mask sampling and mask-to-image translation.
"""
from pathlib import Path

import numpy as np

from .base import PipelineStage
from ..config import PipelineConfig
from ..errors import ConfigError, EmptyInput
from ..maskcodec import load_mask_png, save_mask_png, save_palette_png, tile_masks, validate_mask
from ..maskgan import MaskGanTrainer
from ..models import ProcessingResult, RunContext
from ..phantomdata import save_image_png
from ..translator import TranslatorTrainer

TRANSLATE_BATCH = 16


class MaskSamplingStage(PipelineStage):
    """
    Sample label masks from a mask GAN checkpoint.

    Args:
        write: also write masks/{id}.png and a palette sheet under the run output
    """

    def __init__(self, write: bool = True, **kwargs):
        super().__init__(**kwargs)
        self.write = write

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - mask_checkpoint: checkpoint directory
                - n: number of masks
        """
        path = self.require(kwargs, 'mask_checkpoint', result)
        n = self.require(kwargs, 'n', result)
        if path is None or n is None:
            return
        trainer = MaskGanTrainer.load(Path(path))
        masks = trainer.sample(int(n), context.seed)
        ids = [PipelineConfig.format_sample_id(i, PipelineConfig.SYNTH_ID_PREFIX) for i in range(len(masks))]

        invalid = [i for i, m in zip(ids, masks) if not validate_mask(m).valid]
        for sample_id in invalid:
            result.add_error(f"Sampled mask {sample_id} failed validation")

        if self.write:
            for sample_id, mask in zip(ids, masks):
                save_mask_png(mask, PipelineConfig.get_mask_path(context.out_dir, sample_id))
            if len(masks):
                save_palette_png(tile_masks(list(masks[:16]), columns=4),
                                 context.out_dir / PipelineConfig.SAMPLE_DIR / "masks.png")

        with_nodule = sum(1 for m in masks if (m == PipelineConfig.NODULE_LABEL).any())
        self.logger.info(f"Sampled {len(masks)} masks at {trainer.cfg.target_resolution}px, "
                         f"{with_nodule} with nodules")
        result.data.update({
            'n_masks': len(masks),
            'resolution': trainer.cfg.target_resolution,
            'with_nodule': with_nodule,
        })
        result.artifacts['masks'] = list(masks)
        result.artifacts['sample_ids'] = ids


class TranslationStage(PipelineStage):
    """
    Translate label masks into images with a translator checkpoint.

    Masks come from the ``masks`` artifact or from ``masks_dir`` (every
    *.png, id = file stem).

    Args:
        write: also write images/{id}.png under the run output
    """

    def __init__(self, write: bool = True, **kwargs):
        super().__init__(**kwargs)
        self.write = write

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - translator_checkpoint: checkpoint directory
                - masks / sample_ids: in-memory masks, or
                - masks_dir: directory of label PNGs
        """
        path = self.require(kwargs, 'translator_checkpoint', result)
        if path is None:
            return
        masks, ids = kwargs.get('masks'), kwargs.get('sample_ids')
        if masks is None:
            masks_dir = self.require(kwargs, 'masks_dir', result)
            if masks_dir is None:
                return
            masks, ids = self._read_masks(Path(masks_dir))
        if len(masks) == 0:
            raise EmptyInput("No masks to translate")

        trainer = TranslatorTrainer.load(Path(path))
        size = trainer.cfg.image_size
        for mask in masks:
            if mask.shape != (size, size):
                raise ConfigError(
                    f"Mask size {mask.shape[0]}x{mask.shape[1]} does not match translator image size {size}",
                    key="translator.image_size")

        trainer.generator.eval()
        images = []
        for start in range(0, len(masks), TRANSLATE_BATCH):
            batch = trainer.translate(masks[start:start + TRANSLATE_BATCH])
            images.extend(np.asarray(img, dtype=np.float32) for img in batch)

        if self.write:
            for sample_id, image in zip(ids, images):
                save_image_png(image, PipelineConfig.get_image_path(context.out_dir, sample_id))

        self.logger.info(f"Translated {len(images)} masks")
        result.data['n_images'] = len(images)
        result.artifacts['images'] = images
        result.artifacts['masks'] = list(masks)
        result.artifacts['sample_ids'] = list(ids)

    def _read_masks(self, directory: Path):
        candidates = sorted(directory.glob("*.png"))
        if not candidates and (directory / PipelineConfig.MASK_DIR).is_dir():
            candidates = sorted((directory / PipelineConfig.MASK_DIR).glob("*.png"))
        return [load_mask_png(p) for p in candidates], [p.stem for p in candidates]
