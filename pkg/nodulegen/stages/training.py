"""
Training stages for the mask GAN and the mask-to-image translator.

Both write a CSV loss log (one row per step) and checkpoint directories
under {out}/checkpoints. A run resumes from a checkpoint given as
``resume`` (a path, or "latest" for the newest one in the run output);
the loss log is truncated back to the resumed step first, so a resumed run
leaves the same files as an uninterrupted one.
"""
import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .base import PipelineStage
from ..checkpoint import latest_checkpoint
from ..config import PipelineConfig
from ..errors import ConfigError, IoError, NumericError
from ..maskcodec import one_hot_tensor, save_palette_png, tile_masks
from ..maskgan import MaskGanTrainer
from ..models import ProcessingResult, RunContext
from ..translator import TranslatorTrainer

MASKGAN_COLUMNS = ('step', 'resolution', 'alpha', 'critic_loss', 'gen_loss')
TRANSLATOR_COLUMNS = ('epoch', 'step', 'lr', 'L_GAN', 'L_L1', 'L_Perc', 'total', 'critic_loss')


class LossLog:
    """
    Append-only CSV loss log.

    The first line is a ``# loss_log_version=N`` comment, the second the
    header; values are written with repr() so reruns compare byte for byte.
    """

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = tuple(columns)

    def open(self, resume_step: int = 0):
        """Start a fresh log, or keep only the rows before resume_step."""
        kept: List[List[str]] = []
        if resume_step > 0 and self.path.exists():
            for row in self.read():
                if int(row['step']) < resume_step:
                    kept.append([row[c] for c in self.columns])
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'w', newline='') as f:
            f.write(f"# loss_log_version={PipelineConfig.LOSS_LOG_VERSION}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            writer.writerows(kept)

    def append(self, rows: Sequence[Dict[str, float]]):
        if not rows:
            return
        with open(self.path, 'a', newline='') as f:
            writer = csv.writer(f, lineterminator="\n")
            for row in rows:
                writer.writerow([repr(row[c]) for c in self.columns])

    def read(self) -> List[Dict[str, str]]:
        try:
            with open(self.path, newline='') as f:
                lines = [line for line in f if not line.startswith('#')]
        except OSError as e:
            raise IoError(f"Cannot read loss log {self.path}: {e}", path=self.path) from e
        return list(csv.DictReader(lines))


def _resume_path(resume, out_dir: Path, name: str) -> Optional[Path]:
    if resume in (None, False, ""):
        return None
    if resume == "latest":
        return latest_checkpoint(out_dir, name)
    return Path(resume)


class MaskGanTrainingStage(PipelineStage):
    """
    Progressive mask GAN training on the dataset masks.

    Checkpoints every maskgan.checkpoint_every steps and at the end of each
    resolution stage; writes a palette sample sheet per finished stage.
    """

    SAMPLE_SHEET_SIZE = 16

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - samples: training samples (masks are used)
                - resume: checkpoint path or "latest"
                - max_steps: stop early after this many global steps
        """
        samples = self.require(kwargs, 'samples', result)
        if samples is None:
            return
        cfg = context.config.maskgan
        out_dir = context.out_dir
        masks = [s.mask for s in samples]

        resume = _resume_path(kwargs.get('resume'), out_dir, 'maskgan')
        if resume is not None:
            trainer = MaskGanTrainer.load(resume)
            self.logger.info(f"Resumed mask GAN at step {trainer.step} from {resume}")
        else:
            trainer = MaskGanTrainer(cfg, seed=context.seed, dtype=context.config.torch_dtype)

        log = LossLog(out_dir / PipelineConfig.MASKGAN_LOG_NAME, MASKGAN_COLUMNS)
        log.open(trainer.step)
        total = trainer.cfg.total_steps
        stop = min(total, int(kwargs.get('max_steps') or total))
        meta = {'config_hash': context.config.config_hash()}
        last_checkpoint = resume

        self.logger.info(f"Training mask GAN for {stop - trainer.step} steps "
                         f"(schedule {trainer.cfg.resolutions}, {total} steps)")
        while trainer.step < stop:
            try:
                row = trainer.train_step(trainer.real_batch(masks))
            except NumericError as e:
                result.add_error(f"Non-finite {e.term} at step {trainer.step}; "
                                 f"last good checkpoint: {last_checkpoint}")
                result.artifacts['exception'] = e
                break
            log.append([row])

            step = trainer.step
            stage_end = step % trainer.cfg.steps_per_resolution == 0
            if stage_end or step % trainer.cfg.checkpoint_every == 0 or step == stop:
                last_checkpoint = trainer.save(
                    PipelineConfig.get_checkpoint_path(out_dir, 'maskgan', step), meta)
                self.logger.info(f"Checkpoint {last_checkpoint}")
            if stage_end:
                self._sample_sheet(trainer, row['resolution'], out_dir, context.seed)

        result.data.update({
            'steps': trainer.step,
            'total_steps': total,
            'resolution': trainer.resolution,
            'final_checkpoint': str(last_checkpoint) if last_checkpoint else None,
            'loss_log': str(log.path),
        })
        result.artifacts['maskgan_trainer'] = trainer
        if last_checkpoint is not None:
            result.artifacts['mask_checkpoint'] = Path(last_checkpoint)

    def _sample_sheet(self, trainer: MaskGanTrainer, resolution: int, out_dir: Path, seed: int):
        masks = trainer.sample(self.SAMPLE_SHEET_SIZE, seed, resolution)
        path = out_dir / PipelineConfig.SAMPLE_DIR / f"maskgan_{resolution:03d}.png"
        save_palette_png(tile_masks(list(masks), columns=4), path)
        self.logger.debug(f"Sample sheet {path}")


def paired_tensors(samples, dtype=torch.float32):
    """One-hot conditions and Nx1xHxW image targets of a sample list."""
    conds = one_hot_tensor([s.mask for s in samples], dtype=dtype)
    images = torch.from_numpy(np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])).to(dtype)
    return conds, images


class TranslatorTrainingStage(PipelineStage):
    """
    Translator training on paired samples with the epoch lr schedule.

    Checkpoints at the end of each epoch (named by global step) and when
    translator.max_steps stops training.
    """

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - samples: paired training samples
                - resume: checkpoint path or "latest"
                - stop_epoch: stop after this many epochs
        """
        samples = self.require(kwargs, 'samples', result)
        if samples is None:
            return
        missing = [s.sample_id for s in samples if s.image is None]
        if missing:
            result.add_error(f"Samples without images: {', '.join(missing[:5])}")
            return
        out_dir = context.out_dir

        resume = _resume_path(kwargs.get('resume'), out_dir, 'translator')
        if resume is not None:
            trainer = TranslatorTrainer.load(resume)
            self.logger.info(f"Resumed translator at epoch {trainer.epoch}, step {trainer.step}")
        else:
            trainer = TranslatorTrainer(context.config.translator, seed=context.seed,
                                        dtype=context.config.torch_dtype)
        cfg = trainer.cfg
        size = samples[0].mask.shape[0]
        if size != cfg.image_size:
            raise ConfigError(f"Dataset images are {size}px but translator.image_size is {cfg.image_size}",
                              key="translator.image_size")

        conds, images = paired_tensors(samples, trainer.dtype)
        log = LossLog(out_dir / PipelineConfig.TRANSLATOR_LOG_NAME, TRANSLATOR_COLUMNS)
        log.open(trainer.step)
        meta = {'config_hash': context.config.config_hash()}
        initial_l1 = trainer.evaluate_l1(conds, images)
        last_checkpoint = resume

        self.logger.info(f"Training translator on {len(samples)} pairs, epochs {trainer.epoch}..{cfg.epochs}")
        while trainer.epoch < cfg.epochs:
            seen = len(trainer.history)
            try:
                keep_going = trainer.run_epoch(conds, images, cfg.max_steps)
            except NumericError as e:
                log.append(trainer.history[seen:])
                result.add_error(f"Non-finite {e.term} at step {trainer.step}; "
                                 f"last good checkpoint: {last_checkpoint}")
                result.artifacts['exception'] = e
                break
            log.append(trainer.history[seen:])
            last_checkpoint = trainer.save(
                PipelineConfig.get_checkpoint_path(out_dir, 'translator', trainer.step), meta)
            self.logger.info(f"Epoch {trainer.epoch} done, checkpoint {last_checkpoint}")
            if not keep_going or trainer.epoch >= int(kwargs.get('stop_epoch') or cfg.epochs):
                break

        final_l1 = trainer.evaluate_l1(conds, images)
        self.logger.info(f"Train L1 {initial_l1:.4f} -> {final_l1:.4f}")
        result.data.update({
            'epochs': trainer.epoch,
            'steps': trainer.step,
            'initial_l1': initial_l1,
            'final_l1': final_l1,
            'final_checkpoint': str(last_checkpoint) if last_checkpoint else None,
            'loss_log': str(log.path),
        })
        result.artifacts['translator_trainer'] = trainer
        if last_checkpoint is not None:
            result.artifacts['translator_checkpoint'] = Path(last_checkpoint)
