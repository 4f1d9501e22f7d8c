"""
Stage 2: mask-to-image translation.

TranslatorGenerator is a UNet whose skip connections pass through local
importance attention and whose bottleneck carries windowed multi-head
attention. It is trained against a conditional patch critic with the
weighted sum of adversarial, L1 and perceptual losses.
"""
import copy
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import DynamicWeightedWindowAttention, LocalImportanceAttention
from .checkpoint import Checkpoint
from .config import PipelineConfig, TranslatorConfig
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .maskcodec import one_hot_tensor

logger = logging.getLogger(__name__)

NUM_CLASSES = PipelineConfig.NUM_CLASSES
LRELU_SLOPE = 0.2


class _InstanceNorm(nn.InstanceNorm2d):
    """InstanceNorm2d that passes 1x1 maps through; they have no spatial statistics."""

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2] * x.shape[-1] == 1:
            return x
        return super().forward(x)


def _conv_block(in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                padding: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=padding),
        _InstanceNorm(out_channels, affine=True),
        nn.LeakyReLU(LRELU_SLOPE),
    )


def _up_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1),
        nn.InstanceNorm2d(out_channels, affine=True),
        nn.LeakyReLU(LRELU_SLOPE),
    )


class TranslatorGenerator(nn.Module):
    """
    Attention-augmented UNet, one-hot mask in, 1-channel tanh image out.

    Encoder level 0 works at full resolution; each further level halves it.
    Skip i feeds decoder level i through its own LIA module; skips too small
    for the heatmap branch (2x2 and below with the default kernel) pass ungated.
    """

    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        cfg.validate()
        self.depth = cfg.unet_depth
        widths = [cfg.width_at(level) for level in range(self.depth + 1)]
        self.encoder = nn.ModuleList([_conv_block(NUM_CLASSES, widths[0])])
        for level in range(1, self.depth + 1):
            self.encoder.append(_conv_block(widths[level - 1], widths[level], kernel=4, stride=2))
        self.skip_attention = nn.ModuleList(
            LocalImportanceAttention(widths[level], cfg.softpool_kernel, cfg.softpool_stride)
            for level in range(self.depth))
        self.bottleneck = DynamicWeightedWindowAttention(widths[self.depth], cfg.num_heads, cfg.window_size)
        self.up = nn.ModuleList(_up_block(widths[level + 1], widths[level]) for level in range(self.depth))
        self.fuse = nn.ModuleList(_conv_block(2 * widths[level], widths[level]) for level in range(self.depth))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, cond: Tensor, use_attention: bool = True) -> Tensor:
        """
        Translate an Nx6xHxW one-hot batch.

        Args:
            cond: one-hot masks; H and W powers of two >= 2^depth
            use_attention: False runs the plain UNet on the same weights

        Raises:
            ShapeError: spatial size does not fit the UNet
        """
        h, w = cond.shape[-2:]
        for size in (h, w):
            if size < 2 ** self.depth or size & (size - 1):
                raise ShapeError(f"Input {h}x{w} is not a power of two >= {2 ** self.depth}")
        skips = []
        x = cond
        for level, block in enumerate(self.encoder):
            x = block(x)
            if level < self.depth:
                skips.append(x)
        if use_attention:
            x = self.bottleneck(x)
        for level in reversed(range(self.depth)):
            x = self.up[level](x)
            skip = skips[level]
            gate = self.skip_attention[level]
            if use_attention and gate.fits(skip):
                skip = gate(skip)
            x = self.fuse[level](torch.cat([x, skip], dim=1))
        return torch.tanh(self.head(x))


def generator_forward(cond: Tensor, generator: TranslatorGenerator) -> Tensor:
    """Image for one 6xHxW condition (1xHxW) or a batch (Nx1xHxW)."""
    if cond.dim() == 3:
        return generator(cond[None])[0]
    return generator(cond)


class PatchCritic(nn.Module):
    """Conditional patch critic on concat(one-hot mask, image); returns a logit grid."""

    def __init__(self, cfg: TranslatorConfig):
        super().__init__()
        width = cfg.critic_width
        # keep the last normalized grid at least 4x4
        layers = max(1, min(cfg.critic_layers, int(math.log2(cfg.image_size)) - 2))
        modules: List[nn.Module] = [
            nn.Conv2d(NUM_CLASSES + 1, width, 4, stride=2, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
        ]
        channels = width
        for i in range(1, layers):
            out_channels = min(width * 2 ** i, width * 8)
            modules += [
                nn.Conv2d(channels, out_channels, 4, stride=2, padding=1),
                nn.InstanceNorm2d(out_channels, affine=True),
                nn.LeakyReLU(LRELU_SLOPE),
            ]
            channels = out_channels
        modules.append(nn.Conv2d(channels, 1, 3, padding=1))
        self.net = nn.Sequential(*modules)

    def forward(self, cond: Tensor, image: Tensor) -> Tensor:
        return self.net(torch.cat([cond, image], dim=1))


class FeatureNetwork(nn.Module):
    """
    Fixed feature extractor for the perceptual loss and the FID embedder.

    By default: seeded 3x3 conv + LeakyReLU + 2x average-pool stages whose
    weights never train. Any list of modules can be passed as stages.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 32), seed: int = 1234,
                 stages: Optional[Sequence[nn.Module]] = None, in_channels: int = 1):
        super().__init__()
        if stages is None:
            built = []
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                previous = in_channels
                for c in channels:
                    built.append(nn.Sequential(
                        nn.Conv2d(previous, c, 3, padding=1),
                        nn.LeakyReLU(LRELU_SLOPE),
                        nn.AvgPool2d(2),
                    ))
                    previous = c
            stages = built
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def out_channels(self) -> Optional[int]:
        for module in reversed(list(self.stages[-1].modules())):
            if isinstance(module, nn.Conv2d):
                return module.out_channels
        return None

    def forward(self, x: Tensor) -> List[Tensor]:
        if len(self.stages) == 0:
            raise ConfigError("Feature network has no stages", key="translator.feature_channels")
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


def _check_shapes(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"Shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Mean absolute difference."""
    _check_shapes(y, y_hat)
    return (y - y_hat).abs().mean()


def perceptual_loss(y: Tensor, y_hat: Tensor, features: FeatureNetwork) -> Tensor:
    """Sum over feature stages of the mean absolute feature difference."""
    _check_shapes(y, y_hat)
    if len(features.stages) == 0:
        raise ConfigError("Feature network has no stages", key="translator.feature_channels")
    total = None
    for fa, fb in zip(features(y), features(y_hat)):
        term = (fa - fb).abs().mean()
        total = term if total is None else total + term
    return total


def adversarial_loss_translator(critic: nn.Module, cond: Tensor, y_real: Tensor, y_fake: Tensor,
                                logit_clamp: float = 15.0) -> Tuple[Tensor, Tensor]:
    """
    Conditional BCE patch losses.

    Returns:
        (critic_loss, gen_adv_loss); the critic term sees a detached fake,
        logits are clamped to +/- logit_clamp

    Raises:
        NumericError: a loss is NaN
    """
    _check_shapes(y_real, y_fake)

    def logits(image):
        return critic(cond, image).clamp(-logit_clamp, logit_clamp)

    real_logits = logits(y_real)
    fake_logits = logits(y_fake.detach())
    d_loss = (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
              + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
    gen_logits = logits(y_fake)
    g_loss = F.binary_cross_entropy_with_logits(gen_logits, torch.ones_like(gen_logits))
    for name, value in (("critic_loss", d_loss), ("gen_adv_loss", g_loss)):
        if torch.isnan(value).any():
            raise NumericError(f"NaN in {name}", term=name)
    return d_loss, g_loss


def total_generator_loss(adversarial, l1, perceptual, lambda_l1: float = 200.0,
                         lambda_perceptual: float = 10.0):
    """
    adversarial + lambda_l1 * l1 + lambda_perceptual * perceptual.

    Parts may be floats or scalar tensors.

    Raises:
        NumericError: a part is NaN or infinite; ``term`` names it
    """
    for name, value in (("adversarial", adversarial), ("l1", l1), ("perceptual", perceptual)):
        if not math.isfinite(float(value)):
            raise NumericError(f"Non-finite {name} loss part: {float(value)}", term=name)
    return adversarial + lambda_l1 * l1 + lambda_perceptual * perceptual


def lr_schedule_translator(epoch: int, cfg: TranslatorConfig) -> float:
    """Constant lr before decay_start, then linear to zero at the final epoch."""
    if epoch < cfg.decay_start:
        return cfg.lr
    span = cfg.epochs - cfg.decay_start
    if span <= 0:
        return 0.0
    return max(0.0, cfg.lr * (1.0 - (epoch - cfg.decay_start) / span))


class TranslatorTrainer:
    """Generator, critic, feature network, optimizers and epoch/step bookkeeping."""

    def __init__(self, cfg: TranslatorConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.generator = TranslatorGenerator(cfg).to(dtype)
            self.critic = PatchCritic(cfg).to(dtype)
        self.features = FeatureNetwork(cfg.feature_channels, cfg.feature_seed).to(dtype)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr, betas=betas)
        self.rng = torch.Generator().manual_seed(seed)
        self.epoch = 0
        self.step = 0
        self.history: List[Dict[str, float]] = []

    @property
    def lr(self) -> float:
        return self.opt_g.param_groups[0]['lr']

    def set_epoch(self, epoch: int):
        """Enter an epoch and apply its scheduled learning rate."""
        self.epoch = epoch
        lr = lr_schedule_translator(epoch, self.cfg)
        for optimizer in (self.opt_g, self.opt_d):
            for group in optimizer.param_groups:
                group['lr'] = lr

    def train_step(self, cond: Tensor, image: Tensor) -> Dict[str, float]:
        """
        One critic update then one generator update.

        Raises:
            NumericError: a loss is non-finite; the state is rolled back
        """
        cond = cond.to(self.dtype)
        image = image.to(self.dtype)
        snapshot = copy.deepcopy(self.state_dict())
        try:
            fake = self.generator(cond)
            d_loss, _ = adversarial_loss_translator(self.critic, cond, image, fake, self.cfg.logit_clamp)
            if not torch.isfinite(d_loss):
                raise NumericError(f"Non-finite critic loss {float(d_loss)}", term="critic_loss")
            self.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            self.opt_d.step()

            _, adv = adversarial_loss_translator(self.critic, cond, image, fake, self.cfg.logit_clamp)
            l1 = l1_loss(image, fake)
            perc = perceptual_loss(image, fake, self.features)
            total = total_generator_loss(adv, l1, perc, self.cfg.lambda_l1, self.cfg.lambda_perceptual)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
        except NumericError:
            self.load_state_dict(snapshot)
            raise

        row = {
            'epoch': self.epoch,
            'step': self.step,
            'lr': self.lr,
            'L_GAN': float(adv),
            'L_L1': float(l1),
            'L_Perc': float(perc),
            'total': float(total),
            'critic_loss': float(d_loss),
        }
        self.history.append(row)
        self.step += 1
        if self.step % self.cfg.log_every == 0:
            logger.info(
                f"epoch {self.epoch} step {self.step} total {row['total']:.4f} "
                f"L1 {row['L_L1']:.4f} critic {row['critic_loss']:.4f}")
        return row

    def epoch_order(self, n: int) -> List[int]:
        return torch.randperm(n, generator=self.rng).tolist()

    def run_epoch(self, conds: Tensor, images: Tensor, max_steps: Optional[int] = None) -> bool:
        """
        Train one epoch over paired tensors.

        Returns:
            False once max_steps is reached
        """
        self.set_epoch(self.epoch)
        order = self.epoch_order(len(conds))
        batch = self.cfg.batch_size
        for start in range(0, len(order), batch):
            if max_steps is not None and self.step >= max_steps:
                return False
            index = order[start:start + batch]
            self.train_step(conds[index], images[index])
        self.epoch += 1
        return max_steps is None or self.step < max_steps

    @torch.no_grad()
    def translate(self, masks: Sequence[np.ndarray]) -> np.ndarray:
        """Images (Nx1xHxW, values in [-1, 1]) for label masks."""
        cond = one_hot_tensor(masks, dtype=self.dtype)
        return self.generator(cond).cpu().numpy()

    @torch.no_grad()
    def evaluate_l1(self, conds: Tensor, images: Tensor) -> float:
        """Mean L1 between translated conditions and their targets."""
        total = 0.0
        for i in range(len(conds)):
            fake = self.generator(conds[i:i + 1].to(self.dtype))
            total += float(l1_loss(images[i:i + 1].to(self.dtype), fake))
        return total / max(len(conds), 1)

    def state_dict(self) -> Dict[str, object]:
        return {
            'generator': self.generator.state_dict(),
            'critic': self.critic.state_dict(),
            'opt_g': self.opt_g.state_dict(),
            'opt_d': self.opt_d.state_dict(),
            'rng': self.rng.get_state(),
            'epoch': self.epoch,
            'step': self.step,
            'history_len': len(self.history),
        }

    def load_state_dict(self, state: Dict[str, object]):
        self.generator.load_state_dict(state['generator'])
        self.critic.load_state_dict(state['critic'])
        self.opt_g.load_state_dict(state['opt_g'])
        self.opt_d.load_state_dict(state['opt_d'])
        self.rng.set_state(state['rng'])
        self.epoch = state['epoch']
        self.step = state['step']
        del self.history[state['history_len']:]

    def save(self, path: Path, meta: Optional[Dict[str, object]] = None) -> Path:
        ckpt = Checkpoint(meta={
            'kind': 'translator',
            'epoch': self.epoch,
            'step': self.step,
            'seed': self.seed,
            'precision': 'float64' if self.dtype == torch.float64 else 'float32',
            'config': asdict(self.cfg),
            **(meta or {}),
        })
        ckpt.add_module('generator', self.generator)
        ckpt.add_module('critic', self.critic)
        ckpt.add_optimizer('opt_g', self.opt_g)
        ckpt.add_optimizer('opt_d', self.opt_d)
        ckpt.add_generator('rng', self.rng)
        return ckpt.save(path)

    @classmethod
    def load(cls, path: Path) -> 'TranslatorTrainer':
        """
        Rebuild a trainer from a checkpoint directory.

        Raises:
            FormatError: the checkpoint is corrupt or not a translator checkpoint
        """
        ckpt = Checkpoint.load(path)
        if ckpt.meta.get('kind') != 'translator':
            raise FormatError(f"{path} is not a translator checkpoint")
        try:
            cfg = TranslatorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in ckpt.meta['config'].items()})
        except (KeyError, TypeError) as e:
            raise FormatError(f"Checkpoint {path} has an unusable config: {e}")
        dtype = torch.float64 if ckpt.meta.get('precision') == 'float64' else torch.float32
        trainer = cls(cfg, seed=ckpt.meta.get('seed', 0), dtype=dtype)
        ckpt.restore_module('generator', trainer.generator)
        ckpt.restore_module('critic', trainer.critic)
        ckpt.restore_optimizer('opt_g', trainer.opt_g)
        ckpt.restore_optimizer('opt_d', trainer.opt_d)
        ckpt.restore_generator('rng', trainer.rng)
        trainer.epoch = int(ckpt.meta['epoch'])
        trainer.step = int(ckpt.meta['step'])
        return trainer
