"""
Stage 1: style-based semantic mask generator trained as a WGAN with
gradient penalty and drift, growing progressively from 4x4.

The generator emits a 6-class softmax score volume; masks are obtained by
argmax decoding (maskcodec.decode_labels).
"""
import copy
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import Checkpoint
from .config import MaskGanConfig, PipelineConfig
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .maskcodec import decode_labels, majority_pool, one_hot_tensor

logger = logging.getLogger(__name__)

NUM_CLASSES = PipelineConfig.NUM_CLASSES
LRELU_SLOPE = 0.2

Critic = Callable[[Tensor], Tensor]


class MappingNetwork(nn.Module):
    """Fully connected z -> w mapping; the last layer has no activation."""

    def __init__(self, latent_dim: int = 512, style_dim: int = 512, depth: int = 4):
        super().__init__()
        self.latent_dim = latent_dim
        layers: List[nn.Module] = []
        in_dim = latent_dim
        for i in range(depth):
            layers.append(nn.Linear(in_dim, style_dim))
            if i < depth - 1:
                layers.append(nn.LeakyReLU(LRELU_SLOPE))
            in_dim = style_dim
        self.net = nn.Sequential(*layers)

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


def map_latent(z: Tensor, mapping: MappingNetwork) -> Tensor:
    """
    Map latent vectors to style codes.

    Raises:
        ShapeError: z's last dimension is not the mapping's latent size
    """
    if z.shape[-1] != mapping.latent_dim:
        raise ShapeError(f"Latent dimension {z.shape[-1]} != {mapping.latent_dim}")
    return mapping(z)


class _SynthesisBlock(nn.Module):
    """conv -> batch norm -> + style bias -> LeakyReLU, optionally upsampling first."""

    def __init__(self, in_channels: int, out_channels: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_channels)
        self.style = nn.Linear(style_dim, out_channels)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode='nearest')
        x = self.norm(self.conv(x)) + self.style(w)[:, :, None, None]
        return self.act(x)


class MaskGenerator(nn.Module):
    """
    Synthesis network: a learned 4x4 constant grown by one block per
    resolution, with a 1x1 class head at every resolution for fade-in.
    """

    def __init__(self, cfg: MaskGanConfig):
        super().__init__()
        self.resolutions = cfg.resolutions
        first = cfg.channels_at(cfg.start_resolution)
        self.const = nn.Parameter(torch.randn(1, first, cfg.start_resolution, cfg.start_resolution))
        blocks, heads = [], []
        in_channels = first
        for i, resolution in enumerate(self.resolutions):
            out_channels = cfg.channels_at(resolution)
            blocks.append(_SynthesisBlock(in_channels, out_channels, cfg.style_dim, upsample=i > 0))
            heads.append(nn.Conv2d(out_channels, NUM_CLASSES, 1))
            in_channels = out_channels
        self.blocks = nn.ModuleList(blocks)
        self.to_class = nn.ModuleList(heads)

    def stage_index(self, resolution: int) -> int:
        if resolution not in self.resolutions:
            raise ConfigError(f"Resolution {resolution} is not in the schedule {self.resolutions}",
                              key="maskgan.target_resolution")
        return self.resolutions.index(resolution)

    def forward(self, w: Tensor, resolution: int, alpha: float = 1.0) -> Tensor:
        """Return an Nx6xRxR softmax score volume."""
        stage = self.stage_index(resolution)
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"Fade-in alpha {alpha} outside [0, 1]", key="alpha")
        x = self.const.expand(w.shape[0], -1, -1, -1)
        previous = x
        for block in self.blocks[:stage + 1]:
            previous = x
            x = block(x, w)
        logits = self.to_class[stage](x)
        if stage > 0 and alpha < 1.0:
            old = F.interpolate(self.to_class[stage - 1](previous), scale_factor=2, mode='nearest')
            logits = alpha * logits + (1.0 - alpha) * old
        return torch.softmax(logits, dim=1)


def synthesize_mask(w: Tensor, generator: MaskGenerator, resolution: int, alpha: float = 1.0) -> Tensor:
    """Score volume for one style code (6xRxR) or a batch (Nx6xRxR)."""
    if w.dim() == 1:
        return generator(w[None], resolution, alpha)[0]
    return generator(w, resolution, alpha)


class MaskCritic(nn.Module):
    """Mirror of the generator: from-class 1x1 convs, conv/LeakyReLU/avg-pool, linear head."""

    def __init__(self, cfg: MaskGanConfig):
        super().__init__()
        self.resolutions = cfg.resolutions
        self.from_class = nn.ModuleList(
            nn.Conv2d(NUM_CLASSES, cfg.channels_at(r), 1) for r in self.resolutions)
        blocks = [nn.Identity()]
        for lower, resolution in zip(self.resolutions, self.resolutions[1:]):
            blocks.append(nn.Sequential(
                nn.Conv2d(cfg.channels_at(resolution), cfg.channels_at(resolution), 3, padding=1),
                nn.LeakyReLU(LRELU_SLOPE),
                nn.Conv2d(cfg.channels_at(resolution), cfg.channels_at(lower), 3, padding=1),
                nn.LeakyReLU(LRELU_SLOPE),
                nn.AvgPool2d(2),
            ))
        self.blocks = nn.ModuleList(blocks)
        first = cfg.channels_at(cfg.start_resolution)
        self.final = nn.Sequential(
            nn.Conv2d(first, first, 3, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Flatten(),
            nn.Linear(first * cfg.start_resolution ** 2, 1),
        )
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, x: Tensor, alpha: float = 1.0) -> Tensor:
        """Score each sample of an Nx6xRxR batch; returns N scores."""
        resolution = x.shape[-1]
        if resolution not in self.resolutions or x.shape[-2] != resolution:
            raise ShapeError(f"Critic cannot score {tuple(x.shape[-2:])} inputs")
        stage = self.resolutions.index(resolution)
        h = self.act(self.from_class[stage](x))
        if stage > 0:
            h = self.blocks[stage](h)
            if alpha < 1.0:
                skip = self.act(self.from_class[stage - 1](F.avg_pool2d(x, 2)))
                h = alpha * h + (1.0 - alpha) * skip
            for block in reversed(self.blocks[1:stage]):
                h = block(h)
        return self.final(h).view(-1)


def gradient_penalty(critic: Critic, x_real: Tensor, x_fake: Tensor,
                     rng: Optional[torch.Generator] = None,
                     coefficients: Optional[Tensor] = None) -> Tensor:
    """
    E[(||grad D(x_hat)||_2 - 1)^2] on per-sample interpolates
    x_hat = e * x_real + (1 - e) * x_fake with e ~ U[0, 1].

    Args:
        critic: callable mapping a batch to N scores
        x_real: real batch
        x_fake: generated batch of the same shape
        rng: generator for the interpolation coefficients
        coefficients: explicit per-sample coefficients (overrides rng)

    Raises:
        ShapeError: batch shapes differ
    """
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"Real batch {tuple(x_real.shape)} != fake batch {tuple(x_fake.shape)}")
    n = x_real.shape[0]
    if coefficients is None:
        coefficients = torch.rand(n, generator=rng, dtype=x_real.dtype)
    eps = coefficients.to(x_real.dtype).view(n, *([1] * (x_real.dim() - 1)))
    x_hat = (eps * x_real.detach() + (1.0 - eps) * x_fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    if scores.requires_grad:
        (grads,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    else:
        grads = None
    if grads is None:
        grads = torch.zeros_like(x_hat)
    norms = grads.reshape(n, -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def _check_finite(value: Tensor, term: str):
    if not torch.isfinite(value).all():
        raise NumericError(f"Non-finite {term}: {value.detach().cpu().tolist()}", term=term)


def critic_loss(critic: Critic, generator: Callable[[Tensor], Tensor], x_real: Tensor,
                latents: Tensor, cfg: MaskGanConfig, rng: Optional[torch.Generator] = None,
                return_terms: bool = False):
    """
    E[D(G(z))] - E[D(x)] + lambda_gp * penalty + lambda_drift * E[D^2].

    The drift expectation runs over both real and generated scores.

    Raises:
        NumericError: a term is NaN or infinite; ``term`` names it
    """
    fake = generator(latents).detach()
    d_real = critic(x_real).reshape(-1)
    d_fake = critic(fake).reshape(-1)
    wasserstein = d_fake.mean() - d_real.mean()
    _check_finite(wasserstein, "wasserstein")
    penalty = gradient_penalty(critic, x_real, fake, rng=rng)
    _check_finite(penalty, "gradient_penalty")
    drift = torch.cat([d_real, d_fake]).pow(2).mean()
    _check_finite(drift, "drift")
    loss = wasserstein + cfg.lambda_gp * penalty + cfg.lambda_drift * drift
    _check_finite(loss, "critic_loss")
    if return_terms:
        return loss, {'wasserstein': float(wasserstein), 'gradient_penalty': float(penalty),
                      'drift': float(drift)}
    return loss


def generator_loss_mask(critic: Critic, generator: Callable[[Tensor], Tensor], latents: Tensor) -> Tensor:
    """-E[D(G(z))]."""
    loss = -critic(generator(latents)).reshape(-1).mean()
    _check_finite(loss, "generator_loss")
    return loss


def progressive_schedule(step: int, cfg: MaskGanConfig) -> Tuple[int, float]:
    """
    Resolution and fade-in alpha at a global step.

    Resolution doubles every steps_per_resolution steps; alpha ramps from 0
    to 1 over the first half of every stage after the first.
    """
    resolutions = cfg.resolutions
    per_stage = cfg.steps_per_resolution
    stage = min(step // per_stage, len(resolutions) - 1)
    if stage == 0:
        return resolutions[0], 1.0
    local = step - stage * per_stage
    return resolutions[stage], min(1.0, local / (per_stage / 2))


class MaskGanTrainer:
    """
    Training state for the mask GAN: mapping, generator, critic, both Adam
    optimizers, the step counter and the sampling rng.
    """

    def __init__(self, cfg: MaskGanConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.mapping = MappingNetwork(cfg.latent_dim, cfg.style_dim, cfg.mapping_depth).to(dtype)
            self.generator = MaskGenerator(cfg).to(dtype)
            self.critic = MaskCritic(cfg).to(dtype)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(
            list(self.mapping.parameters()) + list(self.generator.parameters()), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr, betas=betas)
        self.rng = torch.Generator().manual_seed(seed)
        self.step = 0
        self.history: List[Dict[str, float]] = []
        self._pooled: Dict[int, Tensor] = {}

    @property
    def resolution(self) -> int:
        return progressive_schedule(self.step, self.cfg)[0]

    @property
    def alpha(self) -> float:
        return progressive_schedule(self.step, self.cfg)[1]

    def generate(self, z: Tensor, resolution: int, alpha: float) -> Tensor:
        return self.generator(map_latent(z, self.mapping), resolution, alpha)

    def latents(self, n: int, rng: Optional[torch.Generator] = None) -> Tensor:
        return torch.randn(n, self.cfg.latent_dim, generator=rng or self.rng, dtype=self.dtype)

    def real_batch(self, masks: Sequence[np.ndarray]) -> Tensor:
        """Draw a batch of real masks pooled to the current resolution."""
        resolution = self.resolution
        if resolution not in self._pooled:
            size = masks[0].shape[0]
            if size < resolution or size % resolution:
                raise ShapeError(f"Dataset masks of size {size} cannot be pooled to {resolution}")
            pooled = [majority_pool(m, size // resolution) for m in masks]
            self._pooled[resolution] = one_hot_tensor(pooled, dtype=self.dtype)
        pool = self._pooled[resolution]
        index = torch.randint(len(pool), (self.cfg.batch_size,), generator=self.rng)
        return pool[index]

    def train_step(self, real: Tensor) -> Dict[str, float]:
        """
        One critic update then one generator update.

        Raises:
            ShapeError: the batch does not match the scheduled resolution
            NumericError: a loss is non-finite; the state is rolled back
        """
        resolution, alpha = progressive_schedule(self.step, self.cfg)
        if tuple(real.shape[-2:]) != (resolution, resolution):
            raise ShapeError(f"Batch resolution {tuple(real.shape[-2:])} != scheduled {resolution}")
        real = real.to(self.dtype)
        snapshot = copy.deepcopy(self.state_dict())

        def generate(z):
            return self.generate(z, resolution, alpha)

        def critic(x):
            return self.critic(x, alpha)

        try:
            d_loss, terms = critic_loss(critic, generate, real, self.latents(real.shape[0]),
                                        self.cfg, rng=self.rng, return_terms=True)
            self.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            self.opt_d.step()

            g_loss = generator_loss_mask(critic, generate, self.latents(real.shape[0]))
            self.opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            self.opt_g.step()
        except NumericError:
            self.load_state_dict(snapshot)
            raise

        row = {
            'step': self.step,
            'resolution': resolution,
            'alpha': alpha,
            'critic_loss': float(d_loss),
            'gen_loss': float(g_loss),
            **terms,
        }
        self.history.append(row)
        self.step += 1
        if self.step % self.cfg.log_every == 0:
            logger.info(
                f"step {self.step} res {resolution} alpha {alpha:.3f} "
                f"critic {row['critic_loss']:.4f} gen {row['gen_loss']:.4f}")
        return row

    @torch.no_grad()
    def sample_scores(self, n: int, seed: int, resolution: Optional[int] = None) -> Tensor:
        """Score volumes from a dedicated rng, in eval mode."""
        resolution = resolution or self.cfg.target_resolution
        rng = torch.Generator().manual_seed(seed)
        z = self.latents(n, rng)
        modes = self.mapping.training, self.generator.training
        self.mapping.eval()
        self.generator.eval()
        try:
            return self.generate(z, resolution, 1.0)
        finally:
            self.mapping.train(modes[0])
            self.generator.train(modes[1])

    def sample(self, n: int, seed: int, resolution: Optional[int] = None) -> np.ndarray:
        """Sample n label masks (NxRxR uint8)."""
        return decode_labels(self.sample_scores(n, seed, resolution))

    def state_dict(self) -> Dict[str, object]:
        return {
            'mapping': self.mapping.state_dict(),
            'generator': self.generator.state_dict(),
            'critic': self.critic.state_dict(),
            'opt_g': self.opt_g.state_dict(),
            'opt_d': self.opt_d.state_dict(),
            'rng': self.rng.get_state(),
            'step': self.step,
            'history_len': len(self.history),
        }

    def load_state_dict(self, state: Dict[str, object]):
        self.mapping.load_state_dict(state['mapping'])
        self.generator.load_state_dict(state['generator'])
        self.critic.load_state_dict(state['critic'])
        self.opt_g.load_state_dict(state['opt_g'])
        self.opt_d.load_state_dict(state['opt_d'])
        self.rng.set_state(state['rng'])
        self.step = state['step']
        del self.history[state['history_len']:]

    def save(self, path: Path, meta: Optional[Dict[str, object]] = None) -> Path:
        """Write a checkpoint directory."""
        ckpt = Checkpoint(meta={
            'kind': 'maskgan',
            'step': self.step,
            'resolution': self.resolution,
            'alpha': self.alpha,
            'seed': self.seed,
            'precision': 'float64' if self.dtype == torch.float64 else 'float32',
            'config': _config_dict(self.cfg),
            **(meta or {}),
        })
        ckpt.add_module('mapping', self.mapping)
        ckpt.add_module('generator', self.generator)
        ckpt.add_module('critic', self.critic)
        ckpt.add_optimizer('opt_g', self.opt_g)
        ckpt.add_optimizer('opt_d', self.opt_d)
        ckpt.add_generator('rng', self.rng)
        return ckpt.save(path)

    @classmethod
    def load(cls, path: Path) -> 'MaskGanTrainer':
        """
        Rebuild a trainer from a checkpoint directory.

        Raises:
            FormatError: the checkpoint is corrupt or not a mask GAN checkpoint
        """
        ckpt = Checkpoint.load(path)
        if ckpt.meta.get('kind') != 'maskgan':
            raise FormatError(f"{path} is not a mask GAN checkpoint")
        try:
            cfg = MaskGanConfig(**{k: tuple(v) if isinstance(v, list) else v
                                   for k, v in ckpt.meta['config'].items()})
        except (KeyError, TypeError) as e:
            raise FormatError(f"Checkpoint {path} has an unusable config: {e}")
        dtype = torch.float64 if ckpt.meta.get('precision') == 'float64' else torch.float32
        trainer = cls(cfg, seed=ckpt.meta.get('seed', 0), dtype=dtype)
        ckpt.restore_module('mapping', trainer.mapping)
        ckpt.restore_module('generator', trainer.generator)
        ckpt.restore_module('critic', trainer.critic)
        ckpt.restore_optimizer('opt_g', trainer.opt_g)
        ckpt.restore_optimizer('opt_d', trainer.opt_d)
        ckpt.restore_generator('rng', trainer.rng)
        trainer.step = int(ckpt.meta['step'])
        return trainer


def _config_dict(cfg) -> Dict[str, object]:
    return asdict(cfg)


def latent_norms(mapping: MappingNetwork, n: int, seed: int = 0) -> np.ndarray:
    """Norms of mapped codes for n standard-normal latents."""
    rng = torch.Generator().manual_seed(seed)
    dtype = next(mapping.parameters()).dtype
    with torch.no_grad():
        w = map_latent(torch.randn(n, mapping.latent_dim, generator=rng, dtype=dtype), mapping)
    return w.norm(dim=1).cpu().numpy()


__all__ = [
    'MappingNetwork', 'MaskGenerator', 'MaskCritic', 'MaskGanTrainer',
    'map_latent', 'synthesize_mask', 'gradient_penalty', 'critic_loss',
    'generator_loss_mask', 'progressive_schedule', 'latent_norms',
]
