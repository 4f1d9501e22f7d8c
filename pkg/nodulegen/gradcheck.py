"""
Central finite-difference checks of analytic (autograd) gradients.

Smooth operators are checked coordinate by coordinate. Network losses are
checked along random directions in parameter or input space; a direction is
skipped when the perturbation changes the sign pattern of any LeakyReLU
input or any recorded abs() argument, since the loss has a kink there.

All checks run in float64 with step 1e-4. The relative error of a target is
||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12) over the
checked coordinates or directions.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import torch
from torch import Tensor, nn

from .attention import DwmhParams, LiaParams, dwmh_forward, lia_forward, soft_pool
from .config import MaskGanConfig, TranslatorConfig
from .errors import ConfigError
from .maskgan import MappingNetwork, MaskCritic, MaskGenerator, critic_loss, generator_loss_mask, gradient_penalty
from .translator import (FeatureNetwork, PatchCritic, TranslatorGenerator, adversarial_loss_translator,
                         l1_loss, perceptual_loss, total_generator_loss)

logger = logging.getLogger(__name__)

STEP = 1e-4
TOLERANCE = 1e-4
DTYPE = torch.float64

GROUPS = {
    'attention': ('soft_pool', 'lia_forward', 'dwmh_forward'),
    'maskgan': ('gradient_penalty', 'critic_loss', 'generator_loss_mask'),
    'translator': ('l1_loss', 'perceptual_loss', 'adversarial_critic_loss',
                   'adversarial_generator_loss', 'total_generator_loss'),
}


@dataclass
class GradCheckEntry:
    """Outcome for one checked target."""
    name: str
    rel_error: float
    n_checked: int
    n_skipped: int = 0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.rel_error <= self.tolerance

    def to_dict(self) -> Dict[str, object]:
        return {
            'name': self.name,
            'rel_error': self.rel_error,
            'n_checked': self.n_checked,
            'n_skipped': self.n_skipped,
            'tolerance': self.tolerance,
            'passed': self.passed,
        }


@dataclass
class GradCheckReport:
    seed: int
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(e.passed for e in self.entries)

    def to_dict(self) -> Dict[str, object]:
        return {
            'seed': self.seed,
            'step': STEP,
            'passed': self.passed,
            'entries': [e.to_dict() for e in self.entries],
        }


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


class SignRecorder:
    """Records LeakyReLU input signs (via forward hooks) and explicit sign tensors."""

    def __init__(self, modules: Iterable[nn.Module] = ()):
        self.patterns: List[Tensor] = []
        self._handles = []
        for module in modules:
            for sub in module.modules():
                if isinstance(sub, nn.LeakyReLU):
                    self._handles.append(sub.register_forward_hook(self._hook))

    def _hook(self, module, inputs, output):
        self.record(inputs[0])

    def record(self, tensor: Tensor):
        self.patterns.append((tensor.detach() > 0).clone())

    def reset(self) -> List[Tensor]:
        patterns, self.patterns = self.patterns, []
        return patterns

    def close(self):
        for handle in self._handles:
            handle.remove()
        self._handles = []


def _same(a: List[Tensor], b: List[Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def check_coordinates(name: str, fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                      step: float = STEP, tolerance: float = TOLERANCE,
                      max_coordinates: Optional[int] = None,
                      rng: Optional[torch.Generator] = None) -> GradCheckEntry:
    """
    Compare autograd against central differences on every input coordinate
    (or a random subset of max_coordinates per input).

    Args:
        fn: closure over inputs returning a scalar
        inputs: leaf tensors with requires_grad set
    """
    value = fn()
    analytic = torch.autograd.grad(value, list(inputs), allow_unused=True)
    got, expected = [], []
    with torch.no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.view(-1)
            grad = torch.zeros_like(tensor) if grad is None else grad
            count = flat.numel()
            if max_coordinates is not None and count > max_coordinates:
                index = torch.randperm(count, generator=rng)[:max_coordinates].tolist()
            else:
                index = range(count)
            for i in index:
                original = flat[i].item()
                flat[i] = original + step
                plus = float(fn())
                flat[i] = original - step
                minus = float(fn())
                flat[i] = original
                expected.append((plus - minus) / (2 * step))
                got.append(float(grad.view(-1)[i]))
    error = relative_error(torch.tensor(got, dtype=DTYPE), torch.tensor(expected, dtype=DTYPE))
    return GradCheckEntry(name, error, len(got), 0, tolerance)


def check_directions(name: str, fn: Callable[[SignRecorder], Tensor], params: Sequence[Tensor],
                     watched_modules: Iterable[nn.Module] = (), n_directions: int = 8,
                     step: float = STEP, tolerance: float = TOLERANCE,
                     rng: Optional[torch.Generator] = None) -> GradCheckEntry:
    """
    Compare autograd against central differences along random unit directions.

    Args:
        fn: closure returning a scalar; it may record extra kink arguments on the recorder
        params: tensors the derivative is taken with respect to
        watched_modules: modules whose LeakyReLU sign patterns must stay fixed
    """
    params = list(params)
    recorder = SignRecorder(watched_modules)
    try:
        value = fn(recorder)
        base_pattern = recorder.reset()
        grads = torch.autograd.grad(value, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        got, expected, skipped = [], [], 0
        with torch.no_grad():
            for _ in range(n_directions):
                direction = [torch.randn(p.shape, generator=rng, dtype=p.dtype) for p in params]
                norm = torch.sqrt(sum((d ** 2).sum() for d in direction))
                direction = [d / norm for d in direction]

                for p, d in zip(params, direction):
                    p.add_(step * d)
                plus = float(fn(recorder))
                plus_pattern = recorder.reset()
                for p, d in zip(params, direction):
                    p.sub_(2 * step * d)
                minus = float(fn(recorder))
                minus_pattern = recorder.reset()
                for p, d in zip(params, direction):
                    p.add_(step * d)

                if not (_same(base_pattern, plus_pattern) and _same(base_pattern, minus_pattern)):
                    skipped += 1
                    continue
                expected.append((plus - minus) / (2 * step))
                got.append(float(sum((g * d).sum() for g, d in zip(grads, direction))))
    finally:
        recorder.close()
    if not got:
        return GradCheckEntry(name, float('inf'), 0, skipped, tolerance)
    error = relative_error(torch.tensor(got, dtype=DTYPE), torch.tensor(expected, dtype=DTYPE))
    return GradCheckEntry(name, error, len(got), skipped, tolerance)


def _randn(gen: torch.Generator, *shape, scale: float = 1.0) -> Tensor:
    return (torch.randn(*shape, generator=gen, dtype=DTYPE) * scale).requires_grad_(True)


def _projection(gen: torch.Generator, like: Tensor) -> Tensor:
    return torch.randn(like.shape, generator=gen, dtype=DTYPE)


def _check_soft_pool(gen: torch.Generator) -> GradCheckEntry:
    x = _randn(gen, 1, 2, 16, 16)
    with torch.no_grad():
        weights = _projection(gen, soft_pool(x, 7, 3))
    return check_coordinates('soft_pool', lambda: (soft_pool(x, 7, 3) * weights).sum(), [x])


def _check_lia(gen: torch.Generator) -> GradCheckEntry:
    x = _randn(gen, 1, 2, 14, 14)
    tensors = [
        _randn(gen, 1, 2, 1, 1, scale=0.5), _randn(gen, 1, scale=0.1),
        _randn(gen, 1, 1, 3, 3, scale=0.5), _randn(gen, 1, scale=0.1),
        _randn(gen, 1, 1, 3, 3, scale=0.5), _randn(gen, 1, scale=0.1),
    ]
    params = LiaParams(*tensors, 7, 3)
    with torch.no_grad():
        weights = _projection(gen, x)
    return check_coordinates('lia_forward', lambda: (lia_forward(x, params) * weights).sum(), [x, *tensors])


def _check_dwmh(gen: torch.Generator) -> GradCheckEntry:
    channels, heads = 4, 2
    x = _randn(gen, 1, channels, 8, 8)
    tensors = [
        _randn(gen, channels, channels, 1, 1, scale=0.4), _randn(gen, channels, scale=0.1),
        _randn(gen, channels, channels, 1, 1, scale=0.4), _randn(gen, channels, scale=0.1),
        _randn(gen, channels, channels, 1, 1, scale=0.4), _randn(gen, channels, scale=0.1),
    ]
    head_weights = (1.0 + torch.rand(heads, generator=gen, dtype=DTYPE)).requires_grad_(True)
    gamma = torch.full((1,), 0.7, dtype=DTYPE, requires_grad=True)
    params = DwmhParams(*tensors, head_weights, gamma, 4, heads)
    with torch.no_grad():
        weights = _projection(gen, x)
    return check_coordinates('dwmh_forward', lambda: (dwmh_forward(x, params) * weights).sum(),
                             [x, *tensors, head_weights, gamma])


def _small_mask_config() -> MaskGanConfig:
    return MaskGanConfig(latent_dim=8, style_dim=8, mapping_depth=2, target_resolution=8,
                         steps_per_resolution=10, channel_base=64, channel_max=8, batch_size=2)


def _mask_models(gen: torch.Generator):
    cfg = _small_mask_config()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(2 ** 31, (1,), generator=gen)))
        mapping = MappingNetwork(cfg.latent_dim, cfg.style_dim, cfg.mapping_depth).to(DTYPE)
        generator = MaskGenerator(cfg).to(DTYPE)
        critic = MaskCritic(cfg).to(DTYPE)
    real = torch.softmax(torch.randn(2, 6, 8, 8, generator=gen, dtype=DTYPE) * 3, dim=1)
    latents = torch.randn(2, cfg.latent_dim, generator=gen, dtype=DTYPE)
    return cfg, mapping, generator, critic, real, latents


def _check_maskgan(gen: torch.Generator) -> List[GradCheckEntry]:
    cfg, mapping, generator, critic, real, latents = _mask_models(gen)
    alpha = 0.6

    def generate(z):
        return generator(mapping(z), 8, alpha)

    def score(x):
        return critic(x, alpha)

    coefficients = torch.rand(2, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        fake = generate(latents)
    critic_params = list(critic.parameters())
    entries = [check_directions(
        'gradient_penalty',
        lambda recorder: gradient_penalty(score, real, fake, coefficients=coefficients),
        critic_params, [critic], rng=gen)]

    seed = int(torch.randint(2 ** 31, (1,), generator=gen))
    entries.append(check_directions(
        'critic_loss',
        lambda recorder: critic_loss(score, generate, real, latents, cfg,
                                  rng=torch.Generator().manual_seed(seed)),
        critic_params, [critic, mapping, generator], rng=gen))

    entries.append(check_directions(
        'generator_loss_mask',
        lambda recorder: generator_loss_mask(score, generate, latents),
        list(mapping.parameters()) + list(generator.parameters()),
        [critic, mapping, generator], rng=gen))
    return entries


def _check_translator(gen: torch.Generator) -> List[GradCheckEntry]:
    cfg = TranslatorConfig(image_size=8, base_width=4, max_width=8, num_heads=2, window_size=2,
                           critic_width=4, critic_layers=2, feature_channels=(4, 8))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(2 ** 31, (1,), generator=gen)))
        generator = TranslatorGenerator(cfg).to(DTYPE)
        critic = PatchCritic(cfg).to(DTYPE)
    features = FeatureNetwork(cfg.feature_channels, cfg.feature_seed).to(DTYPE)
    labels = torch.randint(6, (1, 8, 8), generator=gen)
    cond = torch.nn.functional.one_hot(labels, 6).permute(0, 3, 1, 2).to(DTYPE)
    y = torch.tanh(torch.randn(1, 1, 8, 8, generator=gen, dtype=DTYPE))
    offset = torch.sign(torch.randn(1, 1, 8, 8, generator=gen, dtype=DTYPE))
    y_hat = (y + offset * (0.1 + 0.2 * torch.rand(1, 1, 8, 8, generator=gen, dtype=DTYPE))).requires_grad_(True)

    entries = [check_coordinates('l1_loss', lambda: l1_loss(y, y_hat), [y_hat])]

    def perceptual(recorder):
        for fa, fb in zip(features(y), features(y_hat)):
            recorder.record(fa - fb)
        return perceptual_loss(y, y_hat, features)

    entries.append(check_directions('perceptual_loss', perceptual, [y_hat], [features], rng=gen))
    entries.append(check_directions(
        'adversarial_critic_loss',
        lambda recorder: adversarial_loss_translator(critic, cond, y, y_hat.detach(), cfg.logit_clamp)[0],
        list(critic.parameters()), [critic], rng=gen))
    entries.append(check_directions(
        'adversarial_generator_loss',
        lambda recorder: adversarial_loss_translator(critic, cond, y, y_hat, cfg.logit_clamp)[1],
        [y_hat], [critic], rng=gen))

    def total(recorder):
        fake = generator(cond)
        recorder.record(y - fake)
        for fa, fb in zip(features(y), features(fake)):
            recorder.record(fa - fb)
        _, adv = adversarial_loss_translator(critic, cond, y, fake, cfg.logit_clamp)
        return total_generator_loss(adv, l1_loss(y, fake), perceptual_loss(y, fake, features),
                                    cfg.lambda_l1, cfg.lambda_perceptual)

    entries.append(check_directions('total_generator_loss', total, list(generator.parameters()),
                                    [generator, critic, features], rng=gen))
    return entries


def selected_targets(selector: str = 'all') -> List[str]:
    """Expand 'all', a group name, or comma-separated target names."""
    if selector == 'all':
        return [name for group in GROUPS.values() for name in group]
    names = []
    for part in selector.split(','):
        part = part.strip()
        if part in GROUPS:
            names.extend(GROUPS[part])
        elif any(part in group for group in GROUPS.values()):
            names.append(part)
        else:
            raise ConfigError(f"Unknown gradient check target: {part}", key="gradcheck.select")
    return names


def run_gradcheck(selector: str = 'all', seed: int = 0) -> GradCheckReport:
    """Run the selected checks; every entry runs on its own seeded generator."""
    wanted = selected_targets(selector)
    report = GradCheckReport(seed=seed)

    def gen_for(group: str) -> torch.Generator:
        return torch.Generator().manual_seed(seed * 1000 + sorted(GROUPS).index(group))

    if any(name in wanted for name in GROUPS['attention']):
        gen = gen_for('attention')
        checks = {'soft_pool': _check_soft_pool, 'lia_forward': _check_lia, 'dwmh_forward': _check_dwmh}
        for name, check in checks.items():
            entry = check(gen)
            if name in wanted:
                report.entries.append(entry)
    for group, runner in (('maskgan', _check_maskgan), ('translator', _check_translator)):
        if any(name in wanted for name in GROUPS[group]):
            report.entries.extend(e for e in runner(gen_for(group)) if e.name in wanted)

    for entry in report.entries:
        level = logging.INFO if entry.passed else logging.WARNING
        logger.log(level, f"{entry.name}: rel error {entry.rel_error:.3e} "
                          f"({entry.n_checked} checked, {entry.n_skipped} skipped)")
    return report
