"""Shared fixtures: small configurations that keep CPU runs in seconds."""
import logging

import numpy as np
import pytest
import torch

from nodulegen.config import MaskGanConfig, PhantomConfig, RunConfig, TranslatorConfig


@pytest.fixture(autouse=True)
def _quiet_library_logs():
    logging.getLogger("nodulegen").setLevel(logging.WARNING)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def phantom_cfg():
    return PhantomConfig(image_size=32, n_samples=12, diameter_range=(2, 3))


@pytest.fixture
def maskgan_cfg():
    return MaskGanConfig(
        latent_dim=16, style_dim=16, mapping_depth=2,
        start_resolution=4, target_resolution=16, steps_per_resolution=4,
        channel_base=64, channel_max=16, batch_size=4,
        log_every=1000, checkpoint_every=1000,
    )


@pytest.fixture
def translator_cfg():
    return TranslatorConfig(
        image_size=16, base_width=8, max_width=16, num_heads=2, window_size=2,
        critic_width=8, critic_layers=2, feature_channels=(4, 8),
        epochs=2, decay_start=1, batch_size=2, log_every=1000,
    )


def small_run_config(out_dir, seed=1, **sections) -> RunConfig:
    """A RunConfig sized for tests: 32px phantoms, 4->8->32 mask GAN, 32px translator."""
    data = {
        'run': {'seed': seed, 'out_dir': str(out_dir)},
        'phantom': {'image_size': 32, 'n_samples': 10, 'diameter_range': [2, 3]},
        'maskgan': {
            'latent_dim': 16, 'style_dim': 16, 'mapping_depth': 2,
            'target_resolution': 32, 'steps_per_resolution': 2,
            'channel_base': 64, 'channel_max': 16, 'batch_size': 4,
            'checkpoint_every': 1000, 'log_every': 1000,
        },
        'translator': {
            'image_size': 32, 'base_width': 8, 'max_width': 16, 'num_heads': 2,
            'window_size': 2, 'critic_width': 8, 'critic_layers': 2,
            'feature_channels': [4, 8], 'epochs': 2, 'decay_start': 1,
            'batch_size': 4, 'log_every': 1000,
        },
        'metrics': {'ssim_window': 7, 'masked_margin': 4, 'embed_size': 16,
                    'embed_channels': [4, 8]},
    }
    for section, values in sections.items():
        data.setdefault(section, {}).update(values)
    return RunConfig.from_dict(data)


@pytest.fixture
def run_config(tmp_path):
    return small_run_config(tmp_path / "run")


def random_mask(rng, height=8, width=8):
    return rng.integers(0, 6, size=(height, width)).astype(np.uint8)
