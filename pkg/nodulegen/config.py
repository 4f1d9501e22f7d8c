"""
Configuration module for the nodule synthesis pipeline.
Contains the format constants and path conventions used across the
pipeline, plus the per-stage settings loaded from a TOML run file.

Dataset layout:
{root}/
  masks/{sample_id}.png       8-bit, pixel value = label 0..5
  images/{sample_id}.png      16-bit, stored = round((v + 1) / 2 * 65535)
  manifest.json
  annotations.json            COCO-style nodule boxes
"""
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback
    import tomli as tomllib


class PipelineConfig:
    """Central format constants and path helpers."""

    # Label classes
    NUM_CLASSES = 6
    CLASS_NAMES = ("background", "body", "left_lung", "right_lung", "trachea", "nodule")
    NODULE_LABEL = 5
    LUNG_LABELS = (2, 3)

    # Palette render (RGB per label)
    PALETTE = (
        (0, 0, 0),        # background
        (128, 128, 128),  # body
        (0, 114, 178),    # left lung
        (86, 180, 233),   # right lung
        (0, 158, 115),    # trachea
        (230, 159, 0),    # nodule
    )

    # File formats
    FORMAT_VERSION = 1
    MASK_BIT_DEPTH = 8
    IMAGE_BIT_DEPTH = 16
    IMAGE_PNG_MAX = 65535
    CHECKPOINT_MAGIC = b"TSGN"
    CHECKPOINT_VERSION = 1
    EMBEDDING_MAGIC = b"EMBD"
    EMBEDDING_VERSION = 1
    REPORT_VERSION = 1
    LOSS_LOG_VERSION = 1

    # Dataset layout
    MASK_DIR = "masks"
    IMAGE_DIR = "images"
    MANIFEST_NAME = "manifest.json"
    ANNOTATIONS_NAME = "annotations.json"
    EFFECTIVE_CONFIG_NAME = "effective_config.json"
    CHECKPOINT_DIR = "checkpoints"
    SAMPLE_DIR = "samples"
    MASKGAN_LOG_NAME = "maskgan_loss.csv"
    TRANSLATOR_LOG_NAME = "translator_loss.csv"
    REPORT_NAME = "report.json"
    GRADCHECK_REPORT_NAME = "gradcheck.json"
    FIXTURE_DIR = "fixtures"
    REAL_ID_PREFIX = "s"
    SYNTH_ID_PREFIX = "g"
    SAMPLE_ID_PADDING = 5
    STEP_PADDING = 7

    # COCO category
    COCO_CATEGORY_ID = 1
    COCO_CATEGORY_NAME = "nodule"

    # Default output root, overridable from the environment
    OUTPUT_ROOT = Path(os.getenv("NODULEGEN_OUT", "runs"))

    @classmethod
    def format_sample_id(cls, index: int, prefix: str = "s") -> str:
        """
        Format a sample id from its index.

        Args:
            index: Sample index (e.g., 7)
            prefix: Id prefix (e.g., "s" for phantom, "g" for generated)

        Returns:
            Sample id (e.g., "s00007")
        """
        return f"{prefix}{index:0{cls.SAMPLE_ID_PADDING}d}"

    @classmethod
    def get_mask_path(cls, root: Path, sample_id: str) -> Path:
        """Path of a sample's label PNG (e.g., root/masks/s00007.png)."""
        return Path(root) / cls.MASK_DIR / f"{sample_id}.png"

    @classmethod
    def get_image_path(cls, root: Path, sample_id: str) -> Path:
        """Path of a sample's 16-bit image PNG (e.g., root/images/s00007.png)."""
        return Path(root) / cls.IMAGE_DIR / f"{sample_id}.png"

    @classmethod
    def get_checkpoint_path(cls, root: Path, name: str, step: int) -> Path:
        """
        Generate a checkpoint directory path.

        Args:
            root: Run output directory
            name: Model name (e.g., "maskgan")
            step: Global step or epoch

        Returns:
            Path (e.g., root/checkpoints/maskgan_0000150)
        """
        return Path(root) / cls.CHECKPOINT_DIR / f"{name}_{step:0{cls.STEP_PADDING}d}"

    @classmethod
    def to_dict(cls) -> Dict[str, Any]:
        """Convert format constants to dictionary."""
        return {
            key: (value.decode() if isinstance(value, bytes) else
                  str(value) if isinstance(value, Path) else value)
            for key, value in cls.__dict__.items()
            if not key.startswith('_') and not callable(value)
            and not isinstance(value, classmethod)
        }


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


@dataclass
class PhantomConfig:
    """Synthetic paired dataset settings."""
    image_size: int = 64
    n_samples: int = 100
    diameter_range: Tuple[int, int] = (3, 30)
    # probabilities of 0, 1, 2, 3 nodules per image
    nodule_count_weights: Tuple[float, ...] = (0.1, 0.5, 0.3, 0.1)
    # background, body, left lung, right lung, trachea, nodule; the lungs share one level
    intensities: Tuple[float, ...] = (-1.0, 0.2, -0.6, -0.6, -0.9, 0.5)
    noise_sigma: float = 0.05
    texture_scale: float = 0.1
    texture_grid: int = 8
    placement_retries: int = 20
    split_ratio: Tuple[int, int] = (4, 1)
    normalization_window: Tuple[float, float] = (-1000.0, 400.0)
    seed: int = 0

    def validate(self):
        if self.image_size < 8:
            raise ConfigError("phantom.image_size must be >= 8", key="phantom.image_size")
        lo, hi = self.diameter_range
        if not 1 <= lo <= hi <= self.image_size / 2:
            raise ConfigError(
                f"phantom.diameter_range {self.diameter_range} must lie within "
                f"[1, {self.image_size / 2}]", key="phantom.diameter_range")
        if len(self.nodule_count_weights) < 1 or any(w < 0 for w in self.nodule_count_weights) \
                or sum(self.nodule_count_weights) <= 0:
            raise ConfigError("phantom.nodule_count_weights must be non-negative with a positive sum",
                              key="phantom.nodule_count_weights")
        if len(self.intensities) != PipelineConfig.NUM_CLASSES:
            raise ConfigError("phantom.intensities needs one value per class",
                              key="phantom.intensities")
        if any(not -1.0 <= v <= 1.0 for v in self.intensities):
            raise ConfigError("phantom.intensities must lie in [-1, 1]", key="phantom.intensities")
        if self.noise_sigma < 0 or self.texture_scale < 0:
            raise ConfigError("phantom noise and texture scales must be >= 0",
                              key="phantom.noise_sigma")
        # both lungs are one tissue and may share a level; all other classes may not
        lungs = PipelineConfig.LUNG_LABELS
        levels = [v for i, v in enumerate(self.intensities) if i != lungs[1]]
        if self.intensities[lungs[0]] != self.intensities[lungs[1]]:
            levels.append(self.intensities[lungs[1]])
        levels.sort()
        gaps = [b - a for a, b in zip(levels, levels[1:])]
        if gaps and min(gaps) < 2 * self.noise_sigma - 1e-12:
            raise ConfigError(
                "phantom.intensities must be at least 2 * noise_sigma apart",
                key="phantom.intensities")
        if any(r < 1 for r in self.split_ratio):
            raise ConfigError("phantom.split_ratio entries must be positive integers",
                              key="phantom.split_ratio")
        wmin, wmax = self.normalization_window
        if not wmin < wmax:
            raise ConfigError("phantom.normalization_window needs min < max",
                              key="phantom.normalization_window")


@dataclass
class MaskGanConfig:
    """Stage-1 mask GAN settings."""
    latent_dim: int = 512
    style_dim: int = 512
    mapping_depth: int = 4
    start_resolution: int = 4
    target_resolution: int = 64
    steps_per_resolution: int = 10000
    lambda_gp: float = 10.0
    lambda_drift: float = 0.001
    lr: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.99
    batch_size: int = 8
    channel_base: int = 512
    channel_max: int = 128
    log_every: int = 100
    checkpoint_every: int = 1000

    @property
    def resolutions(self) -> Tuple[int, ...]:
        """Resolutions of the progressive schedule, start to target."""
        count = int(math.log2(self.target_resolution // self.start_resolution)) + 1
        return tuple(self.start_resolution * 2 ** i for i in range(count))

    @property
    def total_steps(self) -> int:
        return self.steps_per_resolution * len(self.resolutions)

    def channels_at(self, resolution: int) -> int:
        return max(1, min(self.channel_max, self.channel_base // resolution))

    def validate(self):
        for name in ("start_resolution", "target_resolution"):
            if not _is_power_of_two(getattr(self, name)):
                raise ConfigError(f"maskgan.{name} must be a power of two", key=f"maskgan.{name}")
        if self.start_resolution > self.target_resolution:
            raise ConfigError("maskgan.start_resolution must not exceed target_resolution",
                              key="maskgan.start_resolution")
        if self.lambda_gp < 0 or self.lambda_drift < 0:
            raise ConfigError("maskgan lambda values must be >= 0", key="maskgan.lambda_gp")
        for name in ("latent_dim", "style_dim", "mapping_depth", "steps_per_resolution", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"maskgan.{name} must be >= 1", key=f"maskgan.{name}")
        if self.lr < 0:
            raise ConfigError("maskgan.lr must be >= 0", key="maskgan.lr")


@dataclass
class TranslatorConfig:
    """Stage-2 mask-to-image translator settings."""
    image_size: int = 64
    base_width: int = 32
    max_width: int = 256
    depth: Optional[int] = None
    window_size: int = 4
    num_heads: int = 4
    softpool_kernel: int = 7
    softpool_stride: int = 3
    lambda_l1: float = 200.0
    lambda_perceptual: float = 10.0
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 200
    decay_start: int = 100
    max_steps: Optional[int] = None
    critic_width: int = 64
    critic_layers: int = 3
    logit_clamp: float = 15.0
    feature_channels: Tuple[int, ...] = (8, 16, 32)
    feature_seed: int = 1234
    log_every: int = 50

    @property
    def unet_depth(self) -> int:
        """UNet levels; log2(H) - 2 unless set explicitly."""
        if self.depth is not None:
            return self.depth
        return int(math.log2(self.image_size)) - 2

    def width_at(self, level: int) -> int:
        return min(self.max_width, self.base_width * 2 ** level)

    def validate(self):
        if not _is_power_of_two(self.image_size) or self.image_size < 8:
            raise ConfigError("translator.image_size must be a power of two >= 8",
                              key="translator.image_size")
        # instance norm needs at least 2x2 at the bottleneck
        if not 1 <= self.unet_depth <= int(math.log2(self.image_size)) - 1:
            raise ConfigError("translator.depth out of range", key="translator.depth")
        if self.width_at(self.unet_depth) % self.num_heads:
            raise ConfigError("bottleneck width must be divisible by translator.num_heads",
                              key="translator.num_heads")
        if self.window_size < 1:
            raise ConfigError("translator.window_size must be >= 1", key="translator.window_size")
        if self.lambda_l1 < 0 or self.lambda_perceptual < 0:
            raise ConfigError("translator lambda values must be >= 0", key="translator.lambda_l1")
        if not 0 <= self.decay_start <= self.epochs:
            raise ConfigError("translator.decay_start must lie in [0, epochs]",
                              key="translator.decay_start")
        if not self.feature_channels:
            raise ConfigError("translator.feature_channels needs at least one stage",
                              key="translator.feature_channels")


@dataclass(frozen=True)
class SsimConfig:
    """SSIM window and stabilizing constants."""
    window_size: int = 11
    sigma: float = 1.5
    gaussian: bool = True
    data_range: float = 255.0

    @property
    def c1(self) -> float:
        return (0.01 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.data_range) ** 2


@dataclass
class MetricConfig:
    """Evaluation settings."""
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_gaussian: bool = True
    ssim_range: float = 255.0
    psnr_max: float = 4095.0
    masked_margin: int = 8
    embed_size: int = 32
    embed_channels: Tuple[int, ...] = (8, 16, 32)
    embed_seed: int = 1234

    def ssim_config(self) -> 'SsimConfig':
        return SsimConfig(
            window_size=self.ssim_window,
            sigma=self.ssim_sigma,
            gaussian=self.ssim_gaussian,
            data_range=self.ssim_range,
        )

    def validate(self):
        if self.ssim_window < 1 or self.ssim_sigma <= 0:
            raise ConfigError("metrics.ssim_window/ssim_sigma must be positive",
                              key="metrics.ssim_window")
        if self.ssim_range <= 0 or self.psnr_max <= 0:
            raise ConfigError("metrics dynamic ranges must be positive", key="metrics.ssim_range")
        if self.masked_margin < 0:
            raise ConfigError("metrics.masked_margin must be >= 0", key="metrics.masked_margin")


_SECTIONS = {
    'phantom': PhantomConfig,
    'maskgan': MaskGanConfig,
    'translator': TranslatorConfig,
    'metrics': MetricConfig,
}
_RUN_KEYS = ('seed', 'out_dir', 'device', 'precision')


def _coerce(section_cls, key: str, value: Any) -> Any:
    """Turn TOML arrays into the tuples the dataclasses declare."""
    default = next(f for f in fields(section_cls) if f.name == key).default
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


@dataclass
class RunConfig:
    """Complete configuration for one command invocation."""
    seed: int = 0
    out_dir: Path = field(default_factory=lambda: PipelineConfig.OUTPUT_ROOT)
    device: str = "cpu"
    precision: str = "float32"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    maskgan: MaskGanConfig = field(default_factory=MaskGanConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """
        Build a config from nested dictionaries, rejecting unknown keys.

        Args:
            data: Mapping with optional ``run`` and per-stage sections

        Returns:
            Validated RunConfig
        """
        config = cls()
        for section, values in data.items():
            if section == 'run':
                if not isinstance(values, dict):
                    raise ConfigError("[run] must be a table", key="run")
                for key, value in values.items():
                    if key not in _RUN_KEYS:
                        raise ConfigError(f"Unknown config key: run.{key}", key=f"run.{key}")
                    setattr(config, key, Path(value) if key == 'out_dir' else value)
            elif section in _SECTIONS:
                if not isinstance(values, dict):
                    raise ConfigError(f"[{section}] must be a table", key=section)
                section_cls = _SECTIONS[section]
                known = {f.name for f in fields(section_cls)}
                kwargs = {}
                for key, value in values.items():
                    if key not in known:
                        raise ConfigError(f"Unknown config key: {section}.{key}",
                                          key=f"{section}.{key}")
                    kwargs[key] = _coerce(section_cls, key, value)
                setattr(config, section, section_cls(**kwargs))
            else:
                raise ConfigError(f"Unknown config section: {section}", key=section)
        config.validate()
        return config

    @classmethod
    def from_toml(cls, path: Path) -> 'RunConfig':
        """Load and validate a TOML run file."""
        path = Path(path)
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}", key=None)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {path}: {e}", key=None)
        return cls.from_dict(data)

    def apply_overrides(self, seed: Optional[int] = None, out_dir: Optional[Path] = None) -> 'RunConfig':
        """Apply CLI flag overrides in place and return self."""
        if seed is not None:
            self.seed = seed
        if out_dir is not None:
            self.out_dir = Path(out_dir)
        return self

    def validate(self):
        if self.device != "cpu":
            raise ConfigError(f"run.device must be \"cpu\", got {self.device!r}", key="run.device")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("run.precision must be float32 or float64", key="run.precision")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("run.seed must be a non-negative integer", key="run.seed")
        for section in _SECTIONS:
            getattr(self, section).validate()

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        data = {
            'run': {
                'seed': self.seed,
                'out_dir': str(self.out_dir),
                'device': self.device,
                'precision': self.precision,
            }
        }
        for section in _SECTIONS:
            data[section] = asdict(getattr(self, section))
        return data

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of everything except the output dir."""
        data = self.to_dict()
        data['run'].pop('out_dir')
        canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @property
    def torch_dtype(self):
        import torch
        return torch.float64 if self.precision == "float64" else torch.float32
