"""
Data models for the nodule synthesis pipeline.
Defines the structure of data passed between modules and pipeline stages.
"""
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel units, COCO order (left, top, width, height)."""
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def to_list(self) -> List[float]:
        """Convert to a COCO ``[x, y, w, h]`` list."""
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, values) -> 'BoundingBox':
        x, y, w, h = values
        return cls(x=x, y=y, w=w, h=h)

    def within(self, height: int, width: int) -> bool:
        """Check the box is non-degenerate and lies inside an image."""
        return (
            self.w >= 1 and self.h >= 1
            and self.x >= 0 and self.y >= 0
            and self.x2 <= width and self.y2 <= height
        )


@dataclass(frozen=True)
class GroundTruth:
    """A ground-truth nodule box attached to an image."""
    box: BoundingBox
    image_id: int = 0


@dataclass(frozen=True)
class Detection:
    """A scored detector output."""
    box: BoundingBox
    score: float
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Detection score must lie in [0, 1], got {self.score}")


@dataclass
class ValidationReport:
    """Result of checking a label mask."""
    valid: bool
    height: int
    width: int
    class_counts: Dict[int, int] = field(default_factory=dict)
    invalid_coordinates: List[Tuple[int, int]] = field(default_factory=list)
    invalid_values: List[int] = field(default_factory=list)
    nodule_present: bool = False

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'valid': self.valid,
            'height': self.height,
            'width': self.width,
            'class_counts': {str(k): v for k, v in self.class_counts.items()},
            'invalid_coordinates': [list(c) for c in self.invalid_coordinates],
            'invalid_values': self.invalid_values,
            'nodule_present': self.nodule_present,
        }


@dataclass
class PairedSample:
    """A (mask, image, boxes) triple; image is 1xHxW in [-1, 1]."""
    mask: np.ndarray
    image: np.ndarray
    boxes: List[BoundingBox] = field(default_factory=list)
    sample_id: Optional[str] = None

    @property
    def height(self) -> int:
        return int(self.mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.mask.shape[1])


@dataclass
class ManifestEntry:
    """One sample listed in a dataset manifest."""
    sample_id: str
    mask_path: str
    image_path: Optional[str] = None
    split: str = "train"
    boxes: List[BoundingBox] = field(default_factory=list)
    source: str = "phantom"

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'id': self.sample_id,
            'mask': self.mask_path,
            'image': self.image_path,
            'split': self.split,
            'boxes': [b.to_list() for b in self.boxes],
            'source': self.source,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ManifestEntry':
        return cls(
            sample_id=data['id'],
            mask_path=data['mask'],
            image_path=data.get('image'),
            split=data.get('split', 'train'),
            boxes=[BoundingBox.from_list(b) for b in data.get('boxes', [])],
            source=data.get('source', 'phantom'),
        )


@dataclass
class DatasetManifest:
    """Index of a dataset directory."""
    root: Path
    entries: List[ManifestEntry] = field(default_factory=list)
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    image_size: Optional[int] = None
    formats: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> List[str]:
        return [e.sample_id for e in self.entries]

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {e.sample_id: e for e in self.entries}

    def split(self, tag: str) -> List[ManifestEntry]:
        """Get the entries carrying one split tag."""
        return [e for e in self.entries if e.split == tag]

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'formats': self.formats,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'image_size': self.image_size,
            'samples': [e.to_dict() for e in self.entries],
        }


@dataclass
class GaussianStats:
    """Mean vector and covariance matrix of an embedding set."""
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


@dataclass
class ProcessingResult:
    """Result of a pipeline processing stage."""
    stage_name: str
    success: bool
    message: str
    data: Dict[str, Any] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    duration_seconds: Optional[float] = None
    # in-memory hand-off between stages, never serialized
    artifacts: Dict[str, Any] = field(default_factory=dict)

    def add_error(self, error: str):
        """Add an error message."""
        self.errors.append(error)
        self.success = False

    def add_warning(self, warning: str):
        """Add a warning message."""
        self.warnings.append(warning)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'stage_name': self.stage_name,
            'success': self.success,
            'message': self.message,
            'data': self.data,
            'errors': self.errors,
            'warnings': self.warnings,
            'duration_seconds': self.duration_seconds
        }


@dataclass
class RunContext:
    """Everything a command's stages share: config, output location, status."""
    command: str
    config: Any
    out_dir: Path
    seed: int
    processing_status: str = "pending"
    created_at: datetime = field(default_factory=datetime.now)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'command': self.command,
            'out_dir': str(self.out_dir),
            'seed': self.seed,
            'processing_status': self.processing_status,
            'created_at': self.created_at.isoformat(),
        }
