"""
Semantic mask representation: label maps with six anatomical classes,
their one-hot and score-volume encodings, validation, nodule boxes and
PNG I/O.

Labels: 0 background, 1 body, 2 left lung, 3 right lung, 4 trachea,
5 nodule.
"""
import logging
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .config import PipelineConfig
from .errors import FormatError, InvalidLabel, IoError, NumericError, ShapeError
from .models import BoundingBox, ValidationReport

logger = logging.getLogger(__name__)

NUM_CLASSES = PipelineConfig.NUM_CLASSES
NODULE = PipelineConfig.NODULE_LABEL

# 8-connectivity
_CONNECTIVITY = np.ones((3, 3), dtype=bool)
_MAX_REPORTED_COORDINATES = 1000

ArrayLike = Union[np.ndarray, torch.Tensor]


def _as_numpy(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def _check_labels(mask: np.ndarray):
    if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
        raise ShapeError(f"Label mask must be a non-empty HxW array, got shape {mask.shape}")
    bad = (mask < 0) | (mask >= NUM_CLASSES) | (mask != np.round(mask))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise InvalidLabel(f"Label {mask[y, x]} at (y={y}, x={x}) is outside 0..{NUM_CLASSES - 1}")


def encode_one_hot(mask: ArrayLike) -> np.ndarray:
    """
    Encode a label mask as six binary planes.

    Args:
        mask: HxW label map with values 0..5

    Returns:
        6xHxW float32 array, exactly one 1.0 per pixel

    Raises:
        InvalidLabel: a value lies outside 0..5
    """
    mask = _as_numpy(mask)
    _check_labels(mask)
    labels = mask.astype(np.int64)
    planes = np.zeros((NUM_CLASSES,) + labels.shape, dtype=np.float32)
    np.put_along_axis(planes, labels[None], 1.0, axis=0)
    return planes


def one_hot_tensor(masks: Sequence[ArrayLike], dtype=torch.float32) -> torch.Tensor:
    """Stack label masks into an Nx6xHxW one-hot tensor."""
    return torch.from_numpy(np.stack([encode_one_hot(m) for m in masks])).to(dtype)


def decode_labels(scores: ArrayLike) -> np.ndarray:
    """
    Discretize class scores by per-pixel argmax; ties go to the lowest class.

    Args:
        scores: 6xHxW (or Nx6xHxW) score volume

    Returns:
        HxW (or NxHxW) uint8 label map

    Raises:
        NumericError: scores contain NaN
    """
    scores = _as_numpy(scores)
    if scores.ndim not in (3, 4) or scores.shape[-3] != NUM_CLASSES:
        raise ShapeError(f"Expected a 6-channel score volume, got shape {scores.shape}")
    if np.isnan(scores).any():
        raise NumericError("Class scores contain NaN", term="scores")
    # np.argmax returns the first maximum
    return np.argmax(scores, axis=-3).astype(np.uint8)


def validate_mask(mask: ArrayLike) -> ValidationReport:
    """
    Check a label mask without raising.

    Args:
        mask: candidate HxW label map

    Returns:
        ValidationReport with per-class counts, offending coordinates and
        whether any nodule pixel is present
    """
    array = _as_numpy(mask)
    if array.ndim != 2 or array.size == 0:
        height = int(array.shape[0]) if array.ndim >= 1 else 0
        width = int(array.shape[1]) if array.ndim >= 2 else 0
        return ValidationReport(valid=False, height=height, width=width)

    bad = ~np.isfinite(array.astype(np.float64))
    finite = np.where(bad, -1, array)
    bad |= (finite < 0) | (finite >= NUM_CLASSES) | (finite != np.round(finite))
    coords = [(int(y), int(x)) for y, x in np.argwhere(bad)[:_MAX_REPORTED_COORDINATES]]
    invalid_values = sorted({float(v) for v in array[bad].ravel()[:_MAX_REPORTED_COORDINATES]})

    good = np.where(bad, -1, finite).astype(np.int64)
    counts = {label: int((good == label).sum()) for label in range(NUM_CLASSES)}
    return ValidationReport(
        valid=not bad.any(),
        height=int(array.shape[0]),
        width=int(array.shape[1]),
        class_counts=counts,
        invalid_coordinates=coords,
        invalid_values=[int(v) if float(v).is_integer() else v for v in invalid_values],
        nodule_present=counts[NODULE] > 0,
    )


def nodule_bboxes(mask: ArrayLike) -> List[BoundingBox]:
    """
    Tight boxes around the 8-connected nodule components.

    Args:
        mask: valid HxW label map

    Returns:
        One box per component, ordered by (y, x) of the top-left corner
    """
    mask = _as_numpy(mask)
    components, count = ndimage.label(mask == NODULE, structure=_CONNECTIVITY)
    if count == 0:
        return []
    boxes = []
    for rows, cols in ndimage.find_objects(components):
        boxes.append(BoundingBox(
            x=int(cols.start),
            y=int(rows.start),
            w=int(cols.stop - cols.start),
            h=int(rows.stop - rows.start),
        ))
    boxes.sort(key=lambda b: (b.y, b.x))
    return boxes


def majority_pool(mask: ArrayLike, factor: int) -> np.ndarray:
    """
    Downsample a label map by taking the most frequent label per block.

    Ties go to the lowest label, so the output is always a valid mask.

    Args:
        mask: HxW label map, H and W divisible by factor
        factor: integer block size

    Returns:
        (H/factor)x(W/factor) uint8 label map
    """
    mask = _as_numpy(mask)
    if factor < 1:
        raise ShapeError(f"Pooling factor must be >= 1, got {factor}")
    if factor == 1:
        return mask.astype(np.uint8)
    height, width = mask.shape
    if height % factor or width % factor:
        raise ShapeError(f"Mask {height}x{width} is not divisible by pooling factor {factor}")
    planes = encode_one_hot(mask)
    counts = planes.reshape(NUM_CLASSES, height // factor, factor, width // factor, factor).sum(axis=(2, 4))
    return np.argmax(counts, axis=0).astype(np.uint8)


def render_palette(mask: ArrayLike) -> np.ndarray:
    """Render a label map with the fixed six-colour palette (HxWx3 uint8)."""
    mask = _as_numpy(mask)
    _check_labels(mask)
    palette = np.asarray(PipelineConfig.PALETTE, dtype=np.uint8)
    return palette[mask.astype(np.int64)]


def tile_masks(masks: Sequence[ArrayLike], columns: int = 4) -> np.ndarray:
    """Lay palette renders out on a grid for sample sheets."""
    if not masks:
        raise ShapeError("No masks to tile")
    renders = [render_palette(m) for m in masks]
    height, width, _ = renders[0].shape
    rows = -(-len(renders) // columns)
    sheet = np.zeros((rows * height, columns * width, 3), dtype=np.uint8)
    for i, render in enumerate(renders):
        r, c = divmod(i, columns)
        sheet[r * height:(r + 1) * height, c * width:(c + 1) * width] = render
    return sheet


def save_mask_png(mask: ArrayLike, path: Path) -> Path:
    """Write a label map as an 8-bit grayscale PNG (pixel value = label)."""
    mask = _as_numpy(mask)
    _check_labels(mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8)).save(path, format="PNG")
    return path


def save_palette_png(mask_or_sheet: np.ndarray, path: Path) -> Path:
    """Write a palette render (or an already rendered RGB sheet) as PNG."""
    array = np.asarray(mask_or_sheet)
    if array.ndim == 2:
        array = render_palette(array)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array.astype(np.uint8)).save(path, format="PNG")
    return path


def load_mask_png(path: Path) -> np.ndarray:
    """
    Read an 8-bit label PNG.

    Raises:
        IoError: the file is missing or unreadable
        FormatError: the PNG is not single-channel
        InvalidLabel: it holds values outside 0..5
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P"):
                raise FormatError(f"Mask {path} has mode {img.mode}, expected 8-bit grayscale")
            array = np.array(img)
    except (FileNotFoundError, PermissionError) as e:
        raise IoError(f"Cannot read mask {path}: {e}", path=path)
    except OSError as e:
        raise IoError(f"Cannot decode mask {path}: {e}", path=path)
    _check_labels(array)
    return array.astype(np.uint8)
