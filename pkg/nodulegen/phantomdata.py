"""
Synthetic paired (mask, image) dataset.

Each phantom is an axial slice caricature: a body ellipse holding two lung
ellipses and a trachea disc, with up to three nodule discs placed inside
the lungs. Images are rendered from the mask by per-class intensity, a
smooth texture field and Gaussian noise.

Every sample draws from its own rng stream seeded by (seed, index), so
samples can be generated in any order or in parallel with identical bytes.
"""
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .attention import bilinear_upsample
from .config import PhantomConfig, PipelineConfig
from .errors import ConfigError, FormatError, InsufficientSamples, IoError
from .maskcodec import load_mask_png, nodule_bboxes, save_mask_png
from .models import BoundingBox, DatasetManifest, ManifestEntry, PairedSample

logger = logging.getLogger(__name__)

BACKGROUND, BODY, LEFT_LUNG, RIGHT_LUNG, TRACHEA, NODULE = range(6)
SPLITS = ("train", "test")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one sample."""
    return np.random.default_rng([seed, index])


def _ellipse(shape: Tuple[int, int], cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _disc(shape: Tuple[int, int], cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _anatomy(rng: np.random.Generator, size: int) -> np.ndarray:
    shape = (size, size)
    mask = np.zeros(shape, dtype=np.uint8)
    jitter = rng.uniform(0.95, 1.05, size=4)
    cy = size / 2 + rng.uniform(-0.02, 0.02) * size
    cx = size / 2 + rng.uniform(-0.02, 0.02) * size

    mask[_ellipse(shape, cy, cx, 0.36 * size * jitter[0], 0.46 * size * jitter[1])] = BODY
    lung_ry, lung_rx = 0.22 * size * jitter[2], 0.13 * size * jitter[3]
    offset = 0.18 * size
    # radiological convention: the patient's left lung is on the image right
    mask[_ellipse(shape, cy + 0.02 * size, cx + offset, lung_ry, lung_rx)] = LEFT_LUNG
    mask[_ellipse(shape, cy + 0.02 * size, cx - offset, lung_ry, lung_rx)] = RIGHT_LUNG
    mask[_disc(shape, cy - 0.12 * size, cx, max(1.0, 0.035 * size))] = TRACHEA
    return mask


def _place_nodules(mask: np.ndarray, rng: np.random.Generator, cfg: PhantomConfig, count: int) -> int:
    """Paint up to count nodule discs strictly inside lung tissue; returns how many fit."""
    lo, hi = cfg.diameter_range
    placed = 0
    for _ in range(count):
        for _attempt in range(cfg.placement_retries):
            diameter = int(rng.integers(lo, hi + 1))
            radius = diameter / 2.0
            available = np.isin(mask, PipelineConfig.LUNG_LABELS)
            existing = ndimage.binary_dilation(mask == NODULE, structure=np.ones((3, 3), bool))
            available &= ~existing
            # keep a ring of lung around the disc
            depth = ndimage.distance_transform_edt(available)
            candidates = np.argwhere(depth > radius + 1.0)
            if len(candidates):
                cy, cx = candidates[int(rng.integers(len(candidates)))]
                mask[_disc(mask.shape, cy, cx, radius)] = NODULE
                placed += 1
                break
        else:
            logger.debug(f"Skipped a nodule after {cfg.placement_retries} placement attempts")
    return placed


def render_image_from_mask(mask: np.ndarray, cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Base intensity per class + smooth texture + Gaussian noise, clipped to [-1, 1].

    Returns:
        1xHxW float32 image
    """
    mask = np.asarray(mask).astype(np.int64)
    height, width = mask.shape
    image = np.asarray(cfg.intensities, dtype=np.float64)[mask]
    if cfg.texture_scale > 0:
        field = torch.from_numpy(rng.standard_normal((cfg.texture_grid, cfg.texture_grid)))
        image = image + cfg.texture_scale * bilinear_upsample(field, height, width).numpy()
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=(height, width))
    return np.clip(image, -1.0, 1.0).astype(np.float32)[None]


def generate_phantom_pair(rng: np.random.Generator, cfg: PhantomConfig,
                          sample_id: Optional[str] = None) -> PairedSample:
    """Draw one phantom mask, its nodules and its rendered image."""
    mask = _anatomy(rng, cfg.image_size)
    weights = np.asarray(cfg.nodule_count_weights, dtype=np.float64)
    count = int(rng.choice(len(weights), p=weights / weights.sum()))
    _place_nodules(mask, rng, cfg, count)
    image = render_image_from_mask(mask, cfg, rng)
    return PairedSample(mask=mask, image=image, boxes=nodule_bboxes(mask), sample_id=sample_id)


def generate_dataset(cfg: PhantomConfig, n: Optional[int] = None, seed: Optional[int] = None,
                     prefix: str = "s") -> List[PairedSample]:
    """Generate n phantoms, sample i drawn from stream (seed, i)."""
    cfg.validate()
    n = cfg.n_samples if n is None else n
    seed = cfg.seed if seed is None else seed
    return [
        generate_phantom_pair(sample_rng(seed, i), cfg, PipelineConfig.format_sample_id(i, prefix))
        for i in range(n)
    ]


def normalize_image(raw: np.ndarray, window: Tuple[float, float] = (-1000.0, 400.0)) -> np.ndarray:
    """
    Clip raw values to [min, max] and map affinely onto [-1, 1].

    Raises:
        ConfigError: min >= max
    """
    lo, hi = window
    if not lo < hi:
        raise ConfigError(f"Normalization window {window} needs min < max", key="phantom.normalization_window")
    clipped = np.clip(np.asarray(raw, dtype=np.float64), lo, hi)
    return 2.0 * (clipped - lo) / (hi - lo) - 1.0


def split_dataset(manifest: DatasetManifest, ratio: Tuple[int, int] = (4, 1), seed: int = 0) -> DatasetManifest:
    """
    Tag entries train/test by a seeded shuffle.

    The train count is round(N * a / (a + b)) (halves round up), kept
    within [1, N - 1].

    Raises:
        InsufficientSamples: fewer than two entries
    """
    n = len(manifest.entries)
    if n < 2:
        raise InsufficientSamples(f"Cannot split {n} samples")
    a, b = ratio
    if a < 1 or b < 1:
        raise ConfigError(f"Split ratio {ratio} must be positive integers", key="phantom.split_ratio")
    n_train = min(max(int(np.floor(n * a / (a + b) + 0.5)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    entries = [replace(e, split="train" if i in train else "test") for i, e in enumerate(manifest.entries)]
    return replace(manifest, entries=entries)


def kfold_split(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> List[Tuple[List[str], List[str]]]:
    """
    Seeded k-fold partition of the manifest ids.

    Returns:
        k (train_ids, test_ids) pairs; every id is a test id exactly once
    """
    n = len(manifest.entries)
    if k < 2 or n < k:
        raise InsufficientSamples(f"Cannot build {k} folds from {n} samples")
    ids = manifest.ids
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    result = []
    for fold in folds:
        held = set(fold.tolist())
        result.append((
            [ids[i] for i in range(n) if i not in held],
            [ids[i] for i in sorted(held)],
        ))
    return result


def mix_datasets(real: DatasetManifest, synthetic: DatasetManifest, n_synthetic: int,
                 seed: int = 0, root: Optional[Path] = None) -> DatasetManifest:
    """
    Real entries plus n_synthetic randomly chosen synthetic entries tagged train.

    The test split of the result is exactly the real test split. Paths are
    made absolute so the manifest can live anywhere.
    """
    if n_synthetic < 0 or n_synthetic > len(synthetic.entries):
        raise InsufficientSamples(
            f"Requested {n_synthetic} synthetic samples, {len(synthetic.entries)} available")

    def absolute(entry: ManifestEntry, base: Path, **changes) -> ManifestEntry:
        return replace(
            entry,
            mask_path=str((Path(base) / entry.mask_path).resolve()),
            image_path=str((Path(base) / entry.image_path).resolve()) if entry.image_path else None,
            **changes,
        )

    entries = [absolute(e, real.root) for e in real.entries]
    chosen = np.sort(np.random.default_rng(seed).choice(len(synthetic.entries), n_synthetic, replace=False))
    entries += [absolute(synthetic.entries[i], synthetic.root, split="train", source="synthetic")
                for i in chosen.tolist()]
    seen = set()
    for entry in entries:
        if entry.sample_id in seen:
            raise FormatError(f"Duplicate sample id {entry.sample_id} when mixing datasets")
        seen.add(entry.sample_id)
    return DatasetManifest(
        root=Path(root) if root else real.root,
        entries=entries,
        seed=seed,
        config_hash=real.config_hash,
        image_size=real.image_size,
        formats=real.formats,
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_image_png(image: np.ndarray, path: Path) -> Path:
    """16-bit grayscale PNG, stored = round((v + 1) / 2 * 65535)."""
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 3:
        array = array[0]
    stored = np.round((np.clip(array, -1.0, 1.0) + 1.0) / 2.0 * PipelineConfig.IMAGE_PNG_MAX)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(stored.astype(np.uint16)).save(path, format="PNG")
    return path


def load_image_png(path: Path) -> np.ndarray:
    """Read a 16-bit image PNG back to a 1xHxW float32 array in [-1, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            stored = np.array(img, dtype=np.float64)
    except OSError as e:
        raise IoError(f"Cannot read image {path}: {e}", path=path) from e
    if stored.ndim != 2:
        raise FormatError(f"Image {path} is not single-channel")
    return (stored / PipelineConfig.IMAGE_PNG_MAX * 2.0 - 1.0).astype(np.float32)[None]


def _formats() -> Dict[str, Any]:
    return {
        'version': PipelineConfig.FORMAT_VERSION,
        'mask_png_bits': PipelineConfig.MASK_BIT_DEPTH,
        'image_png_bits': PipelineConfig.IMAGE_BIT_DEPTH,
        'image_map': 'stored = round((v + 1) / 2 * 65535)',
        'labels': list(PipelineConfig.CLASS_NAMES),
    }


def _dump_json(data: Any, path: Path):
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def export_coco(manifest: DatasetManifest, path: Optional[Path] = None) -> Dict[str, Any]:
    """
    COCO-style annotation document for a manifest, boxes read from the masks.

    Raises:
        IoError: a referenced mask cannot be read
    """
    images, annotations = [], []
    for index, entry in enumerate(manifest.entries, start=1):
        mask = load_mask_png(Path(manifest.root) / entry.mask_path)
        height, width = mask.shape
        images.append({
            'id': index,
            'sample_id': entry.sample_id,
            'file_name': entry.image_path or entry.mask_path,
            'mask_file': entry.mask_path,
            'height': int(height),
            'width': int(width),
            'split': entry.split,
        })
        for box in nodule_bboxes(mask):
            annotations.append({
                'id': len(annotations) + 1,
                'image_id': index,
                'category_id': PipelineConfig.COCO_CATEGORY_ID,
                'bbox': box.to_list(),
                'area': box.area,
                'iscrowd': 0,
            })
    doc = {
        'info': {'format_version': PipelineConfig.FORMAT_VERSION},
        'images': images,
        'annotations': annotations,
        'categories': [{'id': PipelineConfig.COCO_CATEGORY_ID, 'name': PipelineConfig.COCO_CATEGORY_NAME}],
    }
    if path is not None:
        _dump_json(doc, Path(path))
    return doc


def load_coco(path: Path) -> Dict[str, List[BoundingBox]]:
    """Re-import an exported annotation file as sample_id -> boxes."""
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise IoError(f"Cannot read annotations {path}: {e}", path=path) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON in {path}: {e}") from e
    problems = validate_coco(doc)
    if problems:
        raise FormatError(f"{path} is not a valid annotation file: {problems[0]}")
    by_image = {img['id']: img.get('sample_id', str(img['id'])) for img in doc['images']}
    boxes: Dict[str, List[BoundingBox]] = {sid: [] for sid in by_image.values()}
    for ann in doc['annotations']:
        boxes[by_image[ann['image_id']]].append(BoundingBox.from_list(ann['bbox']))
    return boxes


def validate_coco(doc: Dict[str, Any]) -> List[str]:
    """Schema check: required fields, unique ids, bboxes inside their image."""
    problems = []
    for key in ('images', 'annotations', 'categories'):
        if not isinstance(doc.get(key), list):
            problems.append(f"missing array {key}")
    if problems:
        return problems
    images = {}
    for img in doc['images']:
        if not all(k in img for k in ('id', 'height', 'width', 'file_name')):
            problems.append(f"image entry lacks required fields: {img}")
            continue
        if img['id'] in images:
            problems.append(f"duplicate image id {img['id']}")
        images[img['id']] = img
    category_ids = {c.get('id') for c in doc['categories']}
    seen = set()
    for ann in doc['annotations']:
        if not all(k in ann for k in ('id', 'image_id', 'category_id', 'bbox')):
            problems.append(f"annotation lacks required fields: {ann}")
            continue
        if ann['id'] in seen:
            problems.append(f"duplicate annotation id {ann['id']}")
        seen.add(ann['id'])
        if ann['category_id'] not in category_ids:
            problems.append(f"annotation {ann['id']} has unknown category {ann['category_id']}")
        img = images.get(ann['image_id'])
        if img is None:
            problems.append(f"annotation {ann['id']} references unknown image {ann['image_id']}")
            continue
        try:
            box = BoundingBox.from_list(ann['bbox'])
        except (TypeError, ValueError):
            problems.append(f"annotation {ann['id']} bbox is not [x, y, w, h]")
            continue
        if not box.within(img['height'], img['width']):
            problems.append(f"annotation {ann['id']} bbox {ann['bbox']} leaves its image")
    return problems


def write_dataset(root: Path, samples: Sequence[PairedSample], seed: Optional[int] = None,
                  config_hash: Optional[str] = None, split_ratio: Optional[Tuple[int, int]] = (4, 1),
                  source: str = "phantom") -> DatasetManifest:
    """
    Write masks/, images/, manifest.json and annotations.json under root.

    With split_ratio set the entries are split train/test with the seed;
    otherwise every entry is tagged train.
    """
    root = Path(root)
    entries = []
    try:
        for sample in samples:
            mask_path = PipelineConfig.get_mask_path(root, sample.sample_id)
            save_mask_png(sample.mask, mask_path)
            image_rel = None
            if sample.image is not None:
                image_path = PipelineConfig.get_image_path(root, sample.sample_id)
                save_image_png(sample.image, image_path)
                image_rel = image_path.relative_to(root).as_posix()
            entries.append(ManifestEntry(
                sample_id=sample.sample_id,
                mask_path=mask_path.relative_to(root).as_posix(),
                image_path=image_rel,
                boxes=list(sample.boxes),
                source=source,
            ))
    except OSError as e:
        raise IoError(f"Cannot write dataset under {root}: {e}", path=root) from e

    manifest = DatasetManifest(
        root=root,
        entries=entries,
        seed=seed,
        config_hash=config_hash,
        image_size=int(samples[0].mask.shape[0]) if samples else None,
        formats=_formats(),
    )
    if split_ratio is not None and len(entries) >= 2:
        manifest = split_dataset(manifest, split_ratio, seed or 0)
    write_manifest(manifest)
    export_coco(manifest, root / PipelineConfig.ANNOTATIONS_NAME)
    logger.info(f"Wrote {len(entries)} samples to {root}")
    return manifest


def write_manifest(manifest: DatasetManifest, path: Optional[Path] = None) -> Path:
    path = Path(path) if path else Path(manifest.root) / PipelineConfig.MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(manifest.to_dict(), path)
    return path


def load_manifest(root: Path) -> DatasetManifest:
    """
    Read root/manifest.json.

    Raises:
        IoError: the dataset directory or manifest is missing
        FormatError: the manifest is malformed or holds duplicate ids
    """
    root = Path(root)
    path = root / PipelineConfig.MANIFEST_NAME
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise IoError(f"No dataset manifest at {path}", path=path) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid manifest {path}: {e}") from e
    try:
        entries = [ManifestEntry.from_dict(item) for item in data['samples']]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed manifest {path}: {e}") from e
    ids = [e.sample_id for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError(f"Manifest {path} lists duplicate sample ids")
    if any(e.split not in SPLITS for e in entries):
        raise FormatError(f"Manifest {path} has split tags outside {SPLITS}")
    return DatasetManifest(
        root=root,
        entries=entries,
        seed=data.get('seed'),
        config_hash=data.get('config_hash'),
        image_size=data.get('image_size'),
        formats=data.get('formats', {}),
    )


def load_dataset(root: Path, split: Optional[str] = None,
                 load_images: bool = True) -> Tuple[DatasetManifest, List[PairedSample]]:
    """
    Read a dataset directory, re-verifying that every stored box list equals
    nodule_bboxes of its mask.

    Raises:
        FormatError: a box list disagrees with its mask
    """
    manifest = load_manifest(root)
    entries = manifest.split(split) if split else manifest.entries
    samples = []
    for entry in entries:
        mask = load_mask_png(Path(manifest.root) / entry.mask_path)
        boxes = nodule_bboxes(mask)
        if boxes != entry.boxes:
            raise FormatError(f"Boxes of {entry.sample_id} disagree with its mask")
        image = None
        if load_images and entry.image_path:
            image = load_image_png(Path(manifest.root) / entry.image_path)
        samples.append(PairedSample(mask=mask, image=image, boxes=boxes, sample_id=entry.sample_id))
    return manifest, samples
