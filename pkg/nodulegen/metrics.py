"""
Evaluation metrics: FID on feature-network embeddings, PSNR, SSIM (full
image and nodule region), and detection precision / recall / mAP.

Images are handled as float arrays in [-1, 1]; PSNR and SSIM rescale them
to [0, peak] first (see to_range).
"""
import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import linalg, signal

from .attention import bilinear_upsample
from .config import MetricConfig, PipelineConfig, SsimConfig
from .errors import (ConfigError, EmptyInput, FormatError, InsufficientSamples, PairingError,
                     IoError, NoNoduleRegion, NumericError, ShapeError)
from .models import BoundingBox, Detection, GaussianStats, GroundTruth

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
EIGEN_FLOOR = 1e-10
REGION_METRICS = ("psnr", "ssim", "l1")


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------

def default_embedder(cfg: Optional[MetricConfig] = None):
    """The fixed seeded conv stack used as the desk-scale embedder."""
    from .translator import FeatureNetwork
    cfg = cfg or MetricConfig()
    return FeatureNetwork(cfg.embed_channels, cfg.embed_seed).to(torch.float64)


def embed(images: Union[np.ndarray, Sequence[np.ndarray]], features) -> np.ndarray:
    """
    Embed images as the global average pool of the final feature stage.

    Args:
        images: N images of identical shape, each HxW or 1xHxW
        features: FeatureNetwork (or any callable returning a stage list)

    Returns:
        Nxd float64 embedding matrix

    Raises:
        EmptyInput: no images
        ShapeError: images differ in shape
    """
    if len(images) == 0:
        raise EmptyInput("Cannot embed an empty image set")
    arrays = [np.asarray(img, dtype=np.float64) for img in images]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeError("Images to embed must share one shape")
    batch = np.stack([a if a.ndim == 3 else a[None] for a in arrays])
    dtype = next(iter(features.parameters()), torch.zeros((), dtype=torch.float64)).dtype
    with torch.no_grad():
        final = features(torch.from_numpy(batch).to(dtype))[-1]
        pooled = final.mean(dim=(2, 3)) if final.dim() == 4 else final.flatten(1)
    return pooled.double().cpu().numpy()


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    """
    Sample mean and unbiased covariance (1/(N-1)), symmetrized.

    Raises:
        InsufficientSamples: fewer than two rows
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] < 2:
        raise InsufficientSamples(f"Covariance needs at least 2 embeddings, got {e.shape[0]}")
    mu = e.mean(axis=0)
    sigma = np.atleast_2d(np.cov(e, rowvar=False, ddof=1))
    return GaussianStats(mu=mu, sigma=(sigma + sigma.T) / 2.0)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    values = np.where(values < EIGEN_FLOOR, 0.0, values)
    return (vectors * np.sqrt(values)) @ vectors.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((A B)^1/2) computed as Tr((A^1/2 B A^1/2)^1/2) by symmetric eigendecomposition."""
    try:
        root_a = _psd_sqrt(sigma_a)
        inner = root_a @ sigma_b @ root_a
        values = linalg.eigvalsh((inner + inner.T) / 2.0)
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericError(f"Matrix square root failed: {e}", term="sqrtm")
    values = np.where(values < EIGEN_FLOOR, 0.0, values)
    return float(np.sqrt(values).sum())


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2), clamped at 0.

    Raises:
        ShapeError: dimensions differ
        NumericError: the matrix square root fails or the result is not finite
    """
    if a.dim != b.dim or a.sigma.shape != b.sigma.shape:
        raise ShapeError(f"FID operands differ in dimension: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                  - 2.0 * trace_sqrt_product(a.sigma, b.sigma))
    if not math.isfinite(value):
        raise NumericError(f"FID is not finite: {value}", term="fid")
    return max(0.0, value)


def fid_from_images(real: Sequence[np.ndarray], synth: Sequence[np.ndarray], features) -> float:
    return fid(gaussian_stats(embed(real, features)), gaussian_stats(embed(synth, features)))


def save_embeddings(path: Path, embeddings: np.ndarray) -> Path:
    """Write an Nxd embedding set: magic, version, N, d, then float32 LE rows."""
    e = np.asarray(embeddings, dtype='<f4')
    if e.ndim != 2:
        raise ShapeError(f"Embeddings must be Nxd, got shape {e.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(PipelineConfig.EMBEDDING_MAGIC)
        f.write(struct.pack('<III', PipelineConfig.EMBEDDING_VERSION, *e.shape))
        f.write(np.ascontiguousarray(e).tobytes())
    return path


def load_embeddings(path: Path) -> np.ndarray:
    """
    Read an embedding set written by save_embeddings (or another tool).

    Raises:
        IoError: missing file
        FormatError: bad magic, version or size
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read embeddings {path}: {e}", path=path)
    if len(data) < 16 or data[:4] != PipelineConfig.EMBEDDING_MAGIC:
        raise FormatError(f"{path} is not an embedding file")
    version, n, d = struct.unpack('<III', data[4:16])
    if version != PipelineConfig.EMBEDDING_VERSION:
        raise FormatError(f"Unsupported embedding file version {version}")
    if len(data) != 16 + 4 * n * d:
        raise FormatError(f"{path} should hold {n}x{d} floats")
    return np.frombuffer(data[16:], dtype='<f4').reshape(n, d).astype(np.float64)


# ---------------------------------------------------------------------------
# PSNR / SSIM
# ---------------------------------------------------------------------------

def to_range(image: np.ndarray, peak: float) -> np.ndarray:
    """Map [-1, 1] values onto [0, peak]."""
    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0 * peak


def _plane(image) -> np.ndarray:
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 3 and array.shape[0] == 1:
        array = array[0]
    if array.ndim != 2:
        raise ShapeError(f"Expected a single-channel image, got shape {array.shape}")
    return array


def psnr(x: np.ndarray, y: np.ndarray, max_val: float = 4095.0) -> float:
    """10 log10(max^2 / MSE); math.inf when the images are identical."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"PSNR operands differ in shape: {x.shape} vs {y.shape}")
    if max_val <= 0:
        raise ConfigError(f"PSNR peak must be positive, got {max_val}", key="metrics.psnr_max")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def ssim_window(cfg: SsimConfig) -> np.ndarray:
    """Normalized 2-D window: Gaussian (sigma) or uniform."""
    size = cfg.window_size
    if cfg.gaussian:
        offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        g = np.exp(-offsets ** 2 / (2.0 * cfg.sigma ** 2))
        g /= g.sum()
        window = np.outer(g, g)
    else:
        window = np.ones((size, size), dtype=np.float64)
    return window / window.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, cfg: Optional[SsimConfig] = None) -> np.ndarray:
    """Per-window SSIM over every valid (unpadded) window position."""
    cfg = cfg or SsimConfig()
    x, y = _plane(x), _plane(y)
    if x.shape != y.shape:
        raise ShapeError(f"SSIM operands differ in shape: {x.shape} vs {y.shape}")
    if min(x.shape) < cfg.window_size:
        raise ShapeError(f"Image {x.shape} is smaller than the {cfg.window_size}x{cfg.window_size} window")
    if cfg.data_range <= 0:
        raise ConfigError("SSIM dynamic range must be positive", key="metrics.ssim_range")
    window = ssim_window(cfg)

    def local(a):
        return signal.correlate2d(a, window, mode='valid')

    mu_x, mu_y = local(x), local(y)
    var_x = local(x * x) - mu_x * mu_x
    var_y = local(y * y) - mu_y * mu_y
    cov = local(x * y) - mu_x * mu_y
    c1, c2 = cfg.c1, cfg.c2
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))


def ssim(x: np.ndarray, y: np.ndarray, cfg: Optional[SsimConfig] = None) -> float:
    """Mean SSIM over valid window positions."""
    return float(np.mean(ssim_map(x, y, cfg)))


# ---------------------------------------------------------------------------
# Nodule region
# ---------------------------------------------------------------------------

def nodule_region(mask: np.ndarray, margin: int = 8, min_size: int = 1) -> Tuple[int, int, int, int]:
    """
    Tight box around all nodule pixels, dilated by margin and grown to at
    least min_size per side, clipped to the image.

    Returns:
        (y0, y1, x0, x1), end-exclusive

    Raises:
        NoNoduleRegion: the mask has no nodule pixel
    """
    mask = np.asarray(mask)
    ys, xs = np.nonzero(mask == PipelineConfig.NODULE_LABEL)
    if len(ys) == 0:
        raise NoNoduleRegion("Mask has no nodule pixels")
    height, width = mask.shape

    def span(lo, hi, limit):
        lo, hi = max(0, lo - margin), min(limit, hi + margin)
        need = min(min_size, limit)
        if hi - lo < need:
            lo = max(0, lo - (need - (hi - lo)) // 2)
            hi = min(limit, lo + need)
            lo = hi - need
        return lo, hi

    y0, y1 = span(int(ys.min()), int(ys.max()) + 1, height)
    x0, x1 = span(int(xs.min()), int(xs.max()) + 1, width)
    return y0, y1, x0, x1


def masked_region_metrics(x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                          metrics: Sequence[str] = REGION_METRICS,
                          cfg: Optional[MetricConfig] = None) -> Dict[str, Any]:
    """
    PSNR / SSIM / L1 of two [-1, 1] images inside the nodule region of mask.

    Raises:
        ShapeError: mask and images differ in size
        NoNoduleRegion: the mask has no nodule pixel
    """
    cfg = cfg or MetricConfig()
    x, y, mask = _plane(x), _plane(y), np.asarray(mask)
    if x.shape != mask.shape or y.shape != mask.shape:
        raise ShapeError(f"Mask {mask.shape} does not match images {x.shape}/{y.shape}")
    y0, y1, x0, x1 = nodule_region(mask, cfg.masked_margin, cfg.ssim_window)
    cx, cy = x[y0:y1, x0:x1], y[y0:y1, x0:x1]
    scores: Dict[str, Any] = {'box': [x0, y0, x1 - x0, y1 - y0]}
    for name in metrics:
        if name == "psnr":
            scores[name] = psnr(to_range(cx, cfg.psnr_max), to_range(cy, cfg.psnr_max), cfg.psnr_max)
        elif name == "ssim":
            scores[name] = ssim(to_range(cx, cfg.ssim_range), to_range(cy, cfg.ssim_range), cfg.ssim_config())
        elif name == "l1":
            scores[name] = float(np.mean(np.abs(cx - cy)))
        else:
            raise ConfigError(f"Unknown region metric {name}", key="metrics")
    return scores


def masked_crops(images: Sequence[np.ndarray], masks: Sequence[np.ndarray], size: int = 32,
                 margin: int = 8) -> np.ndarray:
    """
    Nodule-region crops resized to size x size for the masked-region FID.

    Images whose mask holds no nodule are skipped.

    Returns:
        Kx1xsize x size float64 array (K may be 0)
    """
    crops = []
    for image, mask in zip(images, masks):
        try:
            y0, y1, x0, x1 = nodule_region(mask, margin)
        except NoNoduleRegion:
            continue
        patch = torch.from_numpy(_plane(image)[y0:y1, x0:x1].copy())
        crops.append(bilinear_upsample(patch, size, size).numpy()[None])
    if not crops:
        return np.zeros((0, 1, size, size))
    return np.stack(crops)


# ---------------------------------------------------------------------------
# Detection metrics
# ---------------------------------------------------------------------------

def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def _as_ground_truth(gts: Sequence[Union[BoundingBox, GroundTruth]]) -> List[GroundTruth]:
    return [g if isinstance(g, GroundTruth) else GroundTruth(box=g) for g in gts]


def match_detections(dets: Sequence[Detection], gts: Sequence[Union[BoundingBox, GroundTruth]],
                     threshold: float) -> List[Tuple[Detection, bool]]:
    """
    Greedy matching in descending score order (stable for equal scores).

    Each detection takes the unmatched ground truth of its image with the
    highest IoU, provided IoU >= threshold.

    Returns:
        (detection, is_true_positive) in processing order
    """
    truths = _as_ground_truth(gts)
    taken = [False] * len(truths)
    ordered = sorted(dets, key=lambda d: -d.score)
    results = []
    for det in ordered:
        best, best_iou = None, -1.0
        for i, truth in enumerate(truths):
            if taken[i] or truth.image_id != det.image_id:
                continue
            overlap = iou(det.box, truth.box)
            if overlap >= threshold and overlap > best_iou:
                best, best_iou = i, overlap
        if best is not None:
            taken[best] = True
        results.append((det, best is not None))
    return results


def precision_recall(dets: Sequence[Detection], gts: Sequence[Union[BoundingBox, GroundTruth]],
                     threshold: float = 0.5) -> Tuple[float, float]:
    """TP / (TP + FP) and TP / (TP + FN); 0/0 is 0."""
    matches = match_detections(dets, gts, threshold)
    tp = sum(1 for _, hit in matches if hit)
    fp = len(matches) - tp
    n_gt = len(gts)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall


def average_precision(dets: Sequence[Detection], gts: Sequence[Union[BoundingBox, GroundTruth]],
                      threshold: float = 0.5) -> float:
    """
    Area under the precision-recall curve with all-point interpolation
    (precision envelope made non-increasing). 0 without ground truth.
    """
    n_gt = len(gts)
    if n_gt == 0 or not dets:
        return 0.0
    hits = np.array([hit for _, hit in match_detections(dets, gts, threshold)], dtype=np.float64)
    acc_tp = np.cumsum(hits)
    acc_fp = np.cumsum(1.0 - hits)
    recall = acc_tp / n_gt
    precision = acc_tp / (acc_tp + acc_fp)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(dets: Sequence[Detection], gts: Sequence[Union[BoundingBox, GroundTruth]],
            thresholds: Sequence[float] = IOU_THRESHOLDS) -> float:
    """Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95."""
    aps = [average_precision(dets, gts, t) for t in thresholds]
    return sum(aps) / len(aps)


def detection_report(dets: Sequence[Detection], gts: Sequence[Union[BoundingBox, GroundTruth]]) -> Dict[str, Any]:
    precision, recall = precision_recall(dets, gts, 0.5)
    per_threshold = {f"{t:.2f}": average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    return {
        'n_detections': len(dets),
        'n_ground_truth': len(gts),
        'precision@0.50': precision,
        'recall@0.50': recall,
        'mAP@0.50:0.95': sum(per_threshold.values()) / len(per_threshold),
        'ap_per_threshold': per_threshold,
    }


def _read_json(path: Path) -> Any:
    path = Path(path)
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise IoError(f"File not found: {path}", path=path) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON in {path}: {e}") from e
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}", path=path) from e


def load_detections(path: Path) -> List[Detection]:
    """
    Read COCO-like detections: a list (or {"detections": [...]}) of
    {image_id, bbox [x, y, w, h], score, category_id}. Non-nodule
    categories are ignored.
    """
    doc = _read_json(path)
    items = doc.get('detections', []) if isinstance(doc, dict) else doc
    dets = []
    try:
        for item in items:
            if item.get('category_id', PipelineConfig.COCO_CATEGORY_ID) != PipelineConfig.COCO_CATEGORY_ID:
                continue
            dets.append(Detection(
                box=BoundingBox.from_list(item['bbox']),
                score=float(item['score']),
                image_id=int(item['image_id']),
            ))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed detection in {path}: {e}") from e
    return dets


def load_ground_truth(path: Path) -> List[GroundTruth]:
    """Nodule boxes from a COCO annotation file."""
    doc = _read_json(path)
    try:
        return [
            GroundTruth(box=BoundingBox.from_list(a['bbox']), image_id=int(a['image_id']))
            for a in doc['annotations']
            if a.get('category_id', PipelineConfig.COCO_CATEGORY_ID) == PipelineConfig.COCO_CATEGORY_ID
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed annotation file {path}: {e}") from e


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def json_value(value: Any) -> Any:
    """Infinite floats become the strings "inf" / "-inf"; NaN becomes None."""
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_value(v) for v in value]
    return value


_SECTION_KEYS = ("fid", "psnr", "ssim")


def _is_metric(value: Any) -> bool:
    return value is None or value in ("inf", "-inf") or (
        isinstance(value, (int, float)) and not isinstance(value, bool))


def validate_report(report: Dict[str, Any]) -> List[str]:
    """List schema problems of a metrics report (empty when valid)."""
    problems = []
    if not isinstance(report, dict):
        return ["report is not an object"]
    if report.get('report_version') != PipelineConfig.REPORT_VERSION:
        problems.append(f"report_version must be {PipelineConfig.REPORT_VERSION}")
    for section in ("full_image", "masked_region"):
        block = report.get(section)
        if not isinstance(block, dict):
            problems.append(f"missing section {section}")
            continue
        for key in _SECTION_KEYS:
            if key not in block:
                problems.append(f"{section}.{key} missing")
            elif not _is_metric(block[key]):
                problems.append(f"{section}.{key} is not a number")
    for key in ("n_real", "n_synth", "n_paired"):
        if not isinstance(report.get(key), int):
            problems.append(f"{key} must be an integer")
    for key in ("psnr_peak", "ssim_range"):
        if not isinstance(report.get(key), (int, float)):
            problems.append(f"{key} must be a number")
    detection = report.get('detection')
    if detection is not None:
        for key in ("precision@0.50", "recall@0.50", "mAP@0.50:0.95"):
            if not _is_metric(detection.get(key)):
                problems.append(f"detection.{key} is not a number")
    return problems


def _mean(values: Sequence[float]) -> Optional[float]:
    values = list(values)
    if not values:
        return None
    if any(math.isinf(v) for v in values):
        return math.inf if all(v > 0 for v in values if math.isinf(v)) else math.nan
    return float(np.mean(values))


def _set_fid(real: Sequence[np.ndarray], synth: Sequence[np.ndarray], features, what: str) -> Optional[float]:
    try:
        return fid_from_images(real, synth, features)
    except (InsufficientSamples, EmptyInput) as e:
        logger.warning(f"No {what} FID: {e}")
        return None


def evaluation_report(real: Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]],
                      synth: Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]],
                      cfg: Optional[MetricConfig] = None, features=None) -> Dict[str, Any]:
    """
    Full-image and masked-region FID / PSNR / SSIM of a synthetic set against a real set.

    Args:
        real: sample id -> (image in [-1, 1], label mask)
        synth: sample id -> (image, mask or None); masked crops of a synthetic
            image without its own mask use the real mask of the same id
        cfg: metric settings
        features: embedder for FID (default_embedder(cfg) when omitted)

    Returns:
        Report dict (floats, inf kept as math.inf; see json_value)

    Raises:
        EmptyInput: either set is empty
        PairingError: the sets share no sample id
    """
    cfg = cfg or MetricConfig()
    if not real or not synth:
        raise EmptyInput("Both the real and the synthetic set need images")
    paired = sorted(set(real) & set(synth))
    if not paired:
        raise PairingError("Real and synthetic sets share no sample id")
    features = features if features is not None else default_embedder(cfg)

    per_sample: Dict[str, Dict[str, Any]] = {}
    full_psnr, full_ssim, region_psnr, region_ssim = [], [], [], []
    for sample_id in paired:
        x, mask = real[sample_id]
        y = synth[sample_id][0]
        xa, ya = _plane(x), _plane(y)
        if xa.shape != ya.shape:
            raise ShapeError(f"{sample_id}: real {xa.shape} and synthetic {ya.shape} differ")
        scores = {
            'psnr': psnr(to_range(xa, cfg.psnr_max), to_range(ya, cfg.psnr_max), cfg.psnr_max),
            'ssim': ssim(to_range(xa, cfg.ssim_range), to_range(ya, cfg.ssim_range), cfg.ssim_config()),
        }
        full_psnr.append(scores['psnr'])
        full_ssim.append(scores['ssim'])
        if mask is not None:
            try:
                region = masked_region_metrics(xa, ya, mask, ("psnr", "ssim"), cfg)
                scores['masked_psnr'], scores['masked_ssim'] = region['psnr'], region['ssim']
                region_psnr.append(region['psnr'])
                region_ssim.append(region['ssim'])
            except NoNoduleRegion:
                pass
        per_sample[sample_id] = scores

    real_ids, synth_ids = sorted(real), sorted(synth)
    real_crops = masked_crops([real[i][0] for i in real_ids], [real[i][1] for i in real_ids],
                              cfg.embed_size, cfg.masked_margin)
    synth_masks = [synth[i][1] if synth[i][1] is not None else real.get(i, (None, None))[1] for i in synth_ids]
    keep = [i for i, m in zip(synth_ids, synth_masks) if m is not None]
    synth_crops = masked_crops([synth[i][0] for i in keep], [m for m in synth_masks if m is not None],
                               cfg.embed_size, cfg.masked_margin)

    report = {
        'report_version': PipelineConfig.REPORT_VERSION,
        'full_image': {
            'fid': _set_fid([real[i][0] for i in real_ids], [synth[i][0] for i in synth_ids], features, "full-image"),
            'psnr': _mean(full_psnr),
            'ssim': _mean(full_ssim),
        },
        'masked_region': {
            'fid': _set_fid(list(real_crops), list(synth_crops), features, "masked-region"),
            'psnr': _mean(region_psnr),
            'ssim': _mean(region_ssim),
        },
        'n_real': len(real),
        'n_synth': len(synth),
        'n_paired': len(paired),
        'psnr_peak': cfg.psnr_max,
        'ssim_range': cfg.ssim_range,
        'per_sample': per_sample,
    }
    logger.info(f"Evaluated {len(paired)} pairs: full FID {report['full_image']['fid']}, "
                f"PSNR {report['full_image']['psnr']}, SSIM {report['full_image']['ssim']}")
    return report
