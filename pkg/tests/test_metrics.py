import json
import math

import numpy as np
import pytest

from nodulegen.config import MetricConfig, PhantomConfig, SsimConfig
from nodulegen.errors import (EmptyInput, FormatError, InsufficientSamples, IoError, NoNoduleRegion,
                              PairingError, ShapeError)
from nodulegen.metrics import (IOU_THRESHOLDS, average_precision, default_embedder, detection_report,
                               embed, evaluation_report, fid, gaussian_stats, iou, json_value,
                               load_detections, load_embeddings, load_ground_truth, masked_crops,
                               masked_region_metrics, mean_ap, match_detections, nodule_region,
                               precision_recall, psnr, save_embeddings, ssim, ssim_map,
                               trace_sqrt_product, validate_report)
from nodulegen.models import BoundingBox, Detection, GaussianStats, GroundTruth
from nodulegen.phantomdata import generate_dataset


def _stats(mu, sigma):
    return GaussianStats(mu=np.atleast_1d(np.asarray(mu, dtype=float)),
                         sigma=np.atleast_2d(np.asarray(sigma, dtype=float)))


class TestGaussianStats:
    def test_two_points(self):
        stats = gaussian_stats(np.array([[0.0], [2.0]]))
        assert stats.mu[0] == 1.0
        assert stats.sigma[0, 0] == pytest.approx(2.0)

    def test_symmetric(self, rng):
        stats = gaussian_stats(rng.normal(size=(50, 4)))
        np.testing.assert_array_equal(stats.sigma, stats.sigma.T)

    def test_single_row(self):
        with pytest.raises(InsufficientSamples):
            gaussian_stats(np.zeros((1, 3)))


class TestFid:
    def test_identical_sets(self, rng):
        stats = gaussian_stats(rng.normal(size=(40, 3)))
        assert fid(stats, stats) == pytest.approx(0.0, abs=1e-8)

    def test_one_dimensional(self):
        assert fid(_stats(0.0, 1.0), _stats(1.0, 4.0)) == pytest.approx(2.0)

    def test_mean_shift_only(self):
        assert fid(_stats([0.0, 0.0], np.eye(2)), _stats([3.0, 4.0], np.eye(2))) == pytest.approx(25.0)

    def test_diagonal_square_root(self):
        assert trace_sqrt_product(np.diag([1.0, 4.0]), np.diag([9.0, 1.0])) == pytest.approx(5.0)

    def test_symmetric_and_non_negative(self, rng):
        a = gaussian_stats(rng.normal(size=(30, 3)))
        b = gaussian_stats(rng.normal(1.0, 2.0, size=(30, 3)))
        assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-8)
        assert fid(a, b) > 0.0

    def test_singular_covariance(self):
        a = _stats([0.0, 0.0], np.diag([1.0, 0.0]))
        assert fid(a, a) == pytest.approx(0.0, abs=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            fid(_stats([0.0], 1.0), _stats([0.0, 0.0], np.eye(2)))

    def test_same_gaussian_shrinks_with_sample_size(self):
        def mean_fid(n):
            values = []
            for seed in range(5):
                rng = np.random.default_rng(seed)
                a = gaussian_stats(rng.normal(size=(n, 4)))
                b = gaussian_stats(rng.normal(size=(n, 4)))
                values.append(fid(a, b))
            return np.mean(values)

        trend = [mean_fid(n) for n in (64, 256, 1024)]
        assert trend[0] > trend[1] > trend[2] >= 0.0

    def test_mean_shift_dominates_sampling_noise(self):
        rng = np.random.default_rng(11)
        real = gaussian_stats(rng.normal(size=(1024, 4)))
        same = gaussian_stats(rng.normal(size=(1024, 4)))
        shifted = gaussian_stats(rng.normal(size=(1024, 4)) + 1.0)
        assert fid(real, same) < fid(real, shifted)


class TestEmbeddings:
    def test_embed_shape(self, rng):
        features = default_embedder(MetricConfig(embed_channels=(4, 8)))
        out = embed([rng.uniform(-1, 1, size=(1, 16, 16)) for _ in range(5)], features)
        assert out.shape == (5, 8)
        assert out.dtype == np.float64

    def test_embed_rejects_empty_and_mixed(self, rng):
        features = default_embedder(MetricConfig(embed_channels=(4,)))
        with pytest.raises(EmptyInput):
            embed([], features)
        with pytest.raises(ShapeError):
            embed([np.zeros((8, 8)), np.zeros((16, 16))], features)

    def test_file_roundtrip(self, tmp_path, rng):
        values = rng.normal(size=(6, 3)).astype(np.float32)
        path = save_embeddings(tmp_path / "emb" / "real.bin", values)
        assert path.read_bytes()[:4] == b"EMBD"
        np.testing.assert_array_equal(load_embeddings(path), values.astype(np.float64))

    def test_truncated_file(self, tmp_path, rng):
        path = save_embeddings(tmp_path / "e.bin", rng.normal(size=(4, 2)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_embeddings(tmp_path / "none.bin")


class TestPsnr:
    def test_unit_error_at_8_bit_peak(self):
        x = np.zeros((8, 8))
        assert psnr(x, x + 1.0, 255.0) == pytest.approx(48.1308, abs=1e-4)

    def test_error_equal_to_peak(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 255.0), 255.0) == pytest.approx(0.0)

    def test_identical(self):
        assert psnr(np.ones((3, 3)), np.ones((3, 3))) == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_decreases_with_noise_amplitude(self, rng):
        x = rng.uniform(0, 4095, size=(32, 32))
        values = [psnr(x, x + rng.normal(0, sigma, size=x.shape)) for sigma in (1.0, 10.0, 100.0)]
        assert values[0] > values[1] > values[2]


class TestSsim:
    def test_identical(self, rng):
        x = rng.uniform(0, 255, size=(20, 20))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_constant_images(self):
        value = ssim(np.full((16, 16), 100.0), np.full((16, 16), 50.0), SsimConfig(data_range=255.0))
        c1 = (0.01 * 255.0) ** 2
        assert value == pytest.approx((10000.0 + c1) / (12500.0 + c1))
        assert value == pytest.approx(0.8001, abs=1e-4)

    def test_map_covers_valid_positions(self, rng):
        x = rng.uniform(0, 255, size=(20, 24))
        assert ssim_map(x, x, SsimConfig(window_size=7)).shape == (14, 18)

    def test_uniform_window(self, rng):
        x = rng.uniform(0, 255, size=(12, 12))
        y = x + rng.normal(0, 10, size=x.shape)
        value = ssim(x, y, SsimConfig(window_size=5, gaussian=False))
        assert -1.0 <= value < 1.0

    def test_image_smaller_than_window(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    @pytest.mark.parametrize("seed", range(5))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 255, size=(24, 24))
        pairs = [rng.uniform(0, 255, size=x.shape), 255.0 - x, x + rng.normal(0, 20, size=x.shape)]
        for y in pairs:
            values = ssim_map(x, y, SsimConfig(data_range=255.0))
            assert values.min() >= -1.0 and values.max() <= 1.0
        assert ssim(x, 255.0 - x) < 0.0

    def test_shift_invariance(self, rng):
        big_x = rng.uniform(0, 255, size=(40, 40))
        big_y = big_x + rng.normal(0, 15, size=big_x.shape)
        cfg = SsimConfig(window_size=7)
        base = ssim_map(big_x[:32, :32], big_y[:32, :32], cfg)
        shifted = ssim_map(big_x[3:35, 2:34], big_y[3:35, 2:34], cfg)
        np.testing.assert_allclose(base[3:, 2:], shifted[:-3, :-2], rtol=1e-12, atol=1e-12)


class TestNoduleRegion:
    def _mask(self):
        mask = np.ones((32, 32), dtype=np.uint8)
        mask[10:14, 10:14] = 5
        return mask

    def test_margin(self):
        assert nodule_region(self._mask(), margin=4) == (6, 18, 6, 18)

    def test_clipped_and_grown_at_edge(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[31, 31] = 5
        assert nodule_region(mask, margin=0, min_size=5) == (27, 32, 27, 32)

    def test_no_nodule(self):
        with pytest.raises(NoNoduleRegion):
            nodule_region(np.ones((8, 8), dtype=np.uint8))

    def test_identical_images(self, rng):
        x = rng.uniform(-1, 1, size=(32, 32))
        scores = masked_region_metrics(x, x, self._mask(), cfg=MetricConfig(masked_margin=4, ssim_window=7))
        assert scores['box'] == [6, 6, 12, 12]
        assert scores['psnr'] == math.inf
        assert scores['ssim'] == pytest.approx(1.0)
        assert scores['l1'] == 0.0

    def test_changes_outside_region_are_ignored(self, rng):
        x = rng.uniform(-1, 1, size=(32, 32))
        y = x.copy()
        y[25:, 25:] = 0.0
        scores = masked_region_metrics(x, y, self._mask(), cfg=MetricConfig(masked_margin=4, ssim_window=7))
        assert scores['l1'] == 0.0

    def test_crops_skip_empty_masks(self, rng):
        images = [rng.uniform(-1, 1, size=(1, 32, 32)) for _ in range(3)]
        masks = [self._mask(), np.zeros((32, 32), dtype=np.uint8), self._mask()]
        assert masked_crops(images, masks, size=16, margin=2).shape == (2, 1, 16, 16)


def _box(x, y, w, h):
    return BoundingBox(x=x, y=y, w=w, h=h)


def _optimal_true_positives(dets, gts, threshold):
    """Largest one-to-one matching over every assignment of detections to truths."""
    eligible = [[j for j, g in enumerate(gts) if iou(d.box, g) >= threshold] for d in dets]

    def best(i, used):
        if i == len(dets):
            return 0
        found = best(i + 1, used)
        for j in eligible[i]:
            if j not in used:
                found = max(found, 1 + best(i + 1, used | {j}))
        return found

    return best(0, frozenset())


def _random_instance(rng):
    def box():
        return _box(int(rng.integers(0, 6)), int(rng.integers(0, 6)),
                    int(rng.integers(1, 5)), int(rng.integers(1, 5)))

    gts = [box() for _ in range(int(rng.integers(0, 5)))]
    scores = rng.permutation(np.linspace(0.1, 0.9, 9))[:int(rng.integers(0, 5))]
    dets = [Detection(box(), float(s)) for s in scores]
    return dets, gts, float(rng.choice([0.1, 0.25, 0.5, 0.75]))


class TestDetection:
    def test_iou(self):
        assert iou(_box(0, 0, 2, 2), _box(1, 0, 2, 2)) == pytest.approx(1.0 / 3.0)
        assert iou(_box(0, 0, 2, 2), _box(2, 2, 2, 2)) == 0.0
        assert iou(_box(3, 4, 5, 6), _box(3, 4, 5, 6)) == 1.0

    def test_score_must_be_probability(self):
        with pytest.raises(ValueError):
            Detection(box=_box(0, 0, 1, 1), score=1.5)

    def test_precision_recall(self):
        gts = [_box(0, 0, 10, 10), _box(20, 20, 10, 10)]
        dets = [Detection(_box(0, 0, 10, 10), 0.9), Detection(_box(50, 50, 5, 5), 0.8)]
        assert precision_recall(dets, gts) == (0.5, 0.5)

    def test_iou_equal_to_threshold_is_a_match(self):
        gts = [_box(0, 0, 4, 4)]
        dets = [Detection(_box(0, 0, 4, 2), 0.7)]
        assert iou(dets[0].box, gts[0]) == 0.5
        assert precision_recall(dets, gts, 0.5) == (1.0, 1.0)
        assert precision_recall(dets, gts, 0.55) == (0.0, 0.0)

    def test_greedy_keeps_first_claim(self):
        # the top detection prefers A although only it could have taken B
        gts = [_box(0, 0, 4, 4), _box(4, 0, 4, 4)]
        dets = [Detection(_box(1, 0, 4, 4), 0.9), Detection(_box(0, 0, 4, 4), 0.8)]
        assert _optimal_true_positives(dets, gts, 0.1) == 2
        assert [hit for _, hit in match_detections(dets, gts, 0.1)] == [True, False]
        assert precision_recall(dets, gts, 0.1) == (0.5, 0.5)

    def test_against_exhaustive_matcher(self):
        rng = np.random.default_rng(2024)
        agreed = 0
        for _ in range(200):
            dets, gts, threshold = _random_instance(rng)
            matches = match_detections(dets, gts, threshold)
            greedy = sum(hit for _, hit in matches)
            optimal = _optimal_true_positives(dets, gts, threshold)
            expected = (greedy / len(dets) if dets else 0.0, greedy / len(gts) if gts else 0.0)
            assert precision_recall(dets, gts, threshold) == expected
            if greedy == optimal:
                agreed += 1
                continue
            # greedy is maximal: it loses at most half, and only where a
            # missed detection competed with an earlier claim
            assert optimal <= 2 * greedy
            assert any(not hit and any(iou(d.box, g) >= threshold for g in gts) for d, hit in matches)
        assert agreed > 150

    def test_no_ground_truth(self):
        assert precision_recall([], []) == (0.0, 0.0)
        assert average_precision([Detection(_box(0, 0, 1, 1), 0.5)], []) == 0.0

    def test_higher_score_claims_truth_first(self):
        gts = [_box(0, 0, 10, 10)]
        low = Detection(_box(0, 0, 10, 10), 0.4)
        high = Detection(_box(1, 1, 10, 10), 0.9)
        matches = match_detections([low, high], gts, 0.5)
        assert matches == [(high, True), (low, False)]

    def test_image_ids_are_kept_apart(self):
        gts = [GroundTruth(_box(0, 0, 10, 10), image_id=1)]
        det = Detection(_box(0, 0, 10, 10), 0.9, image_id=2)
        assert precision_recall([det], gts) == (0.0, 0.0)

    def test_interpolated_envelope(self):
        gts = [_box(0, 0, 10, 10), _box(20, 20, 10, 10)]
        dets = [Detection(_box(0, 0, 10, 10), 0.9),
                Detection(_box(50, 50, 5, 5), 0.8),
                Detection(_box(20, 20, 10, 10), 0.7)]
        assert average_precision(dets, gts) == pytest.approx(0.5 + 0.5 * 2.0 / 3.0)

    def test_mean_ap_partial_overlap(self):
        # IoU 0.6 passes the thresholds 0.50, 0.55 and 0.60 only
        dets = [Detection(_box(0, 0, 10, 6), 0.9)]
        assert mean_ap(dets, [_box(0, 0, 10, 10)]) == pytest.approx(0.3)
        assert len(IOU_THRESHOLDS) == 10

    def test_report_keys(self):
        report = detection_report([Detection(_box(0, 0, 10, 10), 0.9)], [_box(0, 0, 10, 10)])
        assert report['mAP@0.50:0.95'] == pytest.approx(1.0)
        assert list(report['ap_per_threshold'])[0] == "0.50"

    def test_load_files(self, tmp_path):
        (tmp_path / "dets.json").write_text(json.dumps({'detections': [
            {'image_id': 3, 'bbox': [1, 2, 3, 4], 'score': 0.5, 'category_id': 1},
            {'image_id': 3, 'bbox': [1, 2, 3, 4], 'score': 0.5, 'category_id': 2},
        ]}))
        (tmp_path / "gt.json").write_text(json.dumps({'annotations': [
            {'image_id': 3, 'bbox': [1, 2, 3, 4], 'category_id': 1},
        ]}))
        dets = load_detections(tmp_path / "dets.json")
        assert dets == [Detection(_box(1, 2, 3, 4), 0.5, image_id=3)]
        assert load_ground_truth(tmp_path / "gt.json") == [GroundTruth(_box(1, 2, 3, 4), image_id=3)]

    def test_malformed_detections(self, tmp_path):
        (tmp_path / "dets.json").write_text(json.dumps([{'bbox': [0, 0, 1, 1]}]))
        with pytest.raises(FormatError):
            load_detections(tmp_path / "dets.json")
        with pytest.raises(IoError):
            load_detections(tmp_path / "absent.json")


@pytest.fixture
def paired_set():
    cfg = PhantomConfig(image_size=32, diameter_range=(2, 3), nodule_count_weights=(0.0, 1.0))
    samples = generate_dataset(cfg, n=6, seed=0)
    return {f"s{i}": (s.image, s.mask) for i, s in enumerate(samples)}


@pytest.fixture
def metric_cfg():
    return MetricConfig(ssim_window=7, masked_margin=4, embed_size=16, embed_channels=(4, 8))


class TestReport:
    def test_self_comparison(self, paired_set, metric_cfg):
        report = evaluation_report(paired_set, paired_set, metric_cfg)
        assert report['n_paired'] == 6
        assert report['full_image']['psnr'] == math.inf
        assert report['full_image']['ssim'] == pytest.approx(1.0)
        assert report['full_image']['fid'] == pytest.approx(0.0, abs=1e-4)
        assert report['masked_region']['ssim'] == pytest.approx(1.0)
        assert validate_report(json_value(report)) == []

    def test_synthetic_masks_fall_back_to_real(self, paired_set, metric_cfg):
        synth = {k: (np.clip(image + 0.1, -1, 1), None) for k, (image, _) in paired_set.items()}
        report = evaluation_report(paired_set, synth, metric_cfg)
        assert report['masked_region']['fid'] is not None
        assert 0.0 < report['full_image']['psnr'] < math.inf

    def test_disjoint_ids(self, paired_set, metric_cfg):
        synth = {f"g{k}": v for k, v in paired_set.items()}
        with pytest.raises(PairingError):
            evaluation_report(paired_set, synth, metric_cfg)

    def test_empty_set(self, paired_set):
        with pytest.raises(EmptyInput):
            evaluation_report(paired_set, {})

    def test_json_value(self):
        assert json_value({'a': [math.inf, -math.inf, math.nan, 1.5]}) == {'a': ["inf", "-inf", None, 1.5]}

    def test_validation_flags_problems(self):
        problems = validate_report({'report_version': 1, 'full_image': {'fid': "x", 'psnr': 1.0, 'ssim': 1.0}})
        assert "full_image.fid is not a number" in problems
        assert "missing section masked_region" in problems
        assert "n_real must be an integer" in problems
