import json

import numpy as np
import pytest

from nodulegen.config import PhantomConfig
from nodulegen.errors import ConfigError, FormatError, InsufficientSamples, IoError
from nodulegen.maskcodec import nodule_bboxes, validate_mask
from nodulegen.models import DatasetManifest, ManifestEntry
from nodulegen.phantomdata import (export_coco, generate_dataset, generate_phantom_pair, kfold_split,
                                   load_coco, load_dataset, load_image_png, load_manifest,
                                   mix_datasets, normalize_image, sample_rng, save_image_png,
                                   split_dataset, validate_coco, write_dataset)


def _manifest(n, prefix="s"):
    return DatasetManifest(root=".", entries=[
        ManifestEntry(sample_id=f"{prefix}{i:05d}", mask_path=f"masks/{prefix}{i:05d}.png") for i in range(n)])


class TestGeneration:
    def test_samples_are_reproducible(self, phantom_cfg):
        a = generate_dataset(phantom_cfg, n=4, seed=9)
        b = generate_dataset(phantom_cfg, n=4, seed=9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mask, y.mask)
            np.testing.assert_array_equal(x.image, y.image)

    def test_streams_are_independent_of_order(self, phantom_cfg):
        third = generate_phantom_pair(sample_rng(9, 2), phantom_cfg)
        np.testing.assert_array_equal(third.mask, generate_dataset(phantom_cfg, n=3, seed=9)[2].mask)

    def test_masks_valid_and_boxes_match(self, phantom_cfg):
        for sample in generate_dataset(phantom_cfg, n=8, seed=0):
            assert validate_mask(sample.mask).valid
            assert sample.boxes == nodule_bboxes(sample.mask)
            assert sample.image.shape == (1, 32, 32)
            assert sample.image.min() >= -1.0 and sample.image.max() <= 1.0

    def test_ids(self, phantom_cfg):
        ids = [s.sample_id for s in generate_dataset(phantom_cfg, n=3, seed=0, prefix="g")]
        assert ids == ["g00000", "g00001", "g00002"]

    def test_nodules_sit_inside_lungs(self):
        cfg = PhantomConfig(image_size=64, diameter_range=(3, 6), nodule_count_weights=(0.0, 0.0, 1.0))
        for sample in generate_dataset(cfg, n=5, seed=3):
            assert len(sample.boxes) >= 1
            for box in sample.boxes:
                assert box.within(64, 64)

    @pytest.mark.parametrize("intensities,ok", [
        ((-1.0, 0.2, -0.6, -0.6, -0.9, 0.5), True),
        ((-1.0, 0.2, -0.6, -0.5, -0.9, 0.5), True),
        ((-1.0, 0.2, -0.6, -0.55, -0.9, 0.5), False),
        ((-1.0, 0.2, -0.6, -0.6, -0.6, 0.5), False),
        ((-1.0, 0.5, -0.6, -0.6, -0.9, 0.5), False),
    ])
    def test_class_levels_separated(self, intensities, ok):
        cfg = PhantomConfig(intensities=intensities, noise_sigma=0.05)
        if ok:
            cfg.validate()
        else:
            with pytest.raises(ConfigError) as info:
                cfg.validate()
            assert info.value.key == "phantom.intensities"

    def test_bad_diameter_range(self):
        with pytest.raises(ConfigError) as info:
            generate_dataset(PhantomConfig(image_size=16, diameter_range=(3, 30)), n=1)
        assert info.value.key == "phantom.diameter_range"


class TestNormalize:
    def test_window_endpoints(self):
        out = normalize_image(np.array([-2000.0, -1000.0, -300.0, 400.0, 900.0]))
        np.testing.assert_allclose(out, [-1.0, -1.0, 0.0, 1.0, 1.0])

    def test_empty_window(self):
        with pytest.raises(ConfigError):
            normalize_image(np.zeros(3), (5.0, 5.0))


class TestSplits:
    def test_four_to_one(self):
        split = split_dataset(_manifest(10), (4, 1), seed=0)
        assert len(split.split("train")) == 8
        assert len(split.split("test")) == 2

    def test_half_rounds_up(self):
        assert len(split_dataset(_manifest(5), (1, 1), seed=0).split("train")) == 3

    def test_keeps_one_test_sample(self):
        split = split_dataset(_manifest(2), (9, 1), seed=0)
        assert len(split.split("test")) == 1

    def test_seeded(self):
        a = split_dataset(_manifest(20), seed=4)
        b = split_dataset(_manifest(20), seed=4)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_too_small(self):
        with pytest.raises(InsufficientSamples):
            split_dataset(_manifest(1))

    def test_kfold_partition(self):
        folds = kfold_split(_manifest(11), k=5, seed=1)
        assert len(folds) == 5
        held = sorted(i for _, test in folds for i in test)
        assert held == _manifest(11).ids
        for train, test in folds:
            assert not set(train) & set(test)
            assert len(train) + len(test) == 11

    def test_kfold_needs_enough_samples(self):
        with pytest.raises(InsufficientSamples):
            kfold_split(_manifest(3), k=5)


class TestFiles:
    def test_image_png_quantization(self, tmp_path, rng):
        image = rng.uniform(-1, 1, size=(1, 8, 8)).astype(np.float32)
        back = load_image_png(save_image_png(image, tmp_path / "i.png"))
        assert back.shape == (1, 8, 8)
        assert np.abs(back - image).max() <= 1.0 / 65535 + 1e-6

    def test_dataset_on_disk(self, tmp_path, phantom_cfg):
        samples = generate_dataset(phantom_cfg, n=10, seed=1)
        manifest = write_dataset(tmp_path / "data", samples, seed=1, config_hash="abc")
        assert (tmp_path / "data" / "annotations.json").is_file()
        assert len(manifest.split("train")) == 8

        loaded, back = load_dataset(tmp_path / "data")
        assert loaded.ids == [s.sample_id for s in samples]
        assert loaded.config_hash == "abc"
        for original, restored in zip(samples, back):
            np.testing.assert_array_equal(original.mask, restored.mask)
        _, test = load_dataset(tmp_path / "data", split="test", load_images=False)
        assert len(test) == 2 and test[0].image is None

    def test_rewrite_is_byte_identical(self, tmp_path, phantom_cfg):
        samples = generate_dataset(phantom_cfg, n=4, seed=2)
        write_dataset(tmp_path / "a", samples, seed=2)
        write_dataset(tmp_path / "b", samples, seed=2)
        for name in ("manifest.json", "annotations.json", "masks/s00003.png", "images/s00003.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_tampered_boxes_detected(self, tmp_path, phantom_cfg):
        write_dataset(tmp_path / "d", generate_dataset(phantom_cfg, n=3, seed=0))
        path = tmp_path / "d" / "manifest.json"
        data = json.loads(path.read_text())
        data['samples'][0]['boxes'] = [[0, 0, 1, 1]]
        path.write_text(json.dumps(data))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IoError):
            load_manifest(tmp_path / "nothing")

    def test_duplicate_ids_rejected(self, tmp_path, phantom_cfg):
        write_dataset(tmp_path / "d", generate_dataset(phantom_cfg, n=2, seed=0))
        path = tmp_path / "d" / "manifest.json"
        data = json.loads(path.read_text())
        data['samples'][1]['id'] = data['samples'][0]['id']
        path.write_text(json.dumps(data))
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "d")


class TestCoco:
    def test_export_and_reload(self, tmp_path, phantom_cfg):
        samples = generate_dataset(phantom_cfg, n=5, seed=0)
        manifest = write_dataset(tmp_path / "d", samples)
        doc = json.loads((tmp_path / "d" / "annotations.json").read_text())
        assert validate_coco(doc) == []
        assert len(doc['annotations']) == sum(len(s.boxes) for s in samples)
        boxes = load_coco(tmp_path / "d" / "annotations.json")
        assert boxes == {s.sample_id: s.boxes for s in samples}
        assert export_coco(manifest) == doc

    def test_box_outside_image(self):
        doc = {
            'images': [{'id': 1, 'height': 8, 'width': 8, 'file_name': 'a.png'}],
            'annotations': [{'id': 1, 'image_id': 1, 'category_id': 1, 'bbox': [6, 6, 4, 4]}],
            'categories': [{'id': 1, 'name': 'nodule'}],
        }
        assert any("leaves its image" in p for p in validate_coco(doc))

    def test_missing_arrays(self):
        assert validate_coco({}) == ["missing array images", "missing array annotations",
                                     "missing array categories"]


class TestMixing:
    def test_real_test_split_is_untouched(self, tmp_path, phantom_cfg):
        real = write_dataset(tmp_path / "real", generate_dataset(phantom_cfg, n=10, seed=0), seed=0)
        synth = write_dataset(tmp_path / "synth", generate_dataset(phantom_cfg, n=6, seed=1, prefix="g"),
                              split_ratio=None, source="synthetic")
        mixed = mix_datasets(real, synth, 4, seed=3)
        assert len(mixed) == 14
        assert [e.sample_id for e in mixed.split("test")] == [e.sample_id for e in real.split("test")]
        assert sum(e.source == "synthetic" for e in mixed.entries) == 4

    def test_duplicate_ids(self, tmp_path, phantom_cfg):
        real = write_dataset(tmp_path / "real", generate_dataset(phantom_cfg, n=4, seed=0))
        other = write_dataset(tmp_path / "other", generate_dataset(phantom_cfg, n=4, seed=1),
                              split_ratio=None)
        with pytest.raises(FormatError):
            mix_datasets(real, other, 2, seed=0)

    def test_too_many_requested(self, tmp_path, phantom_cfg):
        real = write_dataset(tmp_path / "real", generate_dataset(phantom_cfg, n=4, seed=0))
        with pytest.raises(InsufficientSamples):
            mix_datasets(real, real, 5)
