import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest

from conftest import small_run_config
from nodulegen.cli import NoduleCLI
from nodulegen.maskcodec import load_mask_png, nodule_bboxes, validate_mask
from nodulegen.maskgan import MaskGanTrainer
from nodulegen.metrics import default_embedder, fid_from_images
from nodulegen.phantomdata import generate_dataset, load_coco, load_dataset, load_manifest, write_dataset
from nodulegen.translator import TranslatorTrainer
from nodulegen.workflows import (cmd_augment, cmd_compose, cmd_eval, cmd_gradcheck, cmd_sample_masks,
                                 cmd_synth_data, cmd_train_maskgan, cmd_train_translator, cmd_translate)

LOG = logging.getLogger("nodulegen.tests")


def _config(out_dir, **sections):
    return small_run_config(out_dir, **sections)


@pytest.fixture
def dataset(tmp_path):
    summary = cmd_synth_data(_config(tmp_path / "data"), n=10, logger=LOG)
    assert summary['overall_success'], summary.get('error')
    return tmp_path / "data"


@pytest.fixture
def cli():
    names = ('nodule_cli', 'nodulegen')
    saved = {n: (logging.getLogger(n).handlers[:], logging.getLogger(n).propagate,
                 logging.getLogger(n).level) for n in names}
    yield NoduleCLI()
    for name, (handlers, propagate, level) in saved.items():
        logger = logging.getLogger(name)
        logger.handlers, logger.propagate = handlers, propagate
        logger.setLevel(level)


class TestSynthData:
    def test_layout(self, dataset):
        assert len(list((dataset / "masks").glob("*.png"))) == 10
        assert len(list((dataset / "images").glob("*.png"))) == 10
        for name in ("manifest.json", "annotations.json", "effective_config.json"):
            assert (dataset / name).is_file()
        manifest = load_manifest(dataset)
        assert len(manifest.split("train")) == 8 and len(manifest.split("test")) == 2

    def test_boxes_follow_masks(self, dataset):
        manifest, samples = load_dataset(dataset)
        boxes = load_coco(dataset / "annotations.json")
        for sample in samples:
            assert validate_mask(sample.mask).valid
            assert boxes[sample.sample_id] == nodule_bboxes(sample.mask)

    def test_rerun_is_byte_identical(self, tmp_path, dataset):
        cmd_synth_data(_config(dataset), n=10, logger=LOG)
        cmd_synth_data(_config(tmp_path / "again"), n=10, logger=LOG)
        for name in ("manifest.json", "annotations.json", "masks/s00007.png", "images/s00007.png"):
            assert (dataset / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_effective_config_echo(self, dataset):
        doc = json.loads((dataset / "effective_config.json").read_text())
        assert doc['command'] == "synth-data"
        assert doc['config']['phantom']['image_size'] == 32
        assert doc['config_hash'] == _config(dataset).config_hash()

    def test_seed_changes_output(self, tmp_path, dataset):
        other = _config(tmp_path / "other")
        other.seed = 2
        cmd_synth_data(other, n=10, logger=LOG)
        assert (dataset / "masks/s00000.png").read_bytes() != (tmp_path / "other/masks/s00000.png").read_bytes()


class TestModelCommands:
    def test_sample_masks(self, tmp_path):
        config = _config(tmp_path / "sampled")
        ckpt = MaskGanTrainer(config.maskgan, seed=0).save(tmp_path / "maskgan_ckpt")
        summary = cmd_sample_masks(config, ckpt, 5, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        paths = sorted((tmp_path / "sampled" / "masks").glob("*.png"))
        assert [p.stem for p in paths] == [f"g{i:05d}" for i in range(5)]
        assert load_mask_png(paths[0]).shape == (32, 32)

    def test_translate_and_evaluate(self, tmp_path, dataset):
        config = _config(tmp_path / "translated")
        ckpt = TranslatorTrainer(config.translator, seed=0).save(tmp_path / "translator_ckpt")
        summary = cmd_translate(config, ckpt, dataset / "masks", logger=LOG)
        assert summary['overall_success'], summary.get('error')
        assert len(list((tmp_path / "translated" / "images").glob("*.png"))) == 10

        summary = cmd_eval(_config(tmp_path / "eval"), dataset, tmp_path / "translated", logger=LOG)
        assert summary['overall_success'], summary.get('error')
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert report['n_paired'] == 10
        assert report['full_image']['psnr'] < 60.0

    def test_translate_rejects_size_mismatch(self, tmp_path, dataset):
        config = _config(tmp_path / "translated", translator={'image_size': 16})
        ckpt = TranslatorTrainer(config.translator, seed=0).save(tmp_path / "translator_ckpt")
        summary = cmd_translate(config, ckpt, dataset, logger=LOG)
        assert not summary['overall_success']
        assert summary['error_key'] == "translator.image_size"

    def test_compose(self, tmp_path):
        config = _config(tmp_path / "synth")
        mask_ckpt = MaskGanTrainer(config.maskgan, seed=0).save(tmp_path / "m")
        translator_ckpt = TranslatorTrainer(config.translator, seed=0).save(tmp_path / "t")
        summary = cmd_compose(config, mask_ckpt, translator_ckpt, 4, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        manifest, samples = load_dataset(tmp_path / "synth")
        assert manifest.ids == ["g00000", "g00001", "g00002", "g00003"]
        for sample in samples:
            assert sample.image.shape == (1, 32, 32)
            assert sample.boxes == nodule_bboxes(sample.mask)

    def test_missing_checkpoint(self, tmp_path):
        summary = cmd_sample_masks(_config(tmp_path / "x"), tmp_path / "nowhere", 2, logger=LOG)
        assert not summary['overall_success']
        assert str(tmp_path / "nowhere") in summary['error']


def _output_files(root):
    """Relative path -> bytes for a command's outputs; the config echo names the out dir."""
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "effective_config.json"}


class TestReproducibility:
    @pytest.fixture
    def checkpoints(self, tmp_path):
        config = _config(tmp_path / "unused")
        return (MaskGanTrainer(config.maskgan, seed=0).save(tmp_path / "m"),
                TranslatorTrainer(config.translator, seed=0).save(tmp_path / "t"))

    def _assert_same(self, first, second):
        a, b = _output_files(first), _output_files(second)
        assert a and a.keys() == b.keys()
        for name in a:
            assert a[name] == b[name], name

    def test_sample_masks(self, tmp_path, checkpoints):
        for name in ("a", "b"):
            assert cmd_sample_masks(_config(tmp_path / name), checkpoints[0], 4, logger=LOG)['overall_success']
        self._assert_same(tmp_path / "a", tmp_path / "b")

    def test_translate(self, tmp_path, dataset, checkpoints):
        for name in ("a", "b"):
            summary = cmd_translate(_config(tmp_path / name), checkpoints[1], dataset / "masks", logger=LOG)
            assert summary['overall_success'], summary.get('error')
        self._assert_same(tmp_path / "a", tmp_path / "b")

    def test_compose(self, tmp_path, checkpoints):
        for name in ("a", "b"):
            summary = cmd_compose(_config(tmp_path / name), *checkpoints, 3, logger=LOG)
            assert summary['overall_success'], summary.get('error')
        self._assert_same(tmp_path / "a", tmp_path / "b")

    def test_eval(self, tmp_path, dataset, checkpoints):
        translated = tmp_path / "translated"
        assert cmd_translate(_config(translated), checkpoints[1], dataset / "masks", logger=LOG)['overall_success']
        for name in ("a", "b"):
            summary = cmd_eval(_config(tmp_path / name), dataset, translated, logger=LOG)
            assert summary['overall_success'], summary.get('error')
        self._assert_same(tmp_path / "a", tmp_path / "b")

    def test_execution_times_stay_out_of_outputs(self, tmp_path, dataset):
        summary = cmd_eval(_config(tmp_path / "eval"), dataset, dataset, logger=LOG)
        assert 'created_at' in summary['run'] and 'duration_seconds' in summary
        for content in _output_files(tmp_path / "eval").values():
            assert b"created_at" not in content and b"duration" not in content


class TestEvaluation:
    @pytest.fixture
    def nodule_dataset(self, tmp_path):
        config = _config(tmp_path / "data", phantom={'nodule_count_weights': [0.0, 1.0]})
        assert cmd_synth_data(config, n=10, logger=LOG)['overall_success']
        return tmp_path / "data"

    def test_self_comparison(self, tmp_path, nodule_dataset):
        summary = cmd_eval(_config(tmp_path / "eval"), nodule_dataset, nodule_dataset, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert report['full_image']['psnr'] == "inf"
        assert report['masked_region']['psnr'] == "inf"
        assert report['full_image']['ssim'] == pytest.approx(1.0)
        assert abs(report['full_image']['fid']) < 1e-3
        assert 'detection' not in report

    def test_perfect_detections(self, tmp_path, nodule_dataset):
        doc = json.loads((nodule_dataset / "annotations.json").read_text())
        detections = [{'image_id': a['image_id'], 'bbox': a['bbox'], 'score': 0.9, 'category_id': 1}
                      for a in doc['annotations']]
        path = tmp_path / "detections.json"
        path.write_text(json.dumps(detections))
        summary = cmd_eval(_config(tmp_path / "eval"), nodule_dataset, nodule_dataset, path, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        detection = json.loads((tmp_path / "eval" / "report.json").read_text())['detection']
        assert detection['n_ground_truth'] == len(detections) > 0
        assert detection['mAP@0.50:0.95'] == pytest.approx(1.0)
        assert detection['recall@0.50'] == pytest.approx(1.0)

    def test_disjoint_ids(self, tmp_path, nodule_dataset):
        other = tmp_path / "other"
        write_dataset(other, generate_dataset(_config(other).phantom, n=3, seed=0, prefix="g"))
        summary = cmd_eval(_config(tmp_path / "eval"), nodule_dataset, other, logger=LOG)
        assert not summary['overall_success']
        assert not (tmp_path / "eval" / "report.json").exists()


class TestGradCheckCommand:
    def test_attention_with_fixtures(self, tmp_path):
        summary = cmd_gradcheck(_config(tmp_path / "gc"), "attention", fixtures=True, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        report = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
        assert report['passed'] is True
        assert len(report['entries']) == 3
        assert any((tmp_path / "gc" / "fixtures").iterdir())

    def test_unknown_target(self, tmp_path):
        summary = cmd_gradcheck(_config(tmp_path / "gc"), "attention,bogus", logger=LOG)
        assert not summary['overall_success']
        assert summary['error_key'] == "gradcheck.select"


class TestAugment:
    def test_mix(self, tmp_path, dataset):
        synth = tmp_path / "synth"
        write_dataset(synth, generate_dataset(_config(synth).phantom, n=5, seed=4, prefix="g"),
                      split_ratio=None, source="synthetic")
        summary = cmd_augment(_config(tmp_path / "mixed"), dataset, synth, 3, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        mixed = load_manifest(tmp_path / "mixed")
        real = load_manifest(dataset)
        assert len(mixed) == 13
        assert [e.sample_id for e in mixed.split("test")] == [e.sample_id for e in real.split("test")]
        assert (tmp_path / "mixed" / "annotations.json").is_file()

    def test_too_many(self, tmp_path, dataset):
        summary = cmd_augment(_config(tmp_path / "mixed"), dataset, dataset, 50, logger=LOG)
        assert not summary['overall_success']


@pytest.mark.slow
class TestTraining:
    def test_maskgan_run(self, tmp_path, dataset):
        out = tmp_path / "maskgan"
        summary = cmd_train_maskgan(_config(out), dataset, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        lines = (out / "maskgan_loss.csv").read_text().splitlines()
        assert lines[0] == "# loss_log_version=1"
        assert len(lines) == 2 + 8
        assert (out / "checkpoints" / "maskgan_0000008").is_dir()
        assert (out / "samples" / "maskgan_032.png").is_file()

    def test_maskgan_resume_matches_uninterrupted(self, tmp_path, dataset):
        full, split = tmp_path / "full", tmp_path / "split"
        cmd_train_maskgan(_config(full), dataset, logger=LOG)
        first = cmd_train_maskgan(_config(split), dataset, max_steps=3, logger=LOG)
        assert first['outputs']['MaskGanTrainingStage']['steps'] == 3
        second = cmd_train_maskgan(_config(split), dataset, resume="latest", logger=LOG)
        assert second['overall_success'], second.get('error')
        log = "maskgan_loss.csv"
        assert (full / log).read_bytes() == (split / log).read_bytes()

        a = MaskGanTrainer.load(full / "checkpoints" / "maskgan_0000008").sample(4, seed=3)
        b = MaskGanTrainer.load(split / "checkpoints" / "maskgan_0000008").sample(4, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_translator_run(self, tmp_path, dataset):
        out = tmp_path / "translator"
        summary = cmd_train_translator(_config(out), dataset, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        stage = summary['outputs']['TranslatorTrainingStage']
        assert stage['epochs'] == 2
        assert np.isfinite(stage['final_l1'])
        assert len((out / "translator_loss.csv").read_text().splitlines()) == 2 + stage['steps']

    def test_translator_stop_epoch(self, tmp_path, dataset):
        out = tmp_path / "translator"
        summary = cmd_train_translator(_config(out), dataset, stop_epoch=1, logger=LOG)
        assert summary['outputs']['TranslatorTrainingStage']['epochs'] == 1


def _desk_config(out_dir, seed):
    return small_run_config(
        out_dir, seed=seed,
        maskgan={'target_resolution': 16, 'steps_per_resolution': 50},
        translator={'base_width': 16, 'max_width': 64, 'window_size': 4, 'batch_size': 1,
                    'epochs': 200, 'decay_start': 100, 'max_steps': 500})


@pytest.mark.slow
class TestDeskScale:
    @pytest.fixture(scope="class")
    def desk_data(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("desk") / "data"
        summary = cmd_synth_data(_desk_config(root, 1), n=64, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        return root

    def test_mask_gan_schedule(self, tmp_path, desk_data):
        out = tmp_path / "maskgan"
        summary = cmd_train_maskgan(_desk_config(out, 1), desk_data, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        stage = summary['outputs']['MaskGanTrainingStage']
        assert (stage['steps'], stage['resolution']) == (150, 16)
        rows = (out / "maskgan_loss.csv").read_text().splitlines()[2:]
        assert len(rows) == 150
        assert all(math.isfinite(float(v)) for row in rows for v in row.split(","))
        masks = MaskGanTrainer.load(Path(stage['final_checkpoint'])).sample(32, seed=5)
        assert masks.shape == (32, 16, 16)
        assert all(validate_mask(m).valid for m in masks)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_translator_training(self, tmp_path, seed):
        data = tmp_path / "data"
        assert cmd_synth_data(_desk_config(data, seed), n=64, logger=LOG)['overall_success']
        config = _desk_config(tmp_path / "translator", seed)
        summary = cmd_train_translator(config, data, logger=LOG)
        assert summary['overall_success'], summary.get('error')
        stage = summary['outputs']['TranslatorTrainingStage']
        assert stage['steps'] == 500
        assert stage['final_l1'] <= 0.7 * stage['initial_l1']

        manifest, samples = load_dataset(data)
        test_ids = {e.sample_id for e in manifest.split("test")}
        test = [s for s in samples if s.sample_id in test_ids]
        masks = [s.mask for s in test]
        real = [s.image for s in test]
        trained = TranslatorTrainer.load(Path(stage['final_checkpoint'])).translate(masks)
        untrained = TranslatorTrainer(config.translator, seed=seed).translate(masks)
        features = default_embedder(config.metrics)
        assert (fid_from_images(real, list(trained), features)
                < fid_from_images(real, list(untrained), features))


class TestCli:
    def test_no_command(self, cli, capsys):
        assert cli.run([]) == 1
        assert "usage" in capsys.readouterr().out

    def test_unknown_config_key(self, cli, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text("[maskgan]\nbogus = 1\n")
        code = cli.run(["synth-data", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "maskgan.bogus" in capsys.readouterr().err

    def test_unsupported_device(self, cli, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text('[run]\ndevice = "cuda"\n')
        code = cli.run(["synth-data", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "run.device" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_synth_data(self, cli, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text("[phantom]\nimage_size = 32\ndiameter_range = [2, 3]\n")
        report = tmp_path / "summary.json"
        code = cli.run(["synth-data", "--config", str(config), "--n", "4", "--seed", "3",
                        "--out", str(tmp_path / "o"), "--report", str(report), "-q"])
        assert code == 0
        assert len(load_manifest(tmp_path / "o")) == 4
        assert json.loads(report.read_text())['overall_success'] is True
        echoed = json.loads((tmp_path / "o" / "effective_config.json").read_text())
        assert echoed['config']['run']['seed'] == 3

    def test_failed_command_exit_code(self, cli, tmp_path, capsys):
        code = cli.run(["augment", "--real", str(tmp_path / "a"), "--synth", str(tmp_path / "b"),
                        "--n", "1", "--out", str(tmp_path / "o"), "-q"])
        assert code == 1
        assert "augment failed" in capsys.readouterr().err
