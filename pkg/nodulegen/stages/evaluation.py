"""
Evaluation stages: image-quality report, optional detection metrics, and
the gradient-check harness.
"""
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .base import PipelineStage
from .run_setup import write_json
from ..attention import save_operator_fixtures, verify_operator_fixtures
from ..config import PipelineConfig
from ..errors import IoError
from ..gradcheck import run_gradcheck
from ..metrics import (detection_report, evaluation_report, json_value, load_detections,
                       load_ground_truth, validate_report)
from ..models import ProcessingResult, RunContext
from ..phantomdata import load_dataset, load_image_png

ImageSet = Dict[str, Tuple[np.ndarray, Optional[np.ndarray]]]


def load_image_set(root: Path) -> ImageSet:
    """
    Images of a directory keyed by sample id.

    A dataset directory (with manifest.json) yields (image, mask) pairs;
    otherwise every PNG in images/ (or the directory itself) is read
    without a mask.
    """
    root = Path(root)
    if (root / PipelineConfig.MANIFEST_NAME).is_file():
        _, samples = load_dataset(root)
        return {s.sample_id: (s.image, s.mask) for s in samples if s.image is not None}
    directory = root / PipelineConfig.IMAGE_DIR if (root / PipelineConfig.IMAGE_DIR).is_dir() else root
    if not directory.is_dir():
        raise IoError(f"No such image directory: {root}", path=root)
    return {p.stem: (load_image_png(p), None) for p in sorted(directory.glob("*.png"))}


class EvaluationStage(PipelineStage):
    """FID / PSNR / SSIM of a synthetic directory against a real one."""

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - real: real dataset directory
                - synth: synthetic dataset or image directory
        """
        real_dir = self.require(kwargs, 'real', result)
        synth_dir = self.require(kwargs, 'synth', result)
        if real_dir is None or synth_dir is None:
            return
        real, synth = load_image_set(Path(real_dir)), load_image_set(Path(synth_dir))
        self.logger.info(f"Evaluating {len(synth)} synthetic against {len(real)} real images")
        report = evaluation_report(real, synth, context.config.metrics)
        result.data.update({
            'n_real': report['n_real'],
            'n_synth': report['n_synth'],
            'n_paired': report['n_paired'],
        })
        result.artifacts['report'] = report


class DetectionEvaluationStage(PipelineStage):
    """Precision / recall / mAP of external detections against the real annotations."""

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - detections: COCO-like detections JSON
                - real: dataset directory whose annotations.json is the ground truth
                - report: report dict to extend
        """
        path = self.require(kwargs, 'detections', result)
        real_dir = self.require(kwargs, 'real', result)
        report = self.require(kwargs, 'report', result)
        if path is None or real_dir is None or report is None:
            return
        detections = load_detections(Path(path))
        ground_truth = load_ground_truth(Path(real_dir) / PipelineConfig.ANNOTATIONS_NAME)
        report['detection'] = detection_report(detections, ground_truth)
        self.logger.info(f"Detection mAP@0.50:0.95 = {report['detection']['mAP@0.50:0.95']:.4f}")
        result.data['detection'] = report['detection']


class ReportWriteStage(PipelineStage):
    """Write the metrics report JSON after checking it against the report schema."""

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        report = self.require(kwargs, 'report', result)
        if report is None:
            return
        document = json_value(report)
        for problem in validate_report(document):
            result.add_error(f"report: {problem}")
        path = write_json(context.out_dir / PipelineConfig.REPORT_NAME, document)
        self.logger.info(f"Report written to {path}")
        result.data['report'] = str(path)
        result.data['full_image'] = document['full_image']
        result.data['masked_region'] = document['masked_region']


class GradCheckStage(PipelineStage):
    """Run the finite-difference checks and write gradcheck.json; fails when any target fails."""

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        """
        Args:
            **kwargs:
                - select: "all", a group (attention, maskgan, translator) or target names
        """
        report = run_gradcheck(kwargs.get('select') or 'all', context.seed)
        document = json_value(report.to_dict())
        path = write_json(context.out_dir / PipelineConfig.GRADCHECK_REPORT_NAME, document)
        for entry in report.entries:
            if not entry.passed:
                result.add_error(f"{entry.name}: relative error {entry.rel_error:.3e} "
                                 f"({entry.n_checked} checked, {entry.n_skipped} skipped)")
        result.data.update({
            'report': str(path),
            'passed': report.passed,
            'entries': [e.to_dict() for e in report.entries],
        })
        result.artifacts['gradcheck'] = report


class OperatorFixtureStage(PipelineStage):
    """Write attention operator fixtures and re-evaluate them."""

    TOLERANCE = 1e-12

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        directory = context.out_dir / PipelineConfig.FIXTURE_DIR
        save_operator_fixtures(directory, context.seed)
        diffs = verify_operator_fixtures(directory)
        for name, diff in diffs.items():
            if diff > self.TOLERANCE:
                result.add_error(f"{name} fixture differs by {diff:.3e}")
        result.data.update({'fixtures': str(directory), 'max_abs_diff': diffs})
