"""
Pipeline orchestrator for chaining stages together.
Provides the main execution framework every CLI command runs on.
"""
import logging
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

from .models import ProcessingResult, RunContext
from .stages.base import PipelineStage


class Pipeline:
    """
    Main pipeline orchestrator.

    Chains together multiple stages and executes them in sequence,
    handing each stage's data and artifacts on to the stages after it.
    """

    def __init__(
        self,
        name: str,
        stages: Optional[List[PipelineStage]] = None,
        logger: Optional[logging.Logger] = None
    ):
        """
        Initialize pipeline.

        Args:
            name: Pipeline name
            stages: List of pipeline stages (can be added later)
            logger: Logger instance
        """
        self.name = name
        self.stages = stages or []
        self.logger = logger or self._create_logger()
        self.results: List[ProcessingResult] = []
        self.data: Dict[str, Any] = {}

    def _create_logger(self) -> logging.Logger:
        """Create logger for this pipeline."""
        logger = logging.getLogger(f"pipeline.{self.name}")
        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )
            handler.setFormatter(formatter)
            logger.addHandler(handler)
            logger.setLevel(logging.INFO)
        return logger

    def add_stage(self, stage: PipelineStage):
        """Add a stage to the pipeline."""
        self.stages.append(stage)
        self.logger.debug(f"Added stage: {stage.name}")

    def _should_run(self, stage: PipelineStage, context: RunContext, pipeline_data: Dict[str, Any]) -> bool:
        return True

    def _accumulate(self, stage: PipelineStage, result: ProcessingResult, pipeline_data: Dict[str, Any]):
        # artifacts are in-memory hand-offs (samples, trainers, manifests)
        pipeline_data.update({k: v for k, v in result.artifacts.items() if k != 'exception'})
        if result.data:
            pipeline_data[f'{stage.name}_output'] = result.data

    def execute(
        self,
        context: RunContext,
        stop_on_error: bool = True,
        **kwargs
    ) -> Dict[str, Any]:
        """
        Execute the complete pipeline.

        Args:
            context: Run context shared by all stages
            stop_on_error: Stop execution if a stage fails
            **kwargs: Initial pipeline data passed to all stages

        Returns:
            Dictionary with execution summary
        """
        self.logger.info(f"Starting pipeline: {self.name}")
        self.results = []

        start_time = datetime.now()
        context.processing_status = "processing"

        pipeline_data = dict(kwargs)

        for i, stage in enumerate(self.stages):
            if not self._should_run(stage, context, pipeline_data):
                self.logger.info(
                    f"Skipping stage {i+1}/{len(self.stages)}: {stage.name} (condition not met)"
                )
                self.results.append(ProcessingResult(
                    stage_name=stage.name,
                    success=True,
                    message="Stage skipped (condition not met)"
                ))
                continue

            self.logger.info(f"Executing stage {i+1}/{len(self.stages)}: {stage.name}")
            result = stage.execute(context, **pipeline_data)
            self.results.append(result)
            self._accumulate(stage, result, pipeline_data)

            if not result.success:
                context.processing_status = "error"

                if stop_on_error:
                    self.logger.error(
                        f"Pipeline stopped due to error in stage: {stage.name}"
                    )
                    break
                else:
                    self.logger.warning(
                        f"Stage {stage.name} failed but continuing pipeline"
                    )

        if context.processing_status != "error":
            context.processing_status = "complete"

        self.data = pipeline_data
        duration = (datetime.now() - start_time).total_seconds()
        summary = self._build_summary(context, duration)

        self.logger.info(f"Pipeline {self.name} completed in {duration:.2f} seconds")
        self.logger.info(f"Status: {context.processing_status}")

        return summary

    def _build_summary(self, context: RunContext, duration: float) -> Dict[str, Any]:
        total_stages = len(self.stages)
        successful_stages = sum(1 for r in self.results if r.success)

        return {
            'pipeline_name': self.name,
            'run': context.to_dict(),
            'duration_seconds': duration,
            'total_stages': total_stages,
            'successful_stages': successful_stages,
            'failed_stages': total_stages - successful_stages,
            'overall_success': context.processing_status == "complete",
            'stage_results': [r.to_dict() for r in self.results]
        }

    def first_exception(self) -> Optional[BaseException]:
        """The exception behind the first failed stage, if it raised one."""
        for result in self.results:
            if not result.success and 'exception' in result.artifacts:
                return result.artifacts['exception']
        return None

class PipelineBuilder:
    """
    Builder class for constructing pipelines.

    Provides a fluent interface for building pipelines.
    """

    def __init__(self, name: str, conditional: bool = False, logger: Optional[logging.Logger] = None):
        self.pipeline = ConditionalPipeline(name, logger=logger) if conditional else Pipeline(name, logger=logger)

    def add_stage(self, stage: PipelineStage,
                  condition_fn: Optional[Callable[[RunContext, Dict[str, Any]], bool]] = None) -> 'PipelineBuilder':
        """
        Add a stage to the pipeline.

        Args:
            stage: Stage to add
            condition_fn: Optional predicate on (context, pipeline data); needs a conditional builder

        Returns:
            Self for chaining
        """
        if condition_fn is None:
            self.pipeline.add_stage(stage)
        elif isinstance(self.pipeline, ConditionalPipeline):
            self.pipeline.add_conditional_stage(stage, condition_fn)
        else:
            raise TypeError("condition_fn requires PipelineBuilder(..., conditional=True)")
        return self

    def build(self) -> Pipeline:
        """Build and return the pipeline."""
        return self.pipeline


class ConditionalPipeline(Pipeline):
    """
    Pipeline that can skip stages based on conditions.

    A condition sees the run context and the data accumulated so far.
    """

    def __init__(self, name: str, **kwargs):
        super().__init__(name, **kwargs)
        self.stage_conditions: Dict[str, Callable[[RunContext, Dict[str, Any]], bool]] = {}

    def add_conditional_stage(
        self,
        stage: PipelineStage,
        condition_fn: Callable[[RunContext, Dict[str, Any]], bool]
    ):
        """
        Add a stage with a condition function.

        Args:
            stage: Pipeline stage
            condition_fn: Function that takes (context, pipeline data)
                         and returns True if stage should run
        """
        self.add_stage(stage)
        self.stage_conditions[stage.name] = condition_fn

    def _should_run(self, stage: PipelineStage, context: RunContext, pipeline_data: Dict[str, Any]) -> bool:
        condition_fn = self.stage_conditions.get(stage.name)
        return condition_fn is None or bool(condition_fn(context, pipeline_data))
