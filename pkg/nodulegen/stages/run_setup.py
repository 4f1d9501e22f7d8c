"""
Stage that prepares the output directory and records the effective config.
"""
import json

from .base import PipelineStage
from ..config import PipelineConfig
from ..models import ProcessingResult, RunContext


def write_json(path, data):
    """Sorted, indented JSON with a trailing newline, so reruns are byte-identical."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


class EffectiveConfigStage(PipelineStage):
    """
    Create the run directory and echo the effective configuration into it.

    The file holds the merged TOML + CLI settings, the command name and the
    config hash; no timestamps.
    """

    def process(self, context: RunContext, result: ProcessingResult, **kwargs):
        if not self.create_directory(context.out_dir, result):
            return
        config = context.config
        document = {
            'command': context.command,
            'config': config.to_dict(),
            'config_hash': config.config_hash(),
            'formats': PipelineConfig.to_dict(),
            'inputs': {k: str(v) for k, v in sorted(kwargs.items())
                       if isinstance(v, (str, int, float)) or hasattr(v, 'as_posix')},
        }
        path = write_json(context.out_dir / PipelineConfig.EFFECTIVE_CONFIG_NAME, document)
        self.logger.info(f"Effective config written to {path}")
        result.data['effective_config'] = str(path)
        result.data['config_hash'] = document['config_hash']
