"""
Command-line interface for the nodule synthesis pipeline.

Usage:
    nodule-cli synth-data --n 64 --seed 1 --out runs/data
    nodule-cli train-maskgan --dataset runs/data --config run.toml --out runs/maskgan
    nodule-cli compose --mask-checkpoint ... --translator-checkpoint ... --n 16 --out runs/synth
    nodule-cli eval --real runs/data --synth runs/synth --out runs/eval
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from . import workflows
from .config import RunConfig
from .errors import NoduleGenError
from .stages.base import describe_error


class NoduleCLI:
    """Command-line interface for training, sampling and evaluating the two-stage pipeline."""

    def __init__(self):
        """Initialize CLI."""
        self.parser = self._create_parser()
        self.logger = self._setup_logging()

    def _common_options(self) -> argparse.ArgumentParser:
        common = argparse.ArgumentParser(add_help=False)
        config_group = common.add_argument_group('Configuration')
        config_group.add_argument(
            '--config', '-c',
            type=str,
            help='Path to TOML run configuration (defaults apply when omitted)'
        )
        config_group.add_argument(
            '--seed',
            type=int,
            help='Run seed (overrides run.seed)'
        )
        config_group.add_argument(
            '--out', '-o',
            type=str,
            help='Output directory (overrides run.out_dir; default from NODULEGEN_OUT)'
        )
        config_group.add_argument(
            '--report',
            type=str,
            help='Save the execution summary to a JSON file'
        )

        log_group = common.add_argument_group('Logging')
        log_group.add_argument(
            '-v', '--verbose',
            action='store_true',
            help='Verbose output (DEBUG level)'
        )
        log_group.add_argument(
            '-q', '--quiet',
            action='store_true',
            help='Quiet output (ERROR level only)'
        )
        log_group.add_argument(
            '--log-file',
            type=str,
            help='Write log to file'
        )
        return common

    def _create_parser(self) -> argparse.ArgumentParser:
        """Create argument parser."""
        parser = argparse.ArgumentParser(
            prog='nodule-cli',
            description='Two-stage lung-nodule synthesis - Command Line Interface',
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Phantom training data
  %(prog)s synth-data --n 64 --seed 1 --out runs/data

  # Stage 1 and stage 2 training
  %(prog)s train-maskgan --dataset runs/data --config run.toml --out runs/maskgan
  %(prog)s train-translator --dataset runs/data --config run.toml --out runs/translator

  # Synthetic pairs with annotations, then metrics
  %(prog)s compose --mask-checkpoint runs/maskgan/checkpoints/maskgan_0000150 \\
      --translator-checkpoint runs/translator/checkpoints/translator_0000500 --n 16 --out runs/synth
  %(prog)s eval --real runs/data --synth runs/synth --out runs/eval

  # Gradient checks
  %(prog)s gradcheck --select attention --out runs/gradcheck
            """
        )
        parser.add_argument(
            '--version',
            action='version',
            version=f'%(prog)s {__version__}'
        )
        common = self._common_options()
        commands = parser.add_subparsers(dest='command', metavar='COMMAND')

        cmd = commands.add_parser('synth-data', parents=[common], help='Generate a phantom dataset')
        cmd.add_argument('--n', type=int, help='Number of samples (default: phantom.n_samples)')

        cmd = commands.add_parser('train-maskgan', parents=[common], help='Train the stage-1 mask GAN')
        cmd.add_argument('--dataset', required=True, help='Dataset directory')
        cmd.add_argument('--resume', help='Checkpoint directory, or "latest" in the output directory')
        cmd.add_argument('--max-steps', type=int, help='Stop after this global step')

        cmd = commands.add_parser('sample-masks', parents=[common], help='Sample masks from a mask GAN checkpoint')
        cmd.add_argument('--checkpoint', required=True, help='Mask GAN checkpoint directory')
        cmd.add_argument('--n', type=int, required=True, help='Number of masks')

        cmd = commands.add_parser('train-translator', parents=[common], help='Train the stage-2 translator')
        cmd.add_argument('--dataset', required=True, help='Dataset directory')
        cmd.add_argument('--resume', help='Checkpoint directory, or "latest" in the output directory')
        cmd.add_argument('--stop-epoch', type=int, help='Stop once this many epochs are complete')

        cmd = commands.add_parser('translate', parents=[common], help='Translate mask PNGs into images')
        cmd.add_argument('--checkpoint', required=True, help='Translator checkpoint directory')
        cmd.add_argument('--masks', required=True, help='Directory of label PNGs')

        cmd = commands.add_parser('compose', parents=[common], help='Sample, translate and annotate synthetic pairs')
        cmd.add_argument('--mask-checkpoint', required=True, help='Mask GAN checkpoint directory')
        cmd.add_argument('--translator-checkpoint', required=True, help='Translator checkpoint directory')
        cmd.add_argument('--n', type=int, required=True, help='Number of pairs')

        cmd = commands.add_parser('eval', parents=[common], help='Image-quality (and detection) metrics report')
        cmd.add_argument('--real', required=True, help='Real dataset directory')
        cmd.add_argument('--synth', required=True, help='Synthetic dataset or image directory')
        cmd.add_argument('--detections', help='COCO-like detections JSON scored against the real annotations')

        cmd = commands.add_parser('gradcheck', parents=[common], help='Finite-difference gradient checks')
        cmd.add_argument('--select', default='all',
                         help='all, attention, maskgan, translator, or comma-separated target names')
        cmd.add_argument('--fixtures', action='store_true', help='Also write and verify operator fixtures')

        cmd = commands.add_parser('augment', parents=[common], help='Merge real and synthetic datasets')
        cmd.add_argument('--real', required=True, help='Real dataset directory')
        cmd.add_argument('--synth', required=True, help='Synthetic dataset directory')
        cmd.add_argument('--n', type=int, required=True, help='Number of synthetic samples to add')

        return parser

    def _setup_logging(self, verbose=False, quiet=False, log_file=None) -> logging.Logger:
        """Setup logging for the CLI and the library modules."""
        if quiet:
            level = logging.ERROR
        elif verbose:
            level = logging.DEBUG
        else:
            level = logging.INFO

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handlers: List[logging.Handler] = []
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        handlers.append(console_handler)

        if log_file:
            file_handler = logging.FileHandler(log_file)
            file_handler.setLevel(logging.DEBUG)  # Always debug in file
            file_handler.setFormatter(formatter)
            handlers.append(file_handler)

        for name in ('nodule_cli', 'nodulegen'):
            logger = logging.getLogger(name)
            logger.setLevel(logging.DEBUG if log_file else level)
            logger.handlers = list(handlers)
            logger.propagate = False
        return logging.getLogger('nodule_cli')

    def load_config(self, args: argparse.Namespace) -> RunConfig:
        """
        Load the TOML config (or defaults) and apply --seed / --out.

        Raises:
            ConfigError: unknown key or invalid value
        """
        if args.config:
            config = RunConfig.from_toml(Path(args.config))
            self.logger.info(f"Loaded configuration from: {args.config}")
        else:
            config = RunConfig()
        config.apply_overrides(seed=args.seed, out_dir=Path(args.out) if args.out else None)
        config.validate()
        return config

    def dispatch(self, args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
        """Run the workflow behind a parsed command."""
        log = self.logger
        command = args.command
        if command == 'synth-data':
            return workflows.cmd_synth_data(config, n=args.n, logger=log)
        if command == 'train-maskgan':
            return workflows.cmd_train_maskgan(config, Path(args.dataset), resume=args.resume,
                                               max_steps=args.max_steps, logger=log)
        if command == 'sample-masks':
            return workflows.cmd_sample_masks(config, Path(args.checkpoint), args.n, logger=log)
        if command == 'train-translator':
            return workflows.cmd_train_translator(config, Path(args.dataset), resume=args.resume,
                                                  stop_epoch=args.stop_epoch, logger=log)
        if command == 'translate':
            return workflows.cmd_translate(config, Path(args.checkpoint), Path(args.masks), logger=log)
        if command == 'compose':
            return workflows.cmd_compose(config, Path(args.mask_checkpoint),
                                         Path(args.translator_checkpoint), args.n, logger=log)
        if command == 'eval':
            detections = Path(args.detections) if args.detections else None
            return workflows.cmd_eval(config, Path(args.real), Path(args.synth), detections, logger=log)
        if command == 'gradcheck':
            return workflows.cmd_gradcheck(config, args.select, args.fixtures, logger=log)
        if command == 'augment':
            return workflows.cmd_augment(config, Path(args.real), Path(args.synth), args.n, logger=log)
        raise ValueError(f"Unknown command: {command}")

    def print_summary(self, summary: Dict[str, Any]):
        """Print execution summary."""
        print("\n" + "="*80)
        print("EXECUTION SUMMARY")
        print("="*80)

        success = summary.get('overall_success', False)
        status = "SUCCESS ✓" if success else "FAILED ✗"
        print(f"\nStatus: {status}")
        print(f"Output: {summary.get('out_dir')}")
        print(f"Duration: {summary.get('duration_seconds', 0):.2f} seconds")
        print(f"Stages: {summary.get('successful_stages', 0)}/{summary.get('total_stages', 0)} completed")

        print("\nStage Results:")
        for result in summary.get('stage_results', []):
            status_icon = "✓" if result['success'] else "✗"
            print(f"  {status_icon} {result['stage_name']}: {result['message']}")
            for error in result.get('errors', []):
                print(f"      ERROR: {error}")
            for warning in result.get('warnings', []):
                print(f"      WARNING: {warning}")

        print("="*80 + "\n")

    def save_report(self, summary: Dict[str, Any], report_path: str):
        """Save execution summary to file."""
        try:
            with open(report_path, 'w') as f:
                json.dump(summary, f, indent=2, default=str)
            self.logger.info(f"Report saved to: {report_path}")
        except Exception as e:
            self.logger.error(f"Failed to save report: {str(e)}")

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        Run the CLI.

        Args:
            argv: Command line arguments (for testing)

        Returns:
            Process exit code: 0 on success, 1 on any failure
        """
        args = self.parser.parse_args(argv)
        if not args.command:
            self.parser.print_help()
            return 1

        self.logger = self._setup_logging(
            verbose=args.verbose,
            quiet=args.quiet,
            log_file=args.log_file
        )

        try:
            config = self.load_config(args)
            summary = self.dispatch(args, config)
        except NoduleGenError as e:
            self.logger.error(f"{args.command} failed: {describe_error(e)}")
            return 1

        if not args.quiet:
            self.print_summary(summary)
        if args.report:
            self.save_report(summary, args.report)

        if not summary.get('overall_success'):
            self.logger.error(f"{args.command} failed: {summary.get('error', 'see stage results')}")
            return 1
        return 0


def main():
    """Main entry point."""
    cli = NoduleCLI()
    try:
        sys.exit(cli.run())
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        sys.exit(130)


if __name__ == '__main__':
    main()
