"""
Main CLI entry point for the SIU3R field engine.
"""

import argparse
import json
import logging
import os
import sys
from datetime import datetime

import yaml
from colorama import Fore, Style, init as colorama_init

from .config_parser import ConfigParser
from .metrics import EVAL_MODES, METRIC_GROUPS
from .pipeline import FieldEngine, PipelineResult
from .scene_core import CameraModel
from .selftest import FAIL, ERROR, SelfTest, print_summary, save_results_to_csv
from .utils.exceptions import BundleFormatException, ConfigurationException, SIU3RException
from .utils.logger import logger, setup_logger

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


def usage_error(message: str) -> int:
    """Print the machine-readable usage error line; returns EXIT_USAGE."""
    print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
    return EXIT_USAGE


class EngineArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with EXIT_USAGE."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.exit(usage_error(message))


def _unit_interval(value: str) -> float:
    number = float(value)
    if not 0.0 < number < 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not inside (0, 1)")
    return number


def _band_edge(value: str) -> float:
    number = float(value)
    if not 0.0 <= number <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not inside [0, 1]")
    return number


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"{value} must be at least 1")
    return number


def parse_arguments(argv=None):
    """Parse command-line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Path to engine YAML configuration (default: built-in defaults)')
    common.add_argument('--profile', help='Override profile: reads .env.<profile> from --env-dir')
    common.add_argument('--env-dir', help='Directory containing .env files (default: current directory)')
    common.add_argument('--workers', type=_positive_int, help='Worker threads for tiles and pairs')
    common.add_argument('--out', help='Output directory (default: output/<command>_TIMESTAMP)')
    common.add_argument('--verbose', action='store_true', help='Enable verbose logging')

    parser = EngineArgumentParser(
        description='SIU3R field engine - lifting, rendering, evaluation, pairing and editing of Gaussian scenes'
    )
    commands = parser.add_subparsers(dest='command', required=True, parser_class=EngineArgumentParser)

    lift = commands.add_parser('lift', parents=[common], help='Lift 2D predictions onto the Gaussians')
    lift.add_argument('bundle', help='Scene bundle directory')
    lift.add_argument('--tau-c', type=_unit_interval, help='Query confidence threshold (default 0.5)')
    lift.add_argument('--tau', type=_unit_interval, help='Pixel probability threshold (default 0.3)')
    lift.add_argument('--no-aggregate', action='store_true', help='Skip multi-view mask aggregation')

    render = commands.add_parser('render', parents=[common], help='Render a bundle into one camera')
    render.add_argument('bundle', help='Scene bundle directory')
    source = render.add_mutually_exclusive_group()
    source.add_argument('--view', type=int, help='Context camera index (default 0)')
    source.add_argument('--target', type=int, help='Target camera index')
    source.add_argument('--camera', help='YAML camera record (fx, fy, cx, cy, pose_c2w)')
    render.add_argument('--size', type=_positive_int, nargs=2, metavar=('H', 'W'), help='Output size')

    metrics = commands.add_parser('metrics', parents=[common], help='Evaluate a prediction bundle')
    metrics.add_argument('pred', help='Prediction bundle directory')
    metrics.add_argument('gt', help='Ground-truth bundle directory')
    metrics.add_argument('--mode', choices=sorted(EVAL_MODES), default='context', help='Evaluation mode')
    metrics.add_argument('--require', nargs='*', choices=METRIC_GROUPS, default=[],
                         help='Metric groups that must be computed')

    pair = commands.add_parser('pair', parents=[common], help='Overlap matrix and banded pair sampling')
    pair.add_argument('bundles', nargs='+', help='Bundles with gt_depth and/or target_depth')
    pair.add_argument('--lo', type=_band_edge, help='Lower IoU band edge (default 0.3)')
    pair.add_argument('--hi', type=_band_edge, help='Upper IoU band edge (default 0.8)')
    pair.add_argument('--count', type=int, default=1, help='Number of pairs to sample')
    pair.add_argument('--seed', type=int, default=0, help='Sampling seed')

    edit = commands.add_parser('edit', parents=[common], help='Apply an edit plan')
    edit.add_argument('bundle', help='Scene bundle directory (lifted or with logits)')
    edit.add_argument('plan', help='YAML edit plan')

    loss = commands.add_parser('loss', parents=[common], help='Evaluate the training-loss terms')
    loss.add_argument('bundle', help='Prediction bundle directory')
    loss.add_argument('--gt', help='Ground-truth bundle (default: the prediction bundle)')
    loss.add_argument('--perceptual', help="Perceptual plugin as 'module:function'")

    selftest = commands.add_parser('selftest', parents=[common], help='Run every oracle check')
    selftest.add_argument('--cases', type=_positive_int, default=20, help='Random cases per check')
    selftest.add_argument('--seed', type=int, default=0, help='Random seed')

    return parser.parse_args(argv)


def generate_output_dir(command: str, custom_dir: str = None) -> str:
    """Generate output directory with timestamp."""
    if custom_dir:
        return custom_dir
    output_root = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'output')
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    return os.path.join(output_root, f"{command}_{timestamp}")


def load_camera(path: str) -> CameraModel:
    """Read a camera record from YAML."""
    try:
        with open(path, 'r') as f:
            record = yaml.safe_load(f)
        camera = CameraModel.from_record(record)
    except FileNotFoundError:
        raise ConfigurationException(f"Camera file not found: {path}")
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
        raise ConfigurationException(f"Malformed camera file {path}: {str(e)}")
    issues = camera.validate()
    if issues:
        raise ConfigurationException(f"Invalid camera in {path}: {'; '.join(issues)}")
    return camera


def build_overrides(args) -> dict:
    """Nested config values from the YAML file, the environment and the flags."""
    values = ConfigParser(args.config, args.env_dir, args.profile).load_values()
    flags = {
        ('lifting', 'tau_c'): getattr(args, 'tau_c', None),
        ('lifting', 'tau'): getattr(args, 'tau', None),
        ('raster', 'workers'): args.workers,
    }
    for (section, key), value in flags.items():
        if value is not None:
            values.setdefault(section, {})[key] = value
    return values


def print_result(result: PipelineResult):
    """Print the outputs and summary of a pipeline run."""
    print("\n" + "=" * 60)
    print(f"{result.command.upper()} SUMMARY")
    print("=" * 60)
    for key, value in result.summary.items():
        shown = f"{value:.6f}" if isinstance(value, float) else value
        print(f"{key:<18} {shown}")
    print("-" * 60)
    for kind, path in result.outputs.items():
        print(f"{Fore.GREEN}✓{Style.RESET_ALL} {kind:<16} {path}")
    print("=" * 60 + "\n")


def run_command(args) -> int:
    """Dispatch one subcommand; returns the exit code."""
    output_dir = generate_output_dir(args.command, args.out)

    if args.command == 'selftest':
        results = SelfTest(args.cases, args.seed).run()
        save_results_to_csv(results, os.path.join(output_dir, 'selftest_results.csv'))
        print_summary(results)
        bad = sum(1 for r in results if r.status in (FAIL, ERROR))
        return EXIT_DATA if bad else EXIT_OK

    engine = FieldEngine(build_overrides(args))
    if args.command == 'lift':
        result = engine.run_lift(args.bundle, output_dir, aggregate=not args.no_aggregate)
    elif args.command == 'render':
        camera = load_camera(args.camera) if args.camera else None
        size = tuple(args.size) if args.size else None
        result = engine.run_render(args.bundle, output_dir, args.view, args.target, camera, size)
    elif args.command == 'metrics':
        result = engine.run_metrics(args.pred, args.gt, output_dir, args.mode, args.require)
    elif args.command == 'pair':
        band = engine.config_for().pairing
        lo = band.band_lo if args.lo is None else args.lo
        hi = band.band_hi if args.hi is None else args.hi
        if not lo < hi:
            return usage_error(f"--lo {lo} must be below --hi {hi}")
        result = engine.run_pair(args.bundles, output_dir, lo, hi, args.count, args.seed)
    elif args.command == 'edit':
        result = engine.run_edit(args.bundle, args.plan, output_dir)
    else:
        result = engine.run_loss(args.bundle, output_dir, args.gt, args.perceptual)
    print_result(result)
    return EXIT_OK


def report_error(code: str, exc: Exception):
    """One machine-readable error line on stderr."""
    print(json.dumps({"error": code, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None):
    """Main execution function."""
    colorama_init()
    args = parse_arguments(argv)

    if args.verbose:
        setup_logger(level=logging.DEBUG)

    try:
        print("\n" + "=" * 60)
        print("SIU3R FIELD ENGINE")
        print("=" * 60)
        logger.info(f"Running command: {args.command}")
        sys.exit(run_command(args))

    except BundleFormatException as e:
        logger.error(f"Bundle error ({e.code}): {str(e)}")
        report_error(e.code, e)
        sys.exit(EXIT_DATA)
    except ConfigurationException as e:
        logger.error(f"Configuration error: {str(e)}")
        report_error("configuration", e)
        sys.exit(EXIT_DATA)
    except SIU3RException as e:
        logger.error(f"Engine error: {str(e)}")
        report_error("engine", e)
        sys.exit(EXIT_DATA)
    except ValueError as e:
        logger.error(f"Invalid input: {str(e)}")
        report_error("invalid_input", e)
        sys.exit(EXIT_DATA)
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}", exc_info=True)
        report_error("internal", e)
        sys.exit(EXIT_DATA)


if __name__ == '__main__':
    main()
