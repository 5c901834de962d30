"""
Main entry point for proxfed.
"""
import argparse
import logging
import sys

from proxfed.pipeline import ExperimentPipeline
from proxfed.utils.config import Config
from proxfed.utils.errors import ConfigError, DomainError, SolverError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INTERRUPTED = 130


def setup_logging(level: str = 'INFO'):
    """
    Setup logging configuration.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
    """
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


def parse_arguments(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description='Simulate FedProx / FedMSPP federated optimization and check its guarantees',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Run the configured experiment
  python -m proxfed.main run config.yaml

  # Rate check over the number of rounds
  python -m proxfed.main sweep config.yaml --axis T --values 256 1024 4096

  # Run every property check
  python -m proxfed.main verify config.yaml

  # Generate example configuration
  python -m proxfed.main --generate-config example_config.yaml
        """
    )

    parser.add_argument(
        '--generate-config',
        type=str,
        metavar='FILE',
        help='Generate example configuration file and exit'
    )

    parser.add_argument(
        '--log-level',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        default=None,
        help='Logging level (default: logging.level from the config, else INFO)'
    )

    parser.add_argument(
        '--seed',
        type=int,
        help='Override run.seed'
    )

    parser.add_argument(
        '--threads',
        type=int,
        help='Override run.threads (default: PROXFED_THREADS or 1)'
    )

    parser.add_argument(
        '--output-dir', '-o',
        type=str,
        help='Override output.dir'
    )

    subparsers = parser.add_subparsers(dest='command')

    run_parser = subparsers.add_parser('run', help='Run one experiment')
    run_parser.add_argument('config', type=str, help='Path to JSON or YAML configuration file')

    sweep_parser = subparsers.add_parser('sweep', help='Run one experiment per axis value')
    sweep_parser.add_argument('config', type=str, help='Path to JSON or YAML configuration file')
    sweep_parser.add_argument('--axis', required=True, help='Sweep axis: T, I, b or bI')
    sweep_parser.add_argument('--values', required=True, nargs='+', type=int,
                              help='Axis values')

    verify_parser = subparsers.add_parser('verify', help='Run all property checks')
    verify_parser.add_argument('config', type=str, help='Path to JSON or YAML configuration file')

    return parser.parse_args(argv)


def generate_example_config(output_path: str) -> bool:
    """
    Generate an example configuration file.

    Args:
        output_path: Path to save the example config

    Returns:
        True if successful
    """
    config = Config()
    if config.save(output_path):
        print(f"Example configuration saved to {output_path}")
        return True
    print(f"Failed to save configuration to {output_path}")
    return False


def load_config(args) -> Config:
    """Load the config file and apply command line overrides."""
    config = Config.from_file(args.config)
    if args.seed is not None:
        config.set('run.seed', args.seed)
    if args.threads is not None:
        config.set('run.threads', args.threads)
    if args.output_dir:
        config.set('output.dir', args.output_dir)
    return config


def cmd_run(config: Config) -> int:
    pipeline = ExperimentPipeline(config)
    return EXIT_OK if pipeline.run() else EXIT_FAILURE


def cmd_sweep(config: Config, axis: str, values) -> int:
    pipeline = ExperimentPipeline(config)
    return EXIT_OK if pipeline.sweep(axis, values) else EXIT_FAILURE


def cmd_verify(config: Config) -> int:
    pipeline = ExperimentPipeline(config)
    results = pipeline.verify()
    for result in results:
        status = 'PASS' if result.passed else 'FAIL'
        print(f"{status}  {result.name}: {result.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_FAILURE
    print(f"All {len(results)} checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    """Main function."""
    args = parse_arguments(argv)

    # Generate config if requested
    if args.generate_config:
        return EXIT_OK if generate_example_config(args.generate_config) else EXIT_FAILURE

    if args.command is None:
        print("No command given; use run, sweep or verify (see --help)")
        return EXIT_CONFIG

    setup_logging(args.log_level or 'INFO')
    logger = logging.getLogger(__name__)

    try:
        logger.info(f"Loading configuration from {args.config}")
        config = load_config(args)
        if args.log_level is None:
            setup_logging(str(config.get('logging.level', 'INFO')))

        if args.command == 'run':
            return cmd_run(config)
        if args.command == 'sweep':
            return cmd_sweep(config, args.axis, args.values)
        return cmd_verify(config)

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (SolverError, DomainError) as e:
        logger.error(f"Run failed: {e}")
        return EXIT_SOLVER
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_INTERRUPTED
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
