#!/usr/bin/env python3
"""
Demo script for proxfed - compares FedProx and FedMSPP on a synthetic
heterogeneous logistic regression instance.
"""
import logging
import shutil
import sys
import tempfile
from pathlib import Path

# Setup path
sys.path.insert(0, str(Path(__file__).parent))

from proxfed.pipeline import ExperimentPipeline
from proxfed.utils.config import Config

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

DEMO_CONFIG = {
    'instance': {'loss': 'logistic', 'M': 8, 'p': 5, 'base_n': 40, 'shift': 1.0},
    'run': {'T': 50, 'I': 4, 'b': 5, 'seed': 1},
}


def run_algorithm(demo_dir: Path, algorithm: str, schedule: str) -> dict:
    config = Config(DEMO_CONFIG)
    config.set('run.algorithm', algorithm)
    config.set('run.schedule', schedule)
    pipeline = ExperimentPipeline(config, str(demo_dir / algorithm))
    if not pipeline.run():
        raise RuntimeError(f"{algorithm} run failed to write its outputs")
    return pipeline.summary


def create_demo(keep: bool = False) -> bool:
    """Run both algorithms and print their final gradient norms."""
    logger.info("=" * 70)
    logger.info("proxfed demo - FedProx vs FedMSPP")
    logger.info("=" * 70)

    demo_dir = Path(tempfile.mkdtemp(prefix='proxfed_demo_'))
    logger.info(f"Demo directory: {demo_dir}")

    try:
        logger.info("\n[Step 1/2] FedProx with full local prox solves...")
        fedprox = run_algorithm(demo_dir, 'FedProx', 'SmoothFedProx')

        logger.info("\n[Step 2/2] FedMSPP with minibatch prox solves (b=5)...")
        fedmspp = run_algorithm(demo_dir, 'FedMSPP', 'SmoothFedMSPP')

        logger.info("\nSummary")
        logger.info("  " + "=" * 60)
        for name, summary in (('FedProx', fedprox), ('FedMSPP', fedmspp)):
            logger.info(f"  {name:8s} eta={summary['eta']:.4g}  "
                        f"avg ||grad||^2={summary['avg_grad_sq']:.4g}")
            lgd = summary.get('lgd')
            if lgd:
                logger.info(f"           LGD corners: {lgd}")
        logger.info("  " + "=" * 60)
        if keep:
            logger.info(f"\nOutputs are in: {demo_dir}")
        else:
            logger.info("\nOutputs are removed on exit; rerun with --keep to inspect them")
        return True

    except Exception as e:
        logger.error(f"Demo failed with error: {e}", exc_info=True)
        return False
    finally:
        if not keep:
            shutil.rmtree(demo_dir, ignore_errors=True)


def main():
    """Main entry point."""
    try:
        success = create_demo(keep='--keep' in sys.argv)
        return 0 if success else 1
    except KeyboardInterrupt:
        logger.info("\nDemo interrupted by user")
        return 130


if __name__ == '__main__':
    sys.exit(main())
