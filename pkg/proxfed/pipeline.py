"""
Experiment pipeline: build the instance, run, diagnose and export.
"""
import copy
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from proxfed.exporters.trace_exporter import TraceExporter
from proxfed.loaders.instance_io import load_instance, save_instance
from proxfed.loaders.synthetic import FederatedInstance, apply_overrides, generate_instance
from proxfed.problems.losses import LossKind, LossModel, certify_constants
from proxfed.processors.diagnostics import default_probes, lgd_fit
from proxfed.processors.engine import Algorithm, FederatedRunner, RunConfig, TraceLog, summary_metric
from proxfed.processors.stability import (
    efron_stein_check,
    grad_generalization_check,
    measure_argument_stability,
)
from proxfed.processors.verification import CheckResult, InvariantSuite
from proxfed.utils.config import Config
from proxfed.utils.errors import ConfigError
from proxfed.utils.numerics import StreamPurpose, derive_stream

logger = logging.getLogger(__name__)

SWEEP_AXES = ('T', 'I', 'b', 'bI')


def split_bI(value: int, I_max: int) -> Tuple[int, int]:
    """Split a product bI into (b, I) with I the largest divisor of value not above I_max."""
    if value < 1:
        raise ConfigError(f"bI must be >= 1, got {value}", field='values')
    I = max(d for d in range(1, min(value, I_max) + 1) if value % d == 0)
    return value // I, I


def loglog_slope(values: Sequence[float], metrics: Sequence[Optional[float]]) -> Optional[float]:
    """Least-squares slope of log(metric) against log(value); None with fewer than 2 usable points."""
    pairs = [(v, m) for v, m in zip(values, metrics) if m is not None and m > 0 and v > 0]
    if len(pairs) < 2:
        return None
    x = np.log([v for v, _ in pairs])
    y = np.log([m for _, m in pairs])
    return float(np.polyfit(x, y, 1)[0])


class ExperimentPipeline:
    """Runs the run / sweep / verify commands from a Config."""

    def __init__(self, config: Config, output_dir: Optional[str] = None):
        """
        Initialize the pipeline.

        Args:
            config: Configuration object
            output_dir: Overrides output.dir
        """
        self.config = config
        self.output_dir = output_dir or config.get('output.dir')
        self.exporter = TraceExporter(self.output_dir)
        self.instance: Optional[FederatedInstance] = None
        self.trace: Optional[TraceLog] = None
        self.summary: Dict = {}

    def run(self) -> bool:
        """
        Run the configured experiment and write trace.csv, summary.json and trace.svg.

        Returns:
            True if every output was written

        Raises:
            ConfigError: On an invalid configuration
            SolverError, DomainError: If the run fails
        """
        logger.info("Starting experiment pipeline")
        self.config.validate()

        # Step 1: Build the instance
        self.instance = self._build_instance()

        # Step 2: Federated run
        run_cfg = self.config.run_config()
        self.trace = FederatedRunner(self.instance, run_cfg).run()
        self.summary = dict(self.trace.summary)

        # Step 3: Diagnostics
        lgd = self._lgd()
        if lgd is not None:
            self.summary['lgd'] = lgd
        stability = self._stability() if self.config.get('stability.enabled') else None

        # Step 4: Export
        ok = self.exporter.export_trace(self.trace)
        ok = self.exporter.export_json(self.summary, 'summary.json') and ok
        if stability is not None:
            ok = self.exporter.export_json(stability, 'stability.json') and ok
        if self.config.get('output.svg'):
            column = 'grad_sq' if self.instance.loss.is_smooth else 'moreau_sq'
            values = [r.global_grad_sq if column == 'grad_sq' else r.moreau_grad_sq
                      for r in self.trace.records]
            ok = self.exporter.export_svg({column: values}, 'trace.svg',
                                          title=f"{run_cfg.algorithm.value} {column}") and ok
        if ok:
            logger.info("Pipeline completed successfully")
        return ok

    def sweep(self, axis: str, values: Sequence[int]) -> bool:
        """
        One run per value of a sweep axis, with schedules recomputed per value.

        Args:
            axis: One of T, I, b, bI
            values: Axis values

        Returns:
            True if every output was written

        Raises:
            ConfigError: On an invalid axis, value list or configuration
        """
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis '{axis}' (choose from {', '.join(SWEEP_AXES)})",
                              field='axis')
        if not values:
            raise ConfigError("no sweep values given", field='values')
        self.config.validate()
        base = self.config.run_config()
        if axis in ('b', 'bI') and base.algorithm is not Algorithm.FEDMSPP:
            raise ConfigError("b requires FedMSPP", field='axis')

        self.instance = self._build_instance()
        rows = []
        metric_name = None
        for value in values:
            cfg = self._sweep_config(base, axis, int(value))
            trace = FederatedRunner(self.instance, cfg).run()
            metric_name, metric = summary_metric(trace)
            rows.append({'value': int(value), 'T': cfg.T, 'I': cfg.I, 'b': cfg.b,
                         'eta': trace.summary['eta'], 'metric': metric})
            logger.info(f"Sweep {axis}={value}: {metric_name}={metric}")

        slope = loglog_slope([r['value'] for r in rows], [r['metric'] for r in rows])
        summary = {'axis': axis, 'values': [int(v) for v in values], 'metric': metric_name,
                   'slope': slope, 'runs': rows}
        ok = self.exporter.export_sweep(rows)
        ok = self.exporter.export_json(summary, 'sweep_summary.json') and ok
        if self.config.get('output.svg'):
            ok = self.exporter.export_svg({metric_name: [r['metric'] for r in rows]}, 'sweep.svg',
                                          title=f"{metric_name} vs {axis}",
                                          x_values=[r['value'] for r in rows], log_x=True) and ok
        self.summary = summary
        logger.info(f"Sweep over {axis} finished: slope={slope}")
        return ok

    def _sweep_config(self, base: RunConfig, axis: str, value: int) -> RunConfig:
        cfg = copy.deepcopy(base)
        if axis == 'T':
            cfg.T = value
        elif axis == 'I':
            cfg.I = value
        elif axis == 'b':
            cfg.b = value
        else:
            cfg.b, cfg.I = split_bI(value, min(base.I, self.instance.M))
        return cfg

    def verify(self) -> List[CheckResult]:
        """
        Run the invariant suite and write verify.json.

        Returns:
            One CheckResult per check
        """
        self.config.validate()
        self.instance = self._build_instance(save=False)
        suite = InvariantSuite(self.instance, self.config.run_config(),
                               self.config.verify_settings())
        results = suite.run_all()
        passed = all(r.passed for r in results)
        self.exporter.export_json({'passed': passed, 'checks': [r.to_dict() for r in results]},
                                  'verify.json')
        return results

    def _build_instance(self, save: bool = True) -> FederatedInstance:
        seed = int(self.config.get('run.seed'))
        overrides = self.config.get('instance.override_constants')
        path = self.config.get('instance.file')
        if path:
            instance = load_instance(path)
            if overrides:
                instance.constants = apply_overrides(instance.constants, overrides)
        else:
            instance = generate_instance(self.config.heterogeneity(), self.config.loss_model(),
                                         seed, overrides)
        if save and self.config.get('output.save_instance'):
            save_instance(instance, str(Path(self.output_dir) / 'instance.json'))
        return instance

    def _lgd(self) -> Optional[Dict]:
        if not (self.config.get('diagnostics.lgd') and self.instance.loss.is_smooth):
            return None
        rng = derive_stream(int(self.config.get('run.seed')), [StreamPurpose.PROBES])
        probes = default_probes(self.instance, self.trace.iterates, rng,
                                count=self.config.get('diagnostics.lgd_random_probes'),
                                radius=self.config.get('diagnostics.lgd_probe_radius'))
        report = lgd_fit(self.instance, probes)
        logger.info(f"LGD corners: {report.to_dict()}")
        return report.to_dict()

    def _stability(self) -> Dict:
        section = self.config.config['stability']
        seed = int(self.config.get('run.seed'))
        rng = derive_stream(seed, [StreamPurpose.STABILITY])
        result: Dict = {}
        loss = self.instance.loss
        if loss.is_smooth:
            data = self.instance.devices[0].data
            data = data.take(np.arange(min(section['N'], len(data))))
            L = certify_constants(loss, data).L
            eta = section['eta'] if section['eta'] is not None else 0.5 / L
            result['argument_stability'] = measure_argument_stability(
                data, loss, eta, section['solver_eps'], section['trials'], rng.spawn(0),
                threads=self.config.threads()).to_dict()
        population = self.instance.population
        if population is not None and loss.kind is LossKind.QUADRATIC:
            quadratic = LossModel(LossKind.QUADRATIC, loss.domain_radius)
            result['efron_stein'] = efron_stein_check(
                population, quadratic, section['N'], section['eta'], section['samples'],
                rng.spawn(1))._asdict()
            result['gradient_generalization'] = grad_generalization_check(
                population, quadratic, section['N'], section['eta'], section['samples'],
                rng.spawn(2))._asdict()
        return result
