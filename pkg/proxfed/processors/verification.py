"""
Property checks behind the `verify` command.

Each check builds what it needs from the configured instance (or a small
fixture derived from the same seed), runs it, and reports a named pass/fail
line. Constant checks use the configured instance as-is, so overridden
constants are caught there.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from proxfed.loaders.synthetic import (
    DeviceDataset,
    FederatedInstance,
    HeterogeneityConfig,
    generate_instance,
    homogeneous_config,
)
from proxfed.problems.losses import (
    Batch,
    LossKind,
    LossModel,
    batch_risk,
    batch_risk_and_grad,
    certify_constants,
    curvature_coefficient,
    per_example_grads,
)
from proxfed.processors.diagnostics import (
    MoreauConfig,
    direction_sampling_check,
    global_grad_sq,
    lgd_fit,
    moreau_envelope_value,
    moreau_grad,
)
from proxfed.processors.engine import (
    Algorithm,
    EpsPolicy,
    RunConfig,
    ScheduleKind,
    run,
)
from proxfed.processors.prox_oracle import (
    ProxSubproblem,
    prox_nonsmooth_subgrad,
    prox_quadratic_exact,
    prox_smooth_gd,
)
from proxfed.processors.stability import (
    efron_stein_check,
    grad_generalization_check,
    measure_argument_stability,
)
from proxfed.utils.errors import ProxFedError
from proxfed.utils.numerics import RngStream, StreamPurpose, derive_stream, sq_norm

logger = logging.getLogger(__name__)

TOL = 1e-9


@dataclass
class VerifySettings:
    """Sizes of the verification fixtures."""
    rounds: int = 50
    nonsmooth_rounds: int = 20
    nonsmooth_inner_K: int = 100000
    frozen_states: int = 3
    direction_trials: int = 10000
    probe_count: int = 200
    soundness_trials: int = 100
    stability_trials: int = 200
    stability_N: int = 20
    mc_samples: int = 200
    homogeneous: Dict = field(default_factory=lambda: {'M': 8, 'p': 10, 'n': 100, 'T': 100})


@dataclass
class CheckResult:
    """Outcome of one named check."""
    name: str
    passed: bool
    detail: str = ''
    values: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {'name': self.name, 'passed': self.passed, 'detail': self.detail,
                'values': self.values}


class InvariantSuite:
    """Runs every property check against an instance and run config."""

    def __init__(self, instance: FederatedInstance, run_cfg: RunConfig,
                 settings: Optional[VerifySettings] = None):
        """
        Initialize the suite.

        Args:
            instance: Configured instance (constants used as given)
            run_cfg: Configured run (seed and sizes are reused)
            settings: Fixture sizes
        """
        self.instance = instance
        self.run_cfg = run_cfg
        self.settings = settings or VerifySettings()
        self.seed = run_cfg.seed
        self.rng = derive_stream(self.seed, [StreamPurpose.VERIFY])
        self.M = instance.M
        self.p = instance.p
        self.base_n = max(len(d.data) for d in instance.devices)

    def checks(self) -> Dict[str, Callable[[], CheckResult]]:
        return {
            'constants_lipschitz': self.check_lipschitz,
            'constants_smoothness': self.check_smoothness,
            'constants_weak_convexity': self.check_weak_convexity,
            'gradient_finite_difference': self.check_finite_difference,
            'oracle_certificate_soundness': self.check_certificate_soundness,
            'oracle_three_point': self.check_three_point,
            'homogeneous_reduction': self.check_homogeneous_reduction,
            'determinism': self.check_determinism,
            'step_identity_fedprox': self.check_step_identity_fedprox,
            'step_identity_fedmspp': self.check_step_identity_fedmspp,
            'nonsmooth_step_length': self.check_nonsmooth_step_length,
            'direction_sampling': self.check_direction_sampling,
            'moreau_finite_difference': self.check_moreau_finite_difference,
            'moreau_consistency': self.check_moreau_consistency,
            'lgd_homogeneous': self.check_lgd_homogeneous,
            'lgd_monotone_shift': self.check_lgd_monotone,
            'argument_stability': self.check_argument_stability,
            'efron_stein': self.check_efron_stein,
            'gradient_generalization': self.check_grad_generalization,
        }

    def run_all(self, only: Optional[List[str]] = None) -> List[CheckResult]:
        """
        Run checks (all, or the named subset) in a fixed order.

        A check that raises is reported as failed with the error message.
        """
        results = []
        for name, check in self.checks().items():
            if only and name not in only:
                continue
            logger.info(f"Running check {name}")
            try:
                result = check()
            except ProxFedError as e:
                result = CheckResult(name, False, f"error: {e}")
            results.append(result)
            status = 'PASS' if result.passed else 'FAIL'
            logger.info(f"{status} {name}: {result.detail}")
        return results

    # Fixtures

    def _smooth_instance(self) -> FederatedInstance:
        """The configured instance when smooth, else a logistic one of the same shape."""
        if self.instance.loss.is_smooth:
            return self.instance
        cfg = HeterogeneityConfig(M=self.M, p=self.p, base_n=self.base_n, shift=1.0)
        return generate_instance(cfg, LossModel(LossKind.LOGISTIC), self.seed)

    def _probes(self, tag: int, count: int, radius: float) -> List[np.ndarray]:
        stream = self.rng.spawn(tag)
        probes = [stream.spawn(j).ball_point(self.p, radius) for j in range(count)]
        union = self.instance.union()
        top = np.argsort(-np.linalg.norm(union.features, axis=1))[:5]
        for i in top:
            a = union.features[i]
            length = np.linalg.norm(a)
            if length > 0:
                direction = a / length
                probes.append(radius * direction)
                probes.append(-radius * direction)
        return probes

    # Constants

    def check_lipschitz(self) -> CheckResult:
        inst = self.instance
        G = inst.constants.G
        union = inst.union()
        worst = 0.0
        for w in self._probes(0, self.settings.probe_count, inst.loss.domain_radius):
            grads = per_example_grads(inst.loss, union, w)
            worst = max(worst, float(np.max(np.linalg.norm(grads, axis=1))))
        return CheckResult('constants_lipschitz', worst <= G * (1.0 + TOL),
                           f"max per-example subgradient norm {worst:.6g} vs G={G:.6g}",
                           {'observed': worst, 'G': G})

    def check_smoothness(self) -> CheckResult:
        inst = self.instance
        if not inst.loss.is_smooth:
            return CheckResult('constants_smoothness', True, 'not applicable (nonsmooth loss)')
        L = inst.constants.L
        union = inst.union()
        row_sq = np.sum(union.features ** 2, axis=1)
        worst = 0.0
        for w in self._probes(1, self.settings.probe_count, inst.loss.domain_radius):
            coeff = curvature_coefficient(inst.loss.kind, union.features @ w, union.labels)
            worst = max(worst, float(np.max(np.abs(coeff) * row_sq)))
        return CheckResult('constants_smoothness', worst <= L * (1.0 + TOL),
                           f"max per-example curvature {worst:.6g} vs L={L:.6g}",
                           {'observed': worst, 'L': L})

    def check_weak_convexity(self) -> CheckResult:
        inst = self.instance
        nu = inst.constants.nu or 0.0
        union = inst.union()
        stream = self.rng.spawn(2)
        radius = inst.loss.domain_radius
        worst = -np.inf
        for k in range(self.settings.probe_count):
            s = stream.spawn(k)
            u = s.ball_point(self.p, radius)
            v = s.ball_point(self.p, radius)
            theta = float(s.uniform())
            mid = theta * u + (1.0 - theta) * v
            gap = (batch_risk(inst.loss, union, mid) - theta * batch_risk(inst.loss, union, u)
                   - (1.0 - theta) * batch_risk(inst.loss, union, v)
                   - 0.5 * nu * theta * (1.0 - theta) * sq_norm(u - v))
            worst = max(worst, gap)
        return CheckResult('constants_weak_convexity', worst <= TOL,
                           f"max convexity gap of f + (nu/2)||.||^2: {worst:.3g} (nu={nu:.6g})",
                           {'worst_gap': worst, 'nu': nu})

    def check_finite_difference(self) -> CheckResult:
        inst = self._smooth_instance()
        pooled = inst.pooled()
        stream = self.rng.spawn(3)
        h = 1e-6
        worst = 0.0
        for k in range(10):
            w = stream.spawn(k).ball_point(self.p, 1.0)
            _, g = batch_risk_and_grad(inst.loss, pooled, w)
            fd = np.array([(batch_risk(inst.loss, pooled, w + h * e)
                            - batch_risk(inst.loss, pooled, w - h * e)) / (2.0 * h)
                           for e in np.eye(self.p)])
            worst = max(worst, float(np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g))))
        return CheckResult('gradient_finite_difference', worst <= 1e-5,
                           f"max relative gradient/finite-difference gap {worst:.3g}",
                           {'worst': worst})

    # Oracle

    def _random_quadratic(self, stream: RngStream, n: int = 8, p: int = 3):
        features = stream.normal((n, p))
        labels = stream.normal(n)
        loss = LossModel(LossKind.QUADRATIC)
        constants = certify_constants(loss, Batch(features, labels))
        eta = 0.5 / constants.L
        center = stream.normal(p)
        return ProxSubproblem(Batch(features, labels), loss, constants, center, eta)

    def check_certificate_soundness(self) -> CheckResult:
        stream = self.rng.spawn(4)
        violations = 0
        worst = -np.inf
        for k in range(self.settings.soundness_trials):
            sp = self._random_quadratic(stream.spawn(k))
            q_star = sp.objective(prox_quadratic_exact(sp).solution)
            for report in (prox_smooth_gd(sp, 1e-6), prox_nonsmooth_subgrad(sp, 200)):
                excess = sp.objective(report.solution) - q_star - report.epsilon_certified
                worst = max(worst, excess)
                if excess > 1e-12:
                    violations += 1
        return CheckResult('oracle_certificate_soundness', violations == 0,
                           f"{violations} violations; max Q gap minus certificate {worst:.3g}",
                           {'violations': violations})

    def check_three_point(self) -> CheckResult:
        stream = self.rng.spawn(5)
        sp = self._random_quadratic(stream.spawn(0))
        w_plus = prox_quadratic_exact(sp).solution
        lam = 1.0 / sp.eta - (sp.constants.nu or 0.0)
        f = lambda x: batch_risk(sp.loss, sp.batch, x)
        lhs = f(w_plus) + sq_norm(w_plus - sp.center) / (2.0 * sp.eta)
        worst = -np.inf
        for k in range(100):
            u = stream.spawn(1, k).normal(sp.center.shape[0], 2.0)
            rhs = f(u) + sq_norm(u - sp.center) / (2.0 * sp.eta) - 0.5 * lam * sq_norm(w_plus - u)
            worst = max(worst, lhs - rhs)
        return CheckResult('oracle_three_point', worst <= TOL,
                           f"max three-point excess {worst:.3g}", {'worst': worst})

    # Engine

    def check_homogeneous_reduction(self) -> CheckResult:
        h = self.settings.homogeneous
        cfg = homogeneous_config(h['M'], h['p'], h['n'])
        inst = generate_instance(cfg, LossModel(LossKind.QUADRATIC), self.seed)
        common = dict(T=h['T'], I=h['M'], schedule=ScheduleKind.SMOOTH_FEDPROX,
                      eps_policy=EpsPolicy.EXACT, seed=self.seed)
        fed = run(inst, RunConfig(algorithm=Algorithm.FEDPROX, **common))
        central = run(inst, RunConfig(algorithm=Algorithm.CENTRAL_PPA, **common))
        gap = max(float(np.linalg.norm(a - b)) for a, b in zip(fed.iterates, central.iterates))
        return CheckResult('homogeneous_reduction', gap <= 1e-10,
                           f"max iterate gap FedProx vs CentralPPA {gap:.3g}", {'gap': gap})

    def _smooth_run_cfg(self, algorithm: Algorithm, I: int, threads: int = 1,
                        rounds: Optional[int] = None) -> RunConfig:
        schedule = (ScheduleKind.SMOOTH_FEDMSPP if algorithm is Algorithm.FEDMSPP
                    else ScheduleKind.SMOOTH_FEDPROX)
        return RunConfig(algorithm=algorithm, T=rounds or self.settings.rounds, I=I, b=2,
                         schedule=schedule, eps_policy=EpsPolicy.THEOREM_BUDGET,
                         seed=self.seed, threads=threads)

    def check_determinism(self) -> CheckResult:
        inst = self._smooth_instance()
        I = max(1, inst.M // 2)
        first = run(inst, self._smooth_run_cfg(Algorithm.FEDMSPP, I, threads=1, rounds=10))
        second = run(inst, self._smooth_run_cfg(Algorithm.FEDMSPP, I, threads=2, rounds=10))
        same = (first.records == second.records
                and all(np.array_equal(a, b) for a, b in zip(first.iterates, second.iterates)))
        return CheckResult('determinism', same, 'identical traces with 1 and 2 threads'
                           if same else 'traces differ between thread counts')

    def _residual_check(self, name: str, trace, columns: List[str], limit: float) -> CheckResult:
        values = {c: trace.residual_max(c) for c in columns}
        recorded = {c: v for c, v in values.items() if v is not None}
        passed = bool(recorded) and all(v <= limit for v in recorded.values())
        detail = ', '.join(f"{c}={v:.3g}" for c, v in recorded.items()) or 'nothing recorded'
        return CheckResult(name, passed, detail, values)

    def check_step_identity_fedprox(self) -> CheckResult:
        inst = self._smooth_instance()
        trace = run(inst, self._smooth_run_cfg(Algorithm.FEDPROX, inst.M))
        return self._residual_check('step_identity_fedprox', trace,
                                    ['step_identity_excess', 'step_identity_sound_excess',
                                     'eps_excess', 'concentration_excess'], TOL)

    def check_step_identity_fedmspp(self) -> CheckResult:
        inst = self._smooth_instance()
        trace = run(inst, self._smooth_run_cfg(Algorithm.FEDMSPP, max(1, inst.M // 2)))
        return self._residual_check('step_identity_fedmspp', trace,
                                    ['step_identity_excess', 'step_identity_sound_excess',
                                     'eps_excess'], TOL)

    def check_nonsmooth_step_length(self) -> CheckResult:
        cfg = HeterogeneityConfig(M=min(self.M, 4), p=self.p, base_n=min(self.base_n, 20), shift=1.0)
        inst = generate_instance(cfg, LossModel(LossKind.ABSOLUTE), self.seed)
        run_cfg = RunConfig(algorithm=Algorithm.FEDPROX, T=self.settings.nonsmooth_rounds,
                            I=max(1, inst.M // 2), schedule=ScheduleKind.NONSMOOTH_RHO, rho=0.1,
                            eps_policy=EpsPolicy.EXACT, inner_K=self.settings.nonsmooth_inner_K,
                            seed=self.seed, moreau=MoreauConfig(rho=0.1))
        trace = run(inst, run_cfg)
        result = self._residual_check('nonsmooth_step_length', trace,
                                      ['step_length_excess', 'global_step_excess'], 0.0)
        aggregation = trace.residual_max('aggregation_residual')
        scale = max(1.0, max(float(np.linalg.norm(w)) for w in trace.iterates))
        result.passed = result.passed and aggregation <= 1e-12 * scale
        result.detail += f", aggregation_residual={aggregation:.3g}"
        return result

    def check_direction_sampling(self) -> CheckResult:
        inst = self._smooth_instance()
        I = max(1, inst.M // 2)
        state_cfg = self._smooth_run_cfg(Algorithm.FEDPROX, I, rounds=self.settings.frozen_states)
        states = run(inst, state_cfg).iterates
        eta = state_cfg.eta(inst.constants, inst.M)
        failures = 0
        worst_z = 0.0
        for k, state in enumerate(states[:self.settings.frozen_states]):
            report = direction_sampling_check(inst, state, eta, I, self.rng.spawn(6, k),
                                              trials=self.settings.direction_trials)
            worst_z = max(worst_z, report.max_abs_z)
            failures += 0 if report.passed else 1
        return CheckResult('direction_sampling', failures == 0,
                           f"{failures} failing states; max |z| {worst_z:.3g}",
                           {'failures': failures, 'max_abs_z': worst_z})

    # Diagnostics

    def check_moreau_finite_difference(self) -> CheckResult:
        inst = scalar_absolute_instance()
        cfg = MoreauConfig(rho=1.0, inner_solver='dual')
        h = 1e-5
        worst = 0.0
        expected = {3.0: 1.0, 0.5: 0.5, 0.0: 0.0}
        for w, value in expected.items():
            g = moreau_grad(inst, [w], cfg)
            fd = (moreau_envelope_value(inst, [w + h], cfg)
                  - moreau_envelope_value(inst, [w - h], cfg)) / (2.0 * h)
            worst = max(worst, abs(g - abs(fd)), abs(g - value))
        return CheckResult('moreau_finite_difference', worst <= 1e-4,
                           f"max identity/finite-difference gap {worst:.3g}", {'worst': worst})

    def check_moreau_consistency(self) -> CheckResult:
        inst = self._smooth_instance()
        L = inst.constants.L
        w = self.rng.spawn(7).ball_point(self.p, 1.0)
        g_sq = global_grad_sq(inst, w)
        worst = 0.0
        passed = True
        for rho in (1e-3, 1e-4):
            if not rho * max(L, 2.0 * (inst.constants.nu or 0.0)) < 1.0:
                continue
            m_sq = moreau_grad(inst, w, MoreauConfig(rho=rho)) ** 2
            ratio = abs(m_sq / g_sq - 1.0)
            worst = max(worst, ratio)
            passed = passed and ratio <= 3.0 * L * rho
        return CheckResult('moreau_consistency', passed,
                           f"max |moreau^2 / grad^2 - 1| = {worst:.3g}", {'worst': worst})

    def check_lgd_homogeneous(self) -> CheckResult:
        inst = generate_instance(homogeneous_config(4, self.p, 30), LossModel(LossKind.QUADRATIC),
                                 self.seed)
        probes = [self.rng.spawn(8, j).ball_point(self.p, 1.0) for j in range(10)]
        report = lgd_fit(inst, probes)
        passed = (report.B_sq_min_H0 is not None and abs(report.B_sq_min_H0 - 1.0) <= 1e-6
                  and report.H_sq_min_B1 <= 1e-8)
        return CheckResult('lgd_homogeneous', passed,
                           f"B^2={report.B_sq_min_H0}, H^2={report.H_sq_min_B1:.3g}",
                           report.to_dict())

    def check_lgd_monotone(self) -> CheckResult:
        probes = [self.rng.spawn(9, j).ball_point(self.p, 1.0) for j in range(10)]
        values = []
        for shift in (0.0, 1.0, 2.0):
            cfg = HeterogeneityConfig(M=self.M, p=self.p, base_n=self.base_n, shift=shift)
            inst = generate_instance(cfg, LossModel(LossKind.QUADRATIC), self.seed)
            values.append(lgd_fit(inst, probes).H_sq_min_B1)
        passed = all(b >= a for a, b in zip(values, values[1:]))
        return CheckResult('lgd_monotone_shift', passed,
                           'H^2 over shifts 0,1,2: ' + ', '.join(f"{v:.4g}" for v in values),
                           {'H_sq': values})

    # Stability

    def check_argument_stability(self) -> CheckResult:
        inst = self._smooth_instance()
        data = inst.devices[0].data
        N = min(self.settings.stability_N, len(data))
        data = data.take(np.arange(N))
        L = certify_constants(inst.loss, data).L
        report = measure_argument_stability(data, inst.loss, 0.5 / L, 1e-10,
                                            self.settings.stability_trials, self.rng.spawn(10))
        return CheckResult('argument_stability', report.passed,
                           f"observed max {report.observed_max:.4g} vs bound {report.bound:.4g}, "
                           f"{report.violations} violations", report.to_dict())

    def _quadratic_population(self):
        cfg = HeterogeneityConfig(M=1, p=self.p, base_n=10)
        return generate_instance(cfg, LossModel(LossKind.QUADRATIC), self.seed).population

    def check_efron_stein(self) -> CheckResult:
        result = efron_stein_check(self._quadratic_population(), LossModel(LossKind.QUADRATIC), 10,
                                   None, self.settings.mc_samples, self.rng.spawn(11))
        return CheckResult('efron_stein', result.passed,
                           f"lhs {result.lhs:.4g} (se {result.lhs_se:.2g}) vs beta^2 N {result.rhs:.4g}",
                           result._asdict())

    def check_grad_generalization(self) -> CheckResult:
        result = grad_generalization_check(self._quadratic_population(),
                                           LossModel(LossKind.QUADRATIC), 10, None,
                                           self.settings.mc_samples, self.rng.spawn(12))
        return CheckResult('gradient_generalization', result.passed,
                           f"bias {result.bias:.4g} <= {result.bias_bound:.4g}, "
                           f"var {result.var:.4g} <= {result.var_bound:.4g}", result._asdict())


def scalar_absolute_instance() -> FederatedInstance:
    """One device holding a = 1, y = 0 under the absolute loss, so Rbar(w) = |w|."""
    loss = LossModel(LossKind.ABSOLUTE)
    data = Batch(np.array([[1.0]]), np.array([0.0]))
    return FederatedInstance((DeviceDataset(0, data),), loss, certify_constants(loss, data))
