"""
Federated driver.

Each round t = 1..T the server broadcasts w_{t-1}, samples I devices uniformly
without replacement, every sampled device solves its prox subproblem
(FedProx: full local data; FedMSPP: a fresh minibatch of size b; FedAvg:
local SGD) and the server sets w_t to the unweighted mean of the local
models. CentralPPA applies one prox step on the pooled global risk per round.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from proxfed.loaders.synthetic import FederatedInstance
from proxfed.problems.losses import Batch, LossConstants, batch_risk_and_grad, certify_constants
from proxfed.processors.diagnostics import (
    MoreauConfig,
    concentration_excess,
    default_moreau_config,
    direction_stats,
    global_grad_sq,
    moreau_grad,
)
from proxfed.processors.prox_oracle import (
    DEFAULT_INNER_K,
    ProxSubproblem,
    local_sgd_epochs,
    solve_prox,
)
from proxfed.processors.sampling import sample_devices, sample_minibatch
from proxfed.utils.errors import ConfigError, DomainError
from proxfed.utils.numerics import ParamVector, StreamPurpose, derive_stream, is_finite, norm

logger = logging.getLogger(__name__)

STEP_SLACK = 1e-3


class _NamedEnum(Enum):
    @classmethod
    def from_name(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace('_', '').replace('-', '')
        for item in cls:
            if item.value.lower() == key or item.name.lower().replace('_', '') == key:
                return item
        choices = ', '.join(item.value for item in cls)
        raise ConfigError(f"unknown {cls.__name__} '{name}' (choose from {choices})",
                          field=cls.__name__)


class Algorithm(_NamedEnum):
    FEDPROX = 'FedProx'
    FEDMSPP = 'FedMSPP'
    FEDAVG = 'FedAvg'
    CENTRAL_PPA = 'CentralPPA'


class ScheduleKind(_NamedEnum):
    SMOOTH_FEDPROX = 'SmoothFedProx'
    SMOOTH_FEDMSPP = 'SmoothFedMSPP'
    NONSMOOTH_RHO = 'NonsmoothRho'
    MANUAL = 'Manual'


class EpsPolicy(_NamedEnum):
    THEOREM_BUDGET = 'TheoremBudget'
    FIXED = 'Fixed'
    EXACT = 'Exact'


class SamplingMode(_NamedEnum):
    EMPIRICAL = 'Empirical'
    POPULATION = 'Population'


class LocalSolver(_NamedEnum):
    ORACLE = 'oracle'
    SGD = 'sgd'


@dataclass
class FedAvgConfig:
    """Local SGD knobs (FedAvg, and prox-SGD local solver)."""
    epochs: int = 1
    lr: float = 0.05
    minibatch: int = 10

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", field='run.fedavg.epochs')
        if self.minibatch < 1:
            raise ConfigError(f"minibatch must be >= 1, got {self.minibatch}",
                              field='run.fedavg.minibatch')
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}", field='run.fedavg.lr')


@dataclass
class RunConfig:
    """Everything a run needs besides the instance."""
    algorithm: Algorithm = Algorithm.FEDPROX
    T: int = 100
    I: int = 1
    b: int = 1
    schedule: ScheduleKind = ScheduleKind.SMOOTH_FEDPROX
    eps_policy: EpsPolicy = EpsPolicy.THEOREM_BUDGET
    eps_fixed: Optional[float] = None
    sampling_mode: SamplingMode = SamplingMode.EMPIRICAL
    seed: int = 0
    rho: Optional[float] = None
    eta_manual: Optional[float] = None
    fedavg: FedAvgConfig = field(default_factory=FedAvgConfig)
    local_solver: LocalSolver = LocalSolver.ORACLE
    inner_K: int = DEFAULT_INNER_K
    inner_solver: str = 'subgradient'
    grad_tol: Optional[float] = 1e-10
    full_batch_minibatch: bool = False
    threads: int = 1
    track_moreau: bool = False
    moreau: Optional[MoreauConfig] = None
    progress: bool = False
    full_directions: bool = False

    def __post_init__(self):
        self.algorithm = Algorithm.from_name(self.algorithm)
        self.schedule = ScheduleKind.from_name(self.schedule)
        self.eps_policy = EpsPolicy.from_name(self.eps_policy)
        self.sampling_mode = SamplingMode.from_name(self.sampling_mode)
        self.local_solver = LocalSolver.from_name(self.local_solver)

    def validate(self, instance: FederatedInstance):
        """
        Check the config against an instance.

        Raises:
            ConfigError: Naming the offending field
        """
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}", field='run.T')
        if not 1 <= self.I <= instance.M:
            raise ConfigError(f"I={self.I} must satisfy 1 <= I <= M={instance.M}", field='run.I')
        if self.b < 1:
            raise ConfigError(f"b must be >= 1, got {self.b}", field='run.b')
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}", field='run.threads')
        if self.inner_K < 1:
            raise ConfigError(f"inner_K must be >= 1, got {self.inner_K}", field='run.inner_K')
        if self.inner_solver not in ('subgradient', 'dual'):
            raise ConfigError(f"unknown inner solver '{self.inner_solver}'", field='run.inner_solver')
        if self.eps_policy is EpsPolicy.FIXED and not (self.eps_fixed and self.eps_fixed > 0):
            raise ConfigError("Fixed eps policy needs eps_fixed > 0", field='run.eps_fixed')
        if self.sampling_mode is SamplingMode.POPULATION and instance.population is None:
            raise ConfigError("Population sampling needs an instance with a population",
                              field='run.sampling_mode')
        if self.schedule is ScheduleKind.SMOOTH_FEDMSPP and self.algorithm is not Algorithm.FEDMSPP:
            logger.warning(f"{self.schedule.value} schedule used with {self.algorithm.value}")
        if not instance.loss.is_smooth and self.schedule in (ScheduleKind.SMOOTH_FEDPROX,
                                                             ScheduleKind.SMOOTH_FEDMSPP):
            raise ConfigError(f"{self.schedule.value} needs a smooth loss; "
                              f"use NonsmoothRho for {instance.loss.kind.value}",
                              field='run.schedule')
        self.fedavg.validate()
        eta = self.eta(instance.constants, instance.M)
        curvature = instance.constants.curvature
        if curvature > 0 and not eta * curvature < 1.0:
            raise ConfigError(f"eta={eta:.6g} must be below 1/{curvature:.6g}", field='run.schedule')

    def eta(self, constants: LossConstants, M: Optional[int] = None) -> float:
        return schedule_eta(self.schedule, constants.L, constants.nu, self.T, self.I, self.b,
                            self.rho, self.eta_manual, M)


def schedule_eta(kind: ScheduleKind, L: Optional[float], nu: Optional[float], T: int, I: int,
                 b: int = 1, rho: Optional[float] = None, eta_manual: Optional[float] = None,
                 M: Optional[int] = None) -> float:
    """
    Constant per-round step eta.

    SmoothFedProx:  (1/3L) min(T^-1/3, sqrt(I/T)), or (1/3L) T^-1/3 when I = M
    SmoothFedMSPP:  (1/8L) min(T^-1/3, sqrt(bI/T))
    NonsmoothRho:   rho / sqrt(T), rho < 1/(2 nu)
    Manual:         eta_manual

    Raises:
        ConfigError: On a missing or out-of-range parameter
    """
    kind = ScheduleKind.from_name(kind)
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}", field='run.T')
    if kind in (ScheduleKind.SMOOTH_FEDPROX, ScheduleKind.SMOOTH_FEDMSPP):
        if not (L and L > 0):
            raise ConfigError(f"{kind.value} needs a positive L", field='run.schedule')
        cube = T ** (-1.0 / 3.0)
        if kind is ScheduleKind.SMOOTH_FEDPROX:
            if M is not None and I == M:
                return cube / (3.0 * L)
            return min(cube, np.sqrt(I / T)) / (3.0 * L)
        return min(cube, np.sqrt(b * I / T)) / (8.0 * L)
    if kind is ScheduleKind.NONSMOOTH_RHO:
        if rho is None or not rho > 0:
            raise ConfigError(f"NonsmoothRho needs rho > 0, got {rho}", field='run.rho')
        if nu and not rho < 1.0 / (2.0 * nu):
            raise ConfigError(f"rho={rho} must be below 1/(2 nu)={1.0 / (2.0 * nu):.6g}",
                              field='run.rho')
        return rho / np.sqrt(T)
    if eta_manual is None or not eta_manual > 0:
        raise ConfigError(f"Manual schedule needs eta_manual > 0, got {eta_manual}",
                          field='run.eta_manual')
    return float(eta_manual)


def epsilon_budget(kind: Algorithm, G: float, L: Optional[float], eta: float, I: int, b: int = 1,
                   policy: EpsPolicy = EpsPolicy.THEOREM_BUDGET,
                   eps_fixed: Optional[float] = None) -> float:
    """
    Per-round sub-optimality ceiling.

    FedProx: min(G / (2 L sqrt(I)), G eta / I)
    FedMSPP: min(G / 2L, G^2 eta / (8 b^2), G eta / (2 b I))

    Exact policy, nonsmooth losses (L None) and the baselines return 0, which
    routes the subproblem to the tight solver.
    """
    policy = EpsPolicy.from_name(policy)
    if policy is EpsPolicy.EXACT:
        return 0.0
    if policy is EpsPolicy.FIXED:
        return float(eps_fixed)
    kind = Algorithm.from_name(kind)
    if L is None or kind not in (Algorithm.FEDPROX, Algorithm.FEDMSPP):
        return 0.0
    if kind is Algorithm.FEDPROX:
        return min(G / (2.0 * L * np.sqrt(I)), G * eta / I)
    return min(G / (2.0 * L), G * G * eta / (8.0 * b * b), G * eta / (2.0 * b * I))


@dataclass
class RoundRecord:
    """Diagnostics of one round; None marks a value that does not apply."""
    t: int
    sampled_devices: List[int]
    eta: float
    eps_budget: Optional[float]
    eps_certified_max: Optional[float]
    global_grad_sq: Optional[float]
    moreau_grad_sq: Optional[float]
    step_norm: float
    invariant_residuals: Dict[str, Optional[float]] = field(default_factory=dict)


RESIDUAL_NAMES = (
    'aggregation_residual',
    'eps_excess',
    'step_identity_excess',
    'step_identity_sound_excess',
    'step_length_excess',
    'global_step_excess',
    'concentration_excess',
)


@dataclass
class TraceLog:
    """Per-round records, the iterates w_0..w_T and a run summary."""
    records: List[RoundRecord]
    iterates: List[ParamVector]
    summary: Dict

    @property
    def final_model(self) -> ParamVector:
        return self.iterates[-1]

    def residual_max(self, name: str) -> Optional[float]:
        """Largest recorded value of a residual column (None if never recorded)."""
        values = [r.invariant_residuals.get(name) for r in self.records]
        values = [v for v in values if v is not None]
        return max(values) if values else None


@dataclass
class _LocalResult:
    solution: ParamVector
    batch: Batch
    epsilon: Optional[float]
    overrun: bool = False


class FederatedRunner:
    """Runs T rounds of a federated algorithm on an instance."""

    def __init__(self, instance: FederatedInstance, cfg: RunConfig,
                 w0: Optional[ParamVector] = None):
        """
        Initialize the runner.

        Args:
            instance: Federated instance
            cfg: Run configuration (validated here)
            w0: Initial model (zeros by default)
        """
        cfg.validate(instance)
        self.instance = instance
        self.cfg = cfg
        self.constants = instance.constants
        self.eta = cfg.eta(self.constants, instance.M)
        self.eps_budget = epsilon_budget(cfg.algorithm, self.constants.G, self.constants.L,
                                         self.eta, cfg.I, cfg.b, cfg.eps_policy, cfg.eps_fixed)
        self.w0 = np.zeros(instance.p) if w0 is None else np.array(w0, dtype=np.float64)
        self.moreau_cfg = cfg.moreau
        if self.moreau_cfg is None and (cfg.track_moreau or not instance.loss.is_smooth):
            self.moreau_cfg = default_moreau_config(instance, cfg.rho)
        if self.moreau_cfg is not None:
            self.moreau_cfg.validate(instance)
        self.track_moreau = cfg.track_moreau or not instance.loss.is_smooth

    @property
    def shows_progress(self) -> bool:
        """The progress bar is drawn only when INFO messages would be."""
        return self.cfg.progress and logger.isEnabledFor(logging.INFO)

    @property
    def uses_oracle(self) -> bool:
        return (self.cfg.algorithm in (Algorithm.FEDPROX, Algorithm.FEDMSPP, Algorithm.CENTRAL_PPA)
                and not (self.cfg.local_solver is LocalSolver.SGD
                         and self.cfg.algorithm is not Algorithm.CENTRAL_PPA))

    def _eps_target(self) -> Optional[float]:
        return self.eps_budget if self.eps_budget > 0 else None

    def _solve(self, batch: Batch, center: ParamVector) -> _LocalResult:
        sp = ProxSubproblem(batch, self.instance.loss, self.constants, center, self.eta)
        report = solve_prox(sp, self._eps_target(), inner_K=self.cfg.inner_K,
                            grad_tol=self.cfg.grad_tol,
                            prefer_dual=self.cfg.inner_solver == 'dual')
        return _LocalResult(report.solution, batch, report.epsilon_certified)

    def _local_update(self, t: int, m: int, center: ParamVector) -> _LocalResult:
        cfg = self.cfg
        device = self.instance.devices[m]
        overrun = False
        if cfg.algorithm is Algorithm.FEDMSPP and not cfg.full_batch_minibatch:
            population = cfg.sampling_mode is SamplingMode.POPULATION
            source = self.instance.population if population else device
            batch = sample_minibatch(derive_stream(cfg.seed, [StreamPurpose.MINIBATCH, t, m]),
                                     source, cfg.b, m)
            overrun = population and self._exceeds_certificate(batch)
        else:
            batch = device.data

        if cfg.algorithm is Algorithm.FEDAVG or cfg.local_solver is LocalSolver.SGD:
            prox = cfg.algorithm is not Algorithm.FEDAVG
            w = local_sgd_epochs(batch, self.instance.loss, center, cfg.fedavg.epochs,
                                 cfg.fedavg.lr, cfg.fedavg.minibatch,
                                 derive_stream(cfg.seed, [StreamPurpose.LOCAL_SGD, t, m]),
                                 prox_center=center if prox else None,
                                 eta=self.eta if prox else None)
            return _LocalResult(w, batch, None, overrun)
        result = self._solve(batch, center)
        result.overrun = overrun
        return result

    def _exceeds_certificate(self, batch: Batch) -> bool:
        """True when a population draw needs larger constants than the instance certifies."""
        drawn = certify_constants(self.instance.loss, batch)
        c = self.constants
        return any(new is not None and old is not None and new > old
                   for new, old in ((drawn.G, c.G), (drawn.L, c.L), (drawn.nu, c.nu)))

    def _full_direction_mean(self, center: ParamVector) -> Tuple[ParamVector, float]:
        """d_bar_t from solving every device's subproblem, with the largest certificate."""
        results = [self._solve(d.data, center) for d in self.instance.devices]
        directions = [batch_risk_and_grad(self.instance.loss, r.batch, r.solution)[1] for r in results]
        return np.mean(directions, axis=0), max(r.epsilon for r in results)

    def _round_residuals(self, w_prev: ParamVector, w_new: ParamVector, sampled: List[int],
                         results: List[_LocalResult]) -> Dict[str, Optional[float]]:
        cfg = self.cfg
        c = self.constants
        eta = self.eta
        residuals: Dict[str, Optional[float]] = {name: None for name in RESIDUAL_NAMES}

        total = np.zeros_like(w_new)
        for r in results:
            total = total + r.solution
        residuals['aggregation_residual'] = norm(w_new - total / len(results))

        if not self.uses_oracle or cfg.algorithm is Algorithm.CENTRAL_PPA:
            return residuals
        eps_max = max(r.epsilon for r in results)
        if cfg.eps_policy is not EpsPolicy.EXACT and self.eps_budget > 0:
            residuals['eps_excess'] = eps_max - self.eps_budget

        if self.instance.loss.is_smooth:
            stats = direction_stats(self.instance, sampled, [r.solution for r in results],
                                    [r.batch for r in results], w_prev, eta)
            identity = []
            sound = []
            for delta, r in zip(stats.delta_per_device, results):
                residual = eta * norm(delta)
                identity.append(residual - 2.0 * c.L * r.epsilon * eta)
                sound.append(residual - eta * np.sqrt(2.0 * (c.L + 1.0 / eta) * r.epsilon))
            residuals['step_identity_excess'] = max(identity)
            residuals['step_identity_sound_excess'] = max(sound)
            if cfg.algorithm is Algorithm.FEDPROX:
                d_bar, eps_bar = stats.d_bar_t, eps_max
                if d_bar is None and cfg.full_directions:
                    d_bar, eps_bar = self._full_direction_mean(w_prev)
                if d_bar is not None:
                    residuals['concentration_excess'] = concentration_excess(
                        self.instance, w_prev, d_bar, eta, eps_bar)
        elif cfg.eps_policy is EpsPolicy.EXACT or self.eps_budget == 0:
            bound = c.G * eta * (1.0 + STEP_SLACK)
            residuals['step_length_excess'] = max(norm(r.solution - w_prev) for r in results) - bound
            residuals['global_step_excess'] = norm(w_new - w_prev) - bound
        return residuals

    def _map_devices(self, pool: Optional[ThreadPoolExecutor], t: int, sampled: List[int],
                     center: ParamVector) -> List[_LocalResult]:
        if pool is None:
            return [self._local_update(t, m, center) for m in sampled]
        # map keeps device order, so aggregation does not depend on scheduling
        return list(pool.map(lambda m: self._local_update(t, m, center), sampled))

    def run(self) -> TraceLog:
        """
        Execute T rounds.

        Returns:
            TraceLog with one RoundRecord per round

        Raises:
            DomainError: If an iterate leaves the certified ball
            SolverError: If an inner solver hits its cap
        """
        cfg = self.cfg
        inst = self.instance
        logger.info(f"Running {cfg.algorithm.value}: T={cfg.T}, I={cfg.I}, b={cfg.b}, "
                    f"eta={self.eta:.6g}, eps_budget={self.eps_budget:.6g}, "
                    f"policy={cfg.eps_policy.value}")
        start = time.perf_counter()
        w = self.w0.copy()
        iterates = [w.copy()]
        records: List[RoundRecord] = []
        radius = inst.loss.domain_radius
        pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        overruns = 0
        try:
            for t in tqdm(range(1, cfg.T + 1), desc=cfg.algorithm.value,
                          disable=not self.shows_progress):
                w_prev = w
                grad_sq = global_grad_sq(inst, w_prev) if inst.loss.is_smooth else None
                moreau_sq = None
                if self.track_moreau:
                    moreau_sq = moreau_grad(inst, w_prev, self.moreau_cfg) ** 2

                if cfg.algorithm is Algorithm.CENTRAL_PPA:
                    sampled = list(range(inst.M))
                    results = [self._solve(inst.pooled(), w_prev)]
                else:
                    sampled = sample_devices(derive_stream(cfg.seed, [StreamPurpose.DEVICE_SAMPLING, t]),
                                             inst.M, cfg.I)
                    results = self._map_devices(pool, t, sampled, w_prev)
                    drawn = sum(r.overrun for r in results)
                    if drawn and not overruns:
                        logger.warning(f"Round {t}: a population minibatch needs larger constants "
                                       f"than the instance certifies; certificates may not hold")
                    overruns += drawn

                w = np.mean([r.solution for r in results], axis=0)
                w_norm = norm(w)
                if not is_finite(w) or w_norm > radius:
                    raise DomainError(t, w_norm, radius)

                eps_values = [r.epsilon for r in results if r.epsilon is not None]
                records.append(RoundRecord(
                    t=t,
                    sampled_devices=sampled,
                    eta=self.eta,
                    eps_budget=self.eps_budget if self.uses_oracle else None,
                    eps_certified_max=max(eps_values) if eps_values else None,
                    global_grad_sq=grad_sq,
                    moreau_grad_sq=moreau_sq,
                    step_norm=norm(w - w_prev),
                    invariant_residuals=self._round_residuals(w_prev, w, sampled, results),
                ))
                iterates.append(w.copy())
        finally:
            if pool is not None:
                pool.shutdown()

        t_star = int(derive_stream(cfg.seed, [StreamPurpose.T_STAR]).integers(0, cfg.T))
        summary = self._summary(records, iterates, t_star, time.perf_counter() - start)
        summary['certificate_overruns'] = overruns
        logger.info(f"Finished {cfg.algorithm.value} in {summary['wall_time']:.2f}s: "
                    f"avg_grad_sq={summary['avg_grad_sq']}, avg_moreau_sq={summary['avg_moreau_sq']}")
        return TraceLog(records, iterates, summary)

    def _summary(self, records: List[RoundRecord], iterates: List[ParamVector], t_star: int,
                 wall_time: float) -> Dict:
        grads = [r.global_grad_sq for r in records if r.global_grad_sq is not None]
        moreaus = [r.moreau_grad_sq for r in records if r.moreau_grad_sq is not None]
        return {
            'algorithm': self.cfg.algorithm.value,
            'T': self.cfg.T,
            'I': self.cfg.I,
            'b': self.cfg.b,
            'eta': self.eta,
            'eps_budget': self.eps_budget,
            'avg_grad_sq': float(np.mean(grads)) if grads else None,
            'avg_moreau_sq': float(np.mean(moreaus)) if moreaus else None,
            't_star': t_star,
            'w_t_star': iterates[t_star].tolist(),
            'final_model': iterates[-1].tolist(),
            'wall_time': wall_time,
        }


def run(instance: FederatedInstance, cfg: RunConfig, w0: Optional[ParamVector] = None) -> TraceLog:
    """Run a federated algorithm; see FederatedRunner."""
    return FederatedRunner(instance, cfg, w0).run()


def summary_metric(trace: TraceLog) -> Tuple[str, float]:
    """The headline stationarity metric: avg_grad_sq when available, else avg_moreau_sq."""
    if trace.summary['avg_grad_sq'] is not None:
        return 'avg_grad_sq', trace.summary['avg_grad_sq']
    return 'avg_moreau_sq', trace.summary['avg_moreau_sq']
