"""
Empirical stability harness for the regularized ERM solved by each device.

The algorithm under test is A(S) = argmin_w R_S(w) + (1/2 eta) ||w - w0||^2,
solved to a certified sub-optimality eps. Its uniform argument stability is at
most 4G/(lambda N) + 2 sqrt(2 eps / lambda) with lambda = 1/eta - L.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from proxfed.loaders.synthetic import PopulationSpec, population_gradient
from proxfed.problems.losses import (
    Batch,
    BatchLike,
    Example,
    LossConstants,
    LossKind,
    LossModel,
    as_batch,
    batch_risk_and_grad,
    certify_constants,
)
from proxfed.processors.prox_oracle import ProxSubproblem, solve_prox
from proxfed.utils.errors import ConfigError, DiagnosticError
from proxfed.utils.numerics import ParamVector, RngStream, norm

logger = logging.getLogger(__name__)

VIOLATION_SLACK = 1e-9


def stability_bound(G: float, lam: float, N: int, eps: float) -> float:
    """
    Uniform argument stability of the eps-inexact regularized ERM.

    Returns:
        4 G / (lambda N) + 2 sqrt(2 eps / lambda)
    """
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}", field='lambda')
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}", field='N')
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}", field='eps')
    return 4.0 * G / (lam * N) + 2.0 * np.sqrt(2.0 * eps / lam)


@dataclass
class StabilityReport:
    """Observed replace-one displacements against the stability bound."""
    bound: float
    observed_max: float
    trials: int
    violations: int
    observed: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {'bound': self.bound, 'observed_max': self.observed_max, 'trials': self.trials,
                'violations': self.violations}


def _regularized_erm(batch: Batch, loss: LossModel, constants: LossConstants, center: ParamVector,
                     eta: float, solver_eps: float) -> Tuple[ParamVector, float]:
    sp = ProxSubproblem(batch, loss, constants, center, eta)
    report = solve_prox(sp, solver_eps if solver_eps > 0 else None)
    return report.solution, report.epsilon_certified


def neighbor_displacement(batch: Batch, loss: LossModel, constants: LossConstants,
                          center: ParamVector, eta: float, i: int, z: Example,
                          solver_eps: float) -> Tuple[float, float]:
    """
    ||A(S) - A(S^(i))|| for S^(i) = S with example i replaced by z.

    Returns:
        Tuple of (displacement, larger of the two certificates)
    """
    w_s, eps_s = _regularized_erm(batch, loss, constants, center, eta, solver_eps)
    w_n, eps_n = _regularized_erm(batch.replaced(i, z), loss, constants, center, eta, solver_eps)
    return norm(w_s - w_n), max(eps_s, eps_n)


def _default_replacement(batch: Batch, rng: RngStream) -> Example:
    """Feature of one random example paired with the label of another."""
    j, k = rng.integers(0, len(batch), size=2)
    return Example(batch.features[j].copy(), float(batch.labels[k]))


def measure_argument_stability(data: BatchLike, loss: LossModel, eta: float, solver_eps: float,
                               trials: int, rng: RngStream,
                               replacements: Optional[Sequence[Example]] = None,
                               center: Optional[ParamVector] = None,
                               threads: int = 1) -> StabilityReport:
    """
    Replace-one displacement of the regularized ERM over random neighbouring pairs.

    Each trial k uses stream rng.spawn(k) to pick an index i and a replacement
    z' (from `replacements` if given, else a random feature paired with a random
    label of the data). Constants are certified over data and replacements.

    Args:
        data: Training set S
        loss: Smooth loss family
        eta: Prox step with eta < 1/L
        solver_eps: Certified sub-optimality of both solves (0 = exact route)
        trials: Number of neighbouring pairs
        rng: Stream for indices and replacements
        replacements: Optional candidate pool for z'
        center: Prox center w0 (zeros by default)
        threads: Worker threads for the trials

    Returns:
        StabilityReport with violations counting observed > bound (1 + 1e-9)
    """
    batch = as_batch(data)
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}", field='stability.trials')
    pool = list(replacements) if replacements else []
    certified_over = batch if not pool else Batch.from_examples(batch.examples() + pool)
    constants = certify_constants(loss, certified_over)
    lam = constants.strong_convexity(eta)
    if not lam > 0:
        raise ConfigError(f"eta={eta} must be below 1/L={1.0 / constants.curvature:.6g}",
                          field='stability.eta')
    center = np.zeros(batch.dimension) if center is None else np.asarray(center, dtype=np.float64)
    N = len(batch)

    def trial(k: int) -> Tuple[float, float]:
        stream = rng.spawn(k)
        i = int(stream.integers(0, N))
        if pool:
            z = pool[int(stream.integers(0, len(pool)))]
        else:
            z = _default_replacement(batch, stream)
        return neighbor_displacement(batch, loss, constants, center, eta, i, z, solver_eps)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(executor.map(trial, range(trials)))
    else:
        outcomes = [trial(k) for k in range(trials)]

    observed = [d for d, _ in outcomes]
    eps_used = max(solver_eps, max(e for _, e in outcomes))
    bound = stability_bound(constants.G, lam, N, eps_used)
    violations = sum(1 for d in observed if d > bound * (1.0 + VIOLATION_SLACK))
    report = StabilityReport(bound, max(observed), trials, violations, observed)
    logger.info(f"Argument stability on N={N}: observed max {report.observed_max:.4g} "
                f"vs bound {bound:.4g} ({violations} violations in {trials} trials)")
    return report


class EfronSteinResult(NamedTuple):
    """Efron-Stein comparison E||h(S) - E h(S)||^2 vs beta^2 N."""
    lhs: float
    rhs: float
    lhs_se: float
    passed: bool


class GradGeneralizationResult(NamedTuple):
    """Gradient generalization estimates against their stability bounds."""
    bias: float
    bias_bound: float
    var: float
    var_bound: float
    bias_se: float
    var_se: float
    passed: bool


def _draw_sets(population: PopulationSpec, N: int, count: int, rng: RngStream,
               device: int) -> List[Batch]:
    return [population.sample(rng.spawn(k), device, N) for k in range(count)]


def _solve_sets(sets: Sequence[Batch], loss: LossModel, constants: LossConstants,
                eta: float, solver_eps: float, center: ParamVector) -> np.ndarray:
    return np.array([_regularized_erm(s, loss, constants, center, eta, solver_eps)[0] for s in sets])


def _certified(loss: LossModel, sets: Sequence[Batch]) -> LossConstants:
    union = Batch(np.vstack([s.features for s in sets]), np.concatenate([s.labels for s in sets]))
    return certify_constants(loss, union)


def _resolve_eta(eta: Optional[float], constants: LossConstants) -> float:
    if eta is None:
        return 0.5 / constants.L
    if constants.curvature > 0 and not eta * constants.curvature < 1.0:
        raise ConfigError(f"eta={eta} must be below 1/L={1.0 / constants.curvature:.6g}",
                          field='stability.eta')
    return eta


def efron_stein_check(population: PopulationSpec, loss: LossModel, N: int, eta: Optional[float],
                      samples: int, rng: RngStream, device: int = 0,
                      solver_eps: float = 0.0) -> EfronSteinResult:
    """
    Monte Carlo check of E||h(S) - E h(S)||^2 <= beta^2 N.

    h(S) is the regularized ERM solution on a fresh sample of size N. E h(S) is
    estimated from 4 * samples held-out sets; beta is the stability bound with
    constants certified over every drawn set. eta None means 0.5 / L.

    Returns:
        EfronSteinResult; passed when lhs <= rhs (1 + 3 * relative standard error)
    """
    if samples < 2:
        raise ConfigError(f"samples must be >= 2, got {samples}", field='stability.samples')
    sets = _draw_sets(population, N, samples, rng.spawn(0), device)
    held_out = _draw_sets(population, N, 4 * samples, rng.spawn(1), device)
    constants = _certified(loss, sets + held_out)
    eta = _resolve_eta(eta, constants)
    center = np.zeros(population.p)

    h = _solve_sets(sets, loss, constants, eta, solver_eps, center)
    h_mean = _solve_sets(held_out, loss, constants, eta, solver_eps, center).mean(axis=0)
    sq_dev = np.sum((h - h_mean) ** 2, axis=1)
    lhs = float(sq_dev.mean())
    lhs_se = float(sq_dev.std(ddof=1) / np.sqrt(samples))

    beta = stability_bound(constants.G, constants.strong_convexity(eta), N, solver_eps)
    rhs = beta * beta * N
    rel_se = lhs_se / lhs if lhs > 0 else 0.0
    result = EfronSteinResult(lhs, rhs, lhs_se, lhs <= rhs * (1.0 + 3.0 * rel_se))
    logger.info(f"Efron-Stein: lhs={lhs:.4g} (se {lhs_se:.2g}) vs beta^2 N={rhs:.4g}")
    return result


def grad_generalization_check(population: PopulationSpec, loss: LossModel, N: int,
                              eta: Optional[float], samples: int, rng: RngStream,
                              device: int = 0, solver_eps: float = 0.0) -> GradGeneralizationResult:
    """
    Monte Carlo check of the stability-to-gradient-generalization bounds.

    bias = ||E[grad R(A(S)) - grad R_S(A(S))]|| <= L gamma
    var  = E||grad R(A(S)) - E grad R(A(S))||^2 <= L^2 gamma^2 N

    Raises:
        DiagnosticError: Unless the loss is quadratic
    """
    if loss.kind is not LossKind.QUADRATIC:
        raise DiagnosticError("closed-form population gradient required")
    if samples < 2:
        raise ConfigError(f"samples must be >= 2, got {samples}", field='stability.samples')
    sets = _draw_sets(population, N, samples, rng, device)
    constants = _certified(loss, sets)
    eta = _resolve_eta(eta, constants)
    solutions = _solve_sets(sets, loss, constants, eta, solver_eps, np.zeros(population.p))

    pop_grads = np.array([population_gradient(population, loss, w, device) for w in solutions])
    emp_grads = np.array([batch_risk_and_grad(loss, s, w)[1] for s, w in zip(sets, solutions)])
    gaps = pop_grads - emp_grads
    bias_vec = gaps.mean(axis=0)
    bias = norm(bias_vec)
    bias_se = float(np.sqrt(np.sum(gaps.var(axis=0, ddof=1)) / samples))

    sq_dev = np.sum((pop_grads - pop_grads.mean(axis=0)) ** 2, axis=1)
    var = float(sq_dev.mean())
    var_se = float(sq_dev.std(ddof=1) / np.sqrt(samples))

    gamma = stability_bound(constants.G, constants.strong_convexity(eta), N, solver_eps)
    bias_bound = constants.L * gamma
    var_bound = constants.L ** 2 * gamma ** 2 * N
    passed = bias <= bias_bound + 3.0 * bias_se and var <= var_bound + 3.0 * var_se
    logger.info(f"Gradient generalization: bias={bias:.4g} <= {bias_bound:.4g}, "
                f"var={var:.4g} <= {var_bound:.4g}")
    return GradGeneralizationResult(bias, bias_bound, var, var_bound, bias_se, var_se, passed)
