"""
Stationarity and heterogeneity measurements.

- global_grad_sq: ||grad Rbar(w)||^2 for smooth losses
- moreau_grad: ||w - prox_{rho Rbar}(w)|| / rho, the Moreau-envelope gradient norm
- lgd_fit: extremal (B^2, H^2) corners of local gradient dissimilarity over probes
- direction_stats / direction_sampling_check: aggregated local directions d_t
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from proxfed.loaders.synthetic import FederatedInstance
from proxfed.problems.losses import Batch, LossKind, batch_risk, batch_risk_and_grad
from proxfed.processors.prox_oracle import (
    DEFAULT_INNER_K,
    OracleReport,
    ProxSubproblem,
    prox_absolute_dual,
    prox_nonsmooth_subgrad,
    prox_quadratic_exact,
    prox_smooth_gd,
    solve_prox,
)
from proxfed.processors.sampling import sample_devices
from proxfed.utils.errors import ConfigError, DiagnosticError
from proxfed.utils.numerics import ParamVector, RngStream, as_param, norm, sq_norm

logger = logging.getLogger(__name__)

LGD_ZERO_THRESHOLD = 1e-14


def global_gradient(instance: FederatedInstance, w: ParamVector) -> ParamVector:
    """(1/M) sum_m grad R^(m)(w)."""
    w = as_param(w)
    grads = [instance.device_risk(m, w)[1] for m in range(instance.M)]
    return np.mean(grads, axis=0)


def global_grad_sq(instance: FederatedInstance, w: ParamVector) -> float:
    """
    Squared norm of the global empirical risk gradient.

    Raises:
        DiagnosticError: For nonsmooth losses
    """
    if not instance.loss.is_smooth:
        raise DiagnosticError(f"{instance.loss.kind.value} loss is nonsmooth: use moreau_grad")
    return sq_norm(global_gradient(instance, w))


def global_risk(instance: FederatedInstance, w: ParamVector) -> float:
    return float(np.mean([batch_risk(instance.loss, d.data, w) for d in instance.devices]))


@dataclass
class MoreauConfig:
    """Envelope parameter and inner solver budget for moreau_grad."""
    rho: float
    inner_K: int = DEFAULT_INNER_K
    inner_eps: float = 1e-12
    inner_grad_tol: Optional[float] = 1e-10
    inner_solver: str = 'auto'

    SOLVERS = ('auto', 'subgradient', 'dual', 'gd')

    def validate(self, instance: FederatedInstance):
        """
        Raise ConfigError unless rho makes the pooled prox strongly convex.

        Weakly convex instances need rho < 1/(2 nu); smooth ones rho < 1/L.
        """
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}", field='diagnostics.rho')
        if self.inner_solver not in self.SOLVERS:
            raise ConfigError(f"unknown inner solver '{self.inner_solver}'",
                              field='diagnostics.inner_solver')
        constants = instance.constants
        if constants.nu and not self.rho < 1.0 / (2.0 * constants.nu):
            raise ConfigError(f"rho={self.rho} must be below 1/(2 nu)={1.0 / (2.0 * constants.nu):.6g}",
                              field='diagnostics.rho')
        if constants.L and not self.rho < 1.0 / constants.L:
            raise ConfigError(f"rho={self.rho} must be below 1/L={1.0 / constants.L:.6g}",
                              field='diagnostics.rho')


def default_moreau_config(instance: FederatedInstance, rho: Optional[float] = None) -> MoreauConfig:
    """MoreauConfig with rho defaulting to 1/(4 nu) (or 1/(2L), or 1)."""
    if rho is None:
        c = instance.constants
        if c.nu:
            rho = 1.0 / (4.0 * c.nu)
        elif c.L:
            rho = 1.0 / (2.0 * c.L)
        else:
            rho = 1.0
    return MoreauConfig(rho=rho)


def moreau_prox(instance: FederatedInstance, w: ParamVector, cfg: MoreauConfig) -> OracleReport:
    """Solve prox_{rho Rbar}(w) over the weighted pooled dataset."""
    cfg.validate(instance)
    sp = ProxSubproblem(instance.pooled(), instance.loss, instance.constants, w, cfg.rho)
    kind = instance.loss.kind
    solver = cfg.inner_solver
    if solver == 'auto':
        if kind is LossKind.QUADRATIC:
            return prox_quadratic_exact(sp)
        if kind is LossKind.ABSOLUTE:
            solver = 'dual'
        elif instance.loss.is_smooth:
            solver = 'gd'
        else:
            solver = 'subgradient'
    if solver == 'dual':
        return prox_absolute_dual(sp, eps_target=cfg.inner_eps)
    if solver == 'gd':
        return prox_smooth_gd(sp, cfg.inner_eps, grad_tol=cfg.inner_grad_tol)
    return prox_nonsmooth_subgrad(sp, cfg.inner_K)


def moreau_grad(instance: FederatedInstance, w: ParamVector, cfg: MoreauConfig) -> float:
    """
    Moreau-envelope gradient norm ||w - prox_{rho Rbar}(w)|| / rho.

    Args:
        instance: Federated instance
        w: Evaluation point
        cfg: Envelope parameter and inner budget

    Returns:
        The gradient norm (not squared)
    """
    w = as_param(w)
    report = moreau_prox(instance, w, cfg)
    return norm(w - report.solution) / cfg.rho


def moreau_envelope_value(instance: FederatedInstance, w: ParamVector, cfg: MoreauConfig) -> float:
    """Rbar_rho(w) = Rbar(wbar) + ||w - wbar||^2 / (2 rho) with wbar the pooled prox."""
    w = as_param(w)
    report = moreau_prox(instance, w, cfg)
    return global_risk(instance, report.solution) + sq_norm(w - report.solution) / (2.0 * cfg.rho)


@dataclass
class LgdReport:
    """Extremal (B^2, H^2) corners of the LGD inequality over a probe set."""
    B_sq_min_H0: Optional[float]
    H_sq_min_B1: float
    probe_count: int

    def to_dict(self) -> dict:
        return {'B_sq_min_H0': self.B_sq_min_H0, 'H_sq_min_B1': self.H_sq_min_B1,
                'probe_count': self.probe_count}


def lgd_terms(instance: FederatedInstance, w: ParamVector):
    """x = ||grad Rbar(w)||^2 and y = (1/M) sum_m ||grad R^(m)(w)||^2."""
    grads = np.array([instance.device_risk(m, w)[1] for m in range(instance.M)])
    x = sq_norm(grads.mean(axis=0))
    y = float(np.mean(np.sum(grads * grads, axis=1)))
    return x, y


def lgd_fit(instance: FederatedInstance, probes: Sequence[ParamVector]) -> LgdReport:
    """
    Fit the two extremal LGD corners over probes.

    B_sq_min_H0 = max_j y_j / x_j over probes with x_j > 1e-14 (None if there are
    none); H_sq_min_B1 = max_j max(0, y_j - x_j).

    Raises:
        ConfigError: With fewer than two probes
        DiagnosticError: For nonsmooth losses
    """
    if len(probes) < 2:
        raise ConfigError(f"lgd_fit needs at least 2 probes, got {len(probes)}", field='probes')
    if not instance.loss.is_smooth:
        raise DiagnosticError(f"{instance.loss.kind.value} loss is nonsmooth: use moreau_grad")
    ratios = []
    h_sq = 0.0
    for w in probes:
        x, y = lgd_terms(instance, as_param(w, 'probe'))
        if x > LGD_ZERO_THRESHOLD:
            ratios.append(y / x)
        h_sq = max(h_sq, y - x)
    b_sq = max(ratios) if ratios else None
    if b_sq is None:
        logger.warning("All probes are stationary; B^2 corner is undefined")
    return LgdReport(b_sq, h_sq, len(probes))


def default_probes(instance: FederatedInstance, iterates: Sequence[ParamVector], rng: RngStream,
                   count: int = 10, radius: Optional[float] = None) -> List[ParamVector]:
    """Run iterates plus `count` uniform points in a ball (radius 1 by default)."""
    radius = 1.0 if radius is None else radius
    probes = [as_param(w) for w in iterates]
    probes.extend(rng.spawn(j).ball_point(instance.p, radius) for j in range(count))
    return probes


@dataclass
class DirectionStats:
    """Local directions d^(m) at the local solutions and their aggregates."""
    d_per_device: np.ndarray
    d_t: ParamVector
    d_bar_t: Optional[ParamVector]
    delta_per_device: np.ndarray
    delta_t: ParamVector
    sampled: List[int] = field(default_factory=list)


def direction_stats(instance: FederatedInstance, sampled: Sequence[int],
                    local_solutions: Sequence[ParamVector], batches: Sequence[Batch],
                    center: ParamVector, eta: float) -> DirectionStats:
    """
    d^(m) = grad R_batch(w^(m)) for every sampled device, their mean d_t and
    delta^(m) = (w^(m) - center) / eta + d^(m).

    d_bar_t (mean over all M) is filled only when every device was sampled.
    """
    if not (len(sampled) == len(local_solutions) == len(batches)):
        raise ConfigError("need one solution and one batch per sampled device", field='sampled')
    center = as_param(center, 'center')
    d = np.array([batch_risk_and_grad(instance.loss, batch, w)[1]
                  for w, batch in zip(local_solutions, batches)])
    delta = (np.asarray(local_solutions) - center) / eta + d
    d_t = d.mean(axis=0)
    d_bar = d_t.copy() if sorted(sampled) == list(range(instance.M)) else None
    return DirectionStats(d, d_t, d_bar, delta, delta.mean(axis=0), list(sampled))


def concentration_excess(instance: FederatedInstance, w_prev: ParamVector, d_bar: ParamVector,
                         eta: float, eps: float) -> float:
    """
    ||grad Rbar(w_prev) - d_bar||^2 - L^2 (G + 2 L eps)^2 eta^2; nonpositive when the
    concentration bound holds.
    """
    c = instance.constants
    lhs = sq_norm(global_gradient(instance, w_prev) - d_bar)
    return lhs - (c.L * (c.G + 2.0 * c.L * eps) * eta) ** 2


@dataclass
class DirectionSamplingReport:
    """Monte Carlo statistics of d_t under repeated device sampling at a frozen state."""
    trials: int
    I: int
    max_abs_z: float
    mean_within_4se: bool
    variance_estimate: float
    variance_se: float
    variance_bound: float
    variance_ok: bool

    @property
    def passed(self) -> bool:
        return self.mean_within_4se and self.variance_ok

    def to_dict(self) -> Dict:
        return {'trials': self.trials, 'I': self.I, 'max_abs_z': self.max_abs_z,
                'mean_within_4se': self.mean_within_4se,
                'variance_estimate': self.variance_estimate, 'variance_se': self.variance_se,
                'variance_bound': self.variance_bound, 'variance_ok': self.variance_ok}


def local_directions(instance: FederatedInstance, center: ParamVector, eta: float,
                     eps_target: Optional[float] = 1e-12, grad_tol: Optional[float] = 1e-10,
                     inner_K: int = DEFAULT_INNER_K) -> np.ndarray:
    """M x p matrix of d^(m) at every device's FedProx local solution from center."""
    rows = []
    for device in instance.devices:
        sp = ProxSubproblem(device.data, instance.loss, instance.constants, center, eta)
        report = solve_prox(sp, eps_target if instance.loss.is_smooth else None,
                            inner_K=inner_K, grad_tol=grad_tol)
        rows.append(batch_risk_and_grad(instance.loss, device.data, report.solution)[1])
    return np.array(rows)


def direction_sampling_check(instance: FederatedInstance, center: ParamVector, eta: float, I: int,
                             rng: RngStream, trials: int = 10 ** 4,
                             directions: Optional[np.ndarray] = None) -> DirectionSamplingReport:
    """
    Resample I_t `trials` times at a frozen state and compare d_t with d_bar_t.

    Passes when the sample mean of d_t lies within 4 standard errors of d_bar_t
    in every coordinate and the estimate of E||d_t - d_bar_t||^2 is at most
    (G^2 / I)(1 + 3 * relative standard error).
    """
    if trials < 2:
        raise ConfigError(f"trials must be >= 2, got {trials}", field='trials')
    d = local_directions(instance, center, eta) if directions is None else np.asarray(directions)
    d_bar = d.mean(axis=0)
    samples = np.empty((trials, d.shape[1]))
    for k in range(trials):
        subset = sample_devices(rng.spawn(k), instance.M, I)
        samples[k] = d[subset].mean(axis=0)

    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(trials)
    gap = np.abs(mean - d_bar)
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(se > 0, gap / se, np.where(gap <= 1e-12, 0.0, np.inf))
    max_z = float(np.max(z))

    sq_dev = np.sum((samples - d_bar) ** 2, axis=1)
    estimate = float(sq_dev.mean())
    var_se = float(sq_dev.std(ddof=1) / np.sqrt(trials))
    bound = instance.constants.G ** 2 / I
    rel_se = var_se / estimate if estimate > 0 else 0.0
    report = DirectionSamplingReport(trials, I, max_z, max_z <= 4.0, estimate, var_se, bound,
                                     estimate <= bound * (1.0 + 3.0 * rel_se))
    logger.debug(f"Direction sampling check: {report.to_dict()}")
    return report
