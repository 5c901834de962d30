"""
Solvers for the local proximal subproblem

    Q(w; w0) = R_batch(w) + (1/2 eta) ||w - w0||^2

Every solver returns an OracleReport whose epsilon_certified is a proven upper
bound on Q(solution) - min Q.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

try:
    from scipy import linalg
    from scipy.optimize import minimize
except ImportError:
    raise ImportError("scipy is required. Install with: pip install scipy")

from proxfed.problems.losses import (
    Batch,
    BatchLike,
    LossConstants,
    LossKind,
    LossModel,
    as_batch,
    batch_risk,
    batch_risk_and_grad,
)
from proxfed.processors.kernels import prox_subgradient_kernel
from proxfed.utils.errors import ConfigError, SolverError
from proxfed.utils.numerics import ParamVector, RngStream, as_param, sq_norm

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 10 ** 6
DEFAULT_INNER_K = 10 ** 5
EXACT_EPS = 1e-14
EXACT_GRAD_TOL = 1e-10


class Method(Enum):
    CLOSED_FORM = 'ClosedForm'
    GRADIENT_DESCENT = 'GradientDescent'
    SUBGRADIENT = 'Subgradient'
    DUAL_BOX = 'DualBox'


@dataclass
class OracleReport:
    """Local solution with its certified sub-optimality."""
    solution: ParamVector
    epsilon_certified: float
    iterations: int
    method: Method
    certificates: Tuple[float, ...] = field(default_factory=tuple)


class ProxSubproblem:
    """A prox subproblem Q(.; center) over a batch."""

    def __init__(self, batch: BatchLike, loss: LossModel, constants: LossConstants,
                 center: ParamVector, eta: float):
        """
        Initialize the subproblem.

        Args:
            batch: Examples of the local risk
            loss: Loss family
            constants: Certified constants
            center: Prox center w0
            eta: Prox step, must satisfy eta < 1/nu so Q has a unique minimizer

        Raises:
            ConfigError: If eta is out of range or dimensions disagree
        """
        self.batch: Batch = as_batch(batch)
        self.loss = loss
        self.constants = constants
        self.center = as_param(center, 'center')
        self.eta = float(eta)
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {eta}", field='eta')
        nu = constants.nu or 0.0
        if nu > 0 and not self.eta * nu < 1.0:
            raise ConfigError(f"eta={self.eta:.6g} must be below 1/nu=1/{nu:.6g}", field='eta')
        if self.batch.dimension != self.center.shape[0]:
            raise ConfigError(f"dimension mismatch: batch {self.batch.dimension} vs "
                              f"center {self.center.shape[0]}", field='dimension')
        # certificate modulus 1/eta - L (smooth) or 1/eta - nu; may be <= 0 for convex losses
        self.lam = constants.strong_convexity(self.eta)

    def objective(self, w: ParamVector) -> float:
        return batch_risk(self.loss, self.batch, w) + sq_norm(w - self.center) / (2.0 * self.eta)

    def gradient(self, w: ParamVector) -> ParamVector:
        _, g = batch_risk_and_grad(self.loss, self.batch, w)
        return g + (w - self.center) / self.eta

    def require_modulus(self):
        """Raise ConfigError unless eta < 1/curvature, as the iterative certificates need."""
        if not self.lam > 0:
            raise ConfigError(f"eta={self.eta:.6g} must be below 1/{self.constants.curvature:.6g}",
                              field='eta')


def prox_quadratic_exact(sp: ProxSubproblem) -> OracleReport:
    """
    Solve the Quadratic prox subproblem through its normal equations.

    (A^T C A + I/eta) w = A^T C y + w0/eta, with C the diagonal of example weights.
    """
    if sp.loss.kind is not LossKind.QUADRATIC:
        raise ConfigError(f"closed form needs the quadratic loss, got {sp.loss.kind.value}",
                          field='loss')
    A = sp.batch.features
    c = sp.batch.weights
    p = A.shape[1]
    lhs = A.T @ (c[:, None] * A) + np.eye(p) / sp.eta
    rhs = A.T @ (c * sp.batch.labels) + sp.center / sp.eta
    w = linalg.solve(lhs, rhs, assume_a='pos')
    # the quadratic loss is convex, so Q is (1/eta)-strongly convex
    eps = sq_norm(sp.gradient(w)) * sp.eta / 2.0
    return OracleReport(w, float(eps), 1, Method.CLOSED_FORM)


def prox_smooth_gd(sp: ProxSubproblem, eps_target: float, max_iter: int = DEFAULT_MAX_ITER,
                   grad_tol: Optional[float] = None, record: bool = False) -> OracleReport:
    """
    Gradient descent on Q with step 1/(L + 1/eta) from the center.

    Stops once ||grad Q||^2 / (2 lambda) <= eps_target and, when given,
    ||grad Q|| <= grad_tol.

    Args:
        sp: Smooth subproblem
        eps_target: Target sub-optimality (> 0)
        max_iter: Iteration cap
        grad_tol: Optional gradient-norm tolerance
        record: Keep the certificate of every iterate

    Returns:
        OracleReport with epsilon_certified = ||grad Q||^2 / (2 lambda) at exit

    Raises:
        SolverError: If the cap is hit before both criteria hold
    """
    if not sp.loss.is_smooth:
        raise ConfigError(f"{sp.loss.kind.value} loss is not smooth", field='loss')
    if not eps_target > 0:
        raise ConfigError(f"eps_target must be positive, got {eps_target}", field='eps_target')
    sp.require_modulus()
    step = 1.0 / (sp.constants.L + 1.0 / sp.eta)
    w = sp.center.copy()
    history = []
    best = float('inf')
    for k in range(max_iter + 1):
        g = sp.gradient(w)
        g_sq = sq_norm(g)
        cert = g_sq / (2.0 * sp.lam)
        best = min(best, cert)
        if record:
            history.append(cert)
        if cert <= eps_target and (grad_tol is None or g_sq <= grad_tol * grad_tol):
            return OracleReport(w, cert, k, Method.GRADIENT_DESCENT, tuple(history))
        if k < max_iter:
            w = w - step * g
    raise SolverError("gradient descent did not reach the target", best, max_iter)


def prox_nonsmooth_subgrad(sp: ProxSubproblem, K: int = DEFAULT_INNER_K) -> OracleReport:
    """
    K subgradient steps on Q with weighted averaging.

    Returns:
        OracleReport with epsilon_certified = 2 G_hat^2 / (lambda (K + 1)), G_hat the
        largest subgradient norm of Q seen along the trajectory
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}", field='inner_K')
    sp.require_modulus()
    w, g_max = prox_subgradient_kernel(sp.loss.kind.code, sp.batch.features, sp.batch.labels,
                                       sp.batch.weights, sp.center, sp.eta, sp.lam, K)
    eps = 2.0 * g_max * g_max / (sp.lam * (K + 1.0))
    return OracleReport(w, float(eps), int(K), Method.SUBGRADIENT)


def prox_absolute_dual(sp: ProxSubproblem, eps_target: float = 1e-12,
                       max_iter: int = 10000) -> OracleReport:
    """
    Absolute-loss prox through its box-constrained dual.

    With |r| = max_{|u| <= 1} u r the dual is
        D(u) = sum_i c_i u_i (a_i.w0 - y_i) - (eta/2) ||A^T (c * u)||^2
    over u in [-1, 1]^n, maximised with L-BFGS-B. The primal is
    w = w0 - eta A^T (c * u) and the certificate is the duality gap Q(w) - D(u).
    """
    if sp.loss.kind is not LossKind.ABSOLUTE:
        raise ConfigError(f"dual oracle needs the absolute loss, got {sp.loss.kind.value}",
                          field='loss')
    A = sp.batch.features
    c = sp.batch.weights
    offset = c * (A @ sp.center - sp.batch.labels)

    def negative_dual(u):
        v = A.T @ (c * u)
        value = offset @ u - 0.5 * sp.eta * (v @ v)
        grad = offset - sp.eta * c * (A @ v)
        return -value, -grad

    u0 = np.clip(np.sign(offset), -1.0, 1.0)
    result = minimize(negative_dual, u0, jac=True, method='L-BFGS-B',
                      bounds=[(-1.0, 1.0)] * len(c),
                      options={'maxiter': max_iter, 'ftol': 1e-15, 'gtol': 1e-13})
    u = result.x
    w = sp.center - sp.eta * (A.T @ (c * u))
    gap = max(sp.objective(w) + result.fun, 0.0)
    if gap > eps_target:
        logger.debug(f"Dual oracle stopped with gap {gap:.3e} above target {eps_target:.3e}")
    return OracleReport(w, float(gap), int(result.nit), Method.DUAL_BOX)


def solve_prox(sp: ProxSubproblem, eps_target: Optional[float], inner_K: int = DEFAULT_INNER_K,
               grad_tol: Optional[float] = None, prefer_dual: bool = False) -> OracleReport:
    """
    Route a subproblem to a solver.

    eps_target None means "as exact as possible": the closed form for the
    quadratic loss, gradient descent to EXACT_EPS and a gradient tolerance for
    other smooth losses, the dual oracle for the absolute loss when preferred,
    and inner_K subgradient steps otherwise. A positive eps_target selects
    gradient descent for smooth losses.
    """
    kind = sp.loss.kind
    if eps_target is None:
        if kind is LossKind.QUADRATIC:
            return prox_quadratic_exact(sp)
        if sp.loss.is_smooth:
            return prox_smooth_gd(sp, EXACT_EPS, grad_tol=grad_tol or EXACT_GRAD_TOL)
        if kind is LossKind.ABSOLUTE and prefer_dual:
            return prox_absolute_dual(sp)
        return prox_nonsmooth_subgrad(sp, inner_K)
    if sp.loss.is_smooth:
        return prox_smooth_gd(sp, eps_target, grad_tol=grad_tol)
    return prox_nonsmooth_subgrad(sp, inner_K)


def local_sgd_epochs(batch: BatchLike, loss: LossModel, w0: ParamVector, epochs: int,
                     lr: float, minibatch: int, rng: RngStream,
                     prox_center: Optional[ParamVector] = None,
                     eta: Optional[float] = None) -> ParamVector:
    """
    Epoch-wise minibatch SGD from w0.

    Each epoch visits a fresh permutation of the batch in chunks of `minibatch`
    examples. With prox_center and eta the gradient of the prox term is added,
    so SGD minimises Q instead of the plain risk.

    Args:
        batch: Local examples
        loss: Loss family
        w0: Starting point
        epochs: Number of passes (>= 1)
        lr: Step size
        minibatch: Chunk size (>= 1)
        rng: Stream used for permutations
        prox_center: Optional prox center
        eta: Prox step, required with prox_center

    Returns:
        Final iterate (no certificate)
    """
    batch = as_batch(batch)
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}", field='fedavg.epochs')
    if minibatch < 1:
        raise ConfigError(f"minibatch must be >= 1, got {minibatch}", field='fedavg.minibatch')
    if prox_center is not None and not (eta is not None and eta > 0):
        raise ConfigError("a prox center needs a positive eta", field='eta')
    w = as_param(w0, 'w0').copy()
    if lr == 0:
        return w
    n = len(batch)
    for _ in range(epochs):
        order = rng.generator.permutation(n)
        for start in range(0, n, minibatch):
            _, g = batch_risk_and_grad(loss, batch.take(order[start:start + minibatch]), w)
            if prox_center is not None:
                g = g + (w - prox_center) / eta
            w = w - lr * g
    return w
