"""
Loss families with per-example values, (sub)gradients and certified constants.

Every loss here has the form l(w; a, y) = phi(<a, w>; y), so a (sub)gradient is
phi'(<a, w>; y) * a. The constants G (Lipschitz), L (smoothness) and nu (weak
convexity) are analytic upper bounds over the ball ||w|| <= radius for the
given data:

=================  ===================================  ==========================  =============
kind               G                                    L                           nu
=================  ===================================  ==========================  =============
quadratic          A (radius A + Y)                     A^2                         0
logistic           A                                    A^2 / 4                     0
sigmoid_squared    c A / 2                              A^2 (1/8 + c / 3 sqrt3)     L
absolute           A                                    (nonsmooth)                 0
phase_retrieval    2 A^2 radius                         (nonsmooth)                 2 A^2
=================  ===================================  ==========================  =============

with A = max ||a||, Y = max |y| and c = max over labels of max(|y|, |1 - y|).
For sigmoid_squared the gradient coefficient is 2 (s - y) s (1 - s) with
s(1 - s) <= 1/4 and |s - y| <= c. Its derivative 2 q (q + (s - y)(1 - 2s)),
q = s(1 - s), is bounded by 2 q^2 <= 1/8 plus 2 c q |1 - 2s| <= c / 3 sqrt3.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from scipy.special import expit
except ImportError:
    raise ImportError("scipy is required. Install with: pip install scipy")

from proxfed.utils.errors import ConfigError
from proxfed.utils.numerics import ParamVector, check_same_dim

logger = logging.getLogger(__name__)

DEFAULT_DOMAIN_RADIUS = 10.0


class LossKind(Enum):
    QUADRATIC = 'quadratic'
    LOGISTIC = 'logistic'
    SIGMOID_SQUARED = 'sigmoid_squared'
    ABSOLUTE = 'absolute'
    PHASE_RETRIEVAL = 'phase_retrieval'

    @classmethod
    def from_name(cls, name: Union[str, 'LossKind']) -> 'LossKind':
        if isinstance(name, LossKind):
            return name
        key = str(name).strip().lower().replace('-', '_')
        aliases = {'sigmoidsquared': 'sigmoid_squared', 'phaseretrieval': 'phase_retrieval'}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ConfigError(f"unknown loss kind '{name}'", field='instance.loss')

    @property
    def code(self) -> int:
        """Integer tag used by the compiled kernels."""
        return list(LossKind).index(self)


SMOOTH_KINDS = (LossKind.QUADRATIC, LossKind.LOGISTIC, LossKind.SIGMOID_SQUARED)
CONVEX_KINDS = (LossKind.QUADRATIC, LossKind.LOGISTIC, LossKind.ABSOLUTE)


@dataclass(frozen=True)
class LossModel:
    """A loss family and the radius of the ball its constants hold on."""
    kind: LossKind
    domain_radius: float = DEFAULT_DOMAIN_RADIUS

    def __post_init__(self):
        object.__setattr__(self, 'kind', LossKind.from_name(self.kind))
        if not self.domain_radius > 0:
            raise ConfigError(f"domain radius must be positive, got {self.domain_radius}",
                              field='instance.domain_radius')

    @property
    def is_smooth(self) -> bool:
        return self.kind in SMOOTH_KINDS

    @property
    def is_convex(self) -> bool:
        return self.kind in CONVEX_KINDS


@dataclass(frozen=True)
class Example:
    """A single data point z = (a, y)."""
    feature: np.ndarray
    label: float


@dataclass(frozen=True)
class LossConstants:
    """Certified upper bounds; L is None for nonsmooth kinds."""
    G: float
    L: Optional[float]
    nu: Optional[float]

    @property
    def curvature(self) -> float:
        """The modulus that 1/eta must exceed: L for smooth kinds, nu otherwise."""
        if self.L is not None:
            return self.L
        return self.nu or 0.0

    def strong_convexity(self, eta: float) -> float:
        """Strong convexity modulus of R + (1/2 eta)||. - w0||^2."""
        return 1.0 / eta - self.curvature

    def to_dict(self) -> dict:
        return {'G': self.G, 'L': self.L, 'nu': self.nu}


class Batch:
    """
    Examples stored as a feature matrix, label vector and weights.

    The weights sum to one; the batch risk is the weighted mean of per-example
    losses. Uniform weights give the plain arithmetic mean.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray,
                 weights: Optional[np.ndarray] = None):
        """
        Initialize the batch.

        Args:
            features: n x p matrix of feature vectors
            labels: n labels
            weights: n nonnegative weights summing to one (uniform if None)
        """
        self.features = np.ascontiguousarray(np.atleast_2d(np.asarray(features, dtype=np.float64)))
        self.labels = np.ascontiguousarray(np.asarray(labels, dtype=np.float64).reshape(-1))
        n = self.labels.shape[0]
        if n == 0 or self.features.shape[0] != n:
            if n == 0:
                raise ConfigError("empty batch", field='batch')
            raise ConfigError(f"{self.features.shape[0]} features for {n} labels", field='batch')
        if weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = np.ascontiguousarray(np.asarray(weights, dtype=np.float64).reshape(-1))
            if self.weights.shape[0] != n or np.any(self.weights < 0):
                raise ConfigError("weights must be nonnegative, one per example", field='batch')
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise ConfigError("batch holds non-finite entries", field='batch')

    @classmethod
    def from_examples(cls, examples: Sequence[Example]) -> 'Batch':
        if len(examples) == 0:
            raise ConfigError("empty batch", field='batch')
        features = np.vstack([np.asarray(z.feature, dtype=np.float64) for z in examples])
        labels = np.array([z.label for z in examples], dtype=np.float64)
        return cls(features, labels)

    @classmethod
    def pooled(cls, batches: Sequence['Batch']) -> 'Batch':
        """
        Concatenate batches so the risk is the unweighted mean of batch risks.

        Each batch receives total weight 1/len(batches), split by its own weights.
        """
        if not batches:
            raise ConfigError("empty batch", field='batch')
        share = 1.0 / len(batches)
        return cls(np.vstack([b.features for b in batches]),
                   np.concatenate([b.labels for b in batches]),
                   np.concatenate([b.weights * share for b in batches]))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> Example:
        return Example(self.features[i].copy(), float(self.labels[i]))

    def examples(self) -> List[Example]:
        return [self.example(i) for i in range(len(self))]

    def take(self, indices: np.ndarray) -> 'Batch':
        """Batch of the given rows (repeats allowed) with uniform weights."""
        indices = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[indices], self.labels[indices])

    def replaced(self, i: int, z: Example) -> 'Batch':
        """Copy with example i replaced by z."""
        if not 0 <= i < len(self):
            raise ConfigError(f"index {i} out of range for {len(self)} examples", field='index')
        features = self.features.copy()
        labels = self.labels.copy()
        features[i] = np.asarray(z.feature, dtype=np.float64)
        labels[i] = float(z.label)
        return Batch(features, labels, self.weights.copy())

    def equals(self, other: 'Batch') -> bool:
        return (self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.weights, other.weights))


BatchLike = Union[Batch, Sequence[Example]]


def as_batch(batch: BatchLike) -> Batch:
    if isinstance(batch, Batch):
        return batch
    return Batch.from_examples(list(batch))


def phi_and_slope(kind: LossKind, u: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-example loss values and derivative coefficients at margins u = A w.

    At kinks the selection is fixed: absolute returns 0 at zero residual,
    phase_retrieval takes sign +1 at u^2 = y.
    """
    if kind is LossKind.QUADRATIC:
        r = u - y
        return 0.5 * r * r, r
    if kind is LossKind.LOGISTIC:
        m = y * u
        return np.logaddexp(0.0, -m), -y * expit(-m)
    if kind is LossKind.SIGMOID_SQUARED:
        s = expit(u)
        return (s - y) ** 2, 2.0 * (s - y) * s * (1.0 - s)
    if kind is LossKind.ABSOLUTE:
        r = u - y
        return np.abs(r), np.sign(r)
    if kind is LossKind.PHASE_RETRIEVAL:
        r = u * u - y
        return np.abs(r), np.where(r >= 0.0, 1.0, -1.0) * 2.0 * u
    raise ConfigError(f"unsupported loss kind {kind}", field='instance.loss')


def curvature_coefficient(kind: LossKind, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second derivative phi'' at margins u (smooth kinds only)."""
    if kind is LossKind.QUADRATIC:
        return np.ones_like(u)
    if kind is LossKind.LOGISTIC:
        s = expit(y * u)
        return y * y * s * (1.0 - s)
    if kind is LossKind.SIGMOID_SQUARED:
        s = expit(u)
        q = s * (1.0 - s)
        return 2.0 * q * (q + (s - y) * (1.0 - 2.0 * s))
    raise ConfigError(f"{kind.value} loss has no second derivative", field='instance.loss')


def per_example_values(model: LossModel, batch: Batch, w: ParamVector) -> np.ndarray:
    values, _ = phi_and_slope(model.kind, batch.features @ w, batch.labels)
    return values


def per_example_grads(model: LossModel, batch: Batch, w: ParamVector) -> np.ndarray:
    """n x p matrix of per-example (sub)gradients."""
    _, slope = phi_and_slope(model.kind, batch.features @ w, batch.labels)
    return slope[:, None] * batch.features


def loss_value(model: LossModel, w: ParamVector, z: Example) -> float:
    """
    Loss l(w; z) >= 0.

    Args:
        model: Loss family
        w: Parameter vector
        z: Example

    Returns:
        The loss value
    """
    a = np.asarray(z.feature, dtype=np.float64)
    check_same_dim(a, w)
    values, _ = phi_and_slope(model.kind, np.array([a @ w]), np.array([float(z.label)]))
    return float(values[0])


def loss_subgrad(model: LossModel, w: ParamVector, z: Example) -> ParamVector:
    """
    A (sub)gradient of l(.; z) at w; the gradient for smooth kinds.

    Args:
        model: Loss family
        w: Parameter vector
        z: Example

    Returns:
        Subgradient vector
    """
    a = np.asarray(z.feature, dtype=np.float64)
    check_same_dim(a, w)
    _, slope = phi_and_slope(model.kind, np.array([a @ w]), np.array([float(z.label)]))
    return slope[0] * a


def batch_risk_and_grad(model: LossModel, batch: BatchLike, w: ParamVector) -> Tuple[float, ParamVector]:
    """
    Weighted mean loss and (sub)gradient over a batch.

    Args:
        model: Loss family
        batch: Batch or list of examples (non-empty)
        w: Parameter vector

    Returns:
        Tuple of (risk, gradient)

    Raises:
        ConfigError: "empty batch" for an empty list of examples
    """
    batch = as_batch(batch)
    if batch.dimension != w.shape[0]:
        raise ConfigError(f"dimension mismatch: batch {batch.dimension} vs w {w.shape[0]}",
                          field='dimension')
    values, slope = phi_and_slope(model.kind, batch.features @ w, batch.labels)
    weighted = batch.weights * slope
    return float(batch.weights @ values), batch.features.T @ weighted


def batch_risk(model: LossModel, batch: Batch, w: ParamVector) -> float:
    return float(batch.weights @ per_example_values(model, batch, w))


def certify_constants(model: LossModel, data: BatchLike, radius: Optional[float] = None) -> LossConstants:
    """
    Analytic constants valid on the ball ||w|| <= radius for the given data.

    Args:
        model: Loss family
        data: Examples the constants must hold for
        radius: Ball radius (defaults to the model's domain radius)

    Returns:
        LossConstants (see the module docstring for the formulas)
    """
    batch = as_batch(data)
    radius = model.domain_radius if radius is None else float(radius)
    if not radius > 0:
        raise ConfigError(f"radius must be positive, got {radius}", field='radius')

    a_max = float(np.max(np.linalg.norm(batch.features, axis=1)))
    y_max = float(np.max(np.abs(batch.labels)))
    kind = model.kind

    if kind is LossKind.QUADRATIC:
        constants = LossConstants(G=a_max * (radius * a_max + y_max), L=a_max ** 2, nu=0.0)
    elif kind is LossKind.LOGISTIC:
        constants = LossConstants(G=a_max, L=a_max ** 2 / 4.0, nu=0.0)
    elif kind is LossKind.SIGMOID_SQUARED:
        c = float(np.max(np.maximum(np.abs(batch.labels), np.abs(1.0 - batch.labels))))
        smooth = a_max ** 2 * (0.125 + c / (3.0 * np.sqrt(3.0)))
        constants = LossConstants(G=c * a_max / 2.0, L=smooth, nu=smooth)
    elif kind is LossKind.ABSOLUTE:
        constants = LossConstants(G=a_max, L=None, nu=0.0)
    else:
        constants = LossConstants(G=2.0 * a_max ** 2 * radius, L=None, nu=2.0 * a_max ** 2)

    logger.debug(f"Certified {kind.value} constants on radius {radius}: {constants}")
    return constants
