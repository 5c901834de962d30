"""
Synthetic heterogeneous federated instances.

Device m draws features with covariance diag(covariance) and labels generated
from a device-specific ground truth w*_m. Features are Gaussian, or Rademacher
signs scaled per coordinate; the latter have the same covariance but a
deterministic row norm, so max ||a|| equals the typical ||a||. The spectrum is
flat unless signal_rank is set, in which case coordinates past the first
signal_rank are scaled down by tail_scale.

Heterogeneity comes from shifting the ground truths around a common centre;
imbalance from N_m = floor(base_n / m^exponent).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from proxfed.problems.losses import (
    Batch,
    Example,
    LossConstants,
    LossKind,
    LossModel,
    batch_risk_and_grad,
    certify_constants,
)
from proxfed.utils.errors import ConfigError, DiagnosticError
from proxfed.utils.numerics import ParamVector, RngStream, StreamPurpose, derive_stream

logger = logging.getLogger(__name__)


class FeatureLaw(Enum):
    GAUSSIAN = 'gaussian'
    RADEMACHER = 'rademacher'

    @classmethod
    def from_name(cls, name) -> 'FeatureLaw':
        if isinstance(name, cls):
            return name
        for law in cls:
            if law.value == str(name).strip().lower():
                return law
        raise ConfigError(f"unknown feature law '{name}' (choose from gaussian, rademacher)",
                          field='instance.feature_law')


@dataclass(frozen=True)
class HeterogeneityConfig:
    """Shape of a synthetic federated instance."""
    M: int
    p: int
    base_n: int
    imbalance_exponent: float = 0.0
    shift: float = 0.0
    noise_std: float = 0.1
    feature_scale: float = 1.0
    truth_scale: float = 1.0
    shared_data: bool = False
    feature_law: str = 'gaussian'
    signal_rank: int = 0  # 0: flat spectrum
    tail_scale: float = 1.0

    def validate(self):
        """Raise ConfigError for any field outside its range."""
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}", field='instance.M')
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}", field='instance.p')
        if self.base_n < 1:
            raise ConfigError(f"base_n must be >= 1, got {self.base_n}", field='instance.base_n')
        if self.imbalance_exponent < 0:
            raise ConfigError("imbalance_exponent must be >= 0", field='instance.imbalance_exponent')
        if self.shift < 0:
            raise ConfigError("shift must be >= 0", field='instance.shift')
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", field='instance.noise_std')
        if not self.feature_scale > 0:
            raise ConfigError("feature_scale must be > 0", field='instance.feature_scale')
        FeatureLaw.from_name(self.feature_law)
        if not 0 <= self.signal_rank <= self.p:
            raise ConfigError(f"signal_rank must lie in [0, p={self.p}], got {self.signal_rank}",
                              field='instance.signal_rank')
        if not self.tail_scale > 0:
            raise ConfigError("tail_scale must be > 0", field='instance.tail_scale')

    def covariance(self) -> np.ndarray:
        """Diagonal feature covariance: feature_scale^2, times tail_scale^2 past signal_rank."""
        scales = np.full(self.p, self.feature_scale)
        if self.signal_rank > 0:
            scales[self.signal_rank:] *= self.tail_scale
        return scales ** 2

    def device_sizes(self) -> List[int]:
        """N_m = max(1, floor(base_n / m^exponent)) for m = 1..M."""
        if self.shared_data:
            return [self.base_n] * self.M
        return [max(1, int(np.floor(self.base_n / (m ** self.imbalance_exponent) + 1e-12)))
                for m in range(1, self.M + 1)]


@dataclass
class DeviceDataset:
    """Local data D^(m) of one device."""
    device_id: int
    data: Batch

    @property
    def size(self) -> int:
        return len(self.data)

    def examples(self) -> List[Example]:
        return self.data.examples()


@dataclass
class PopulationSpec:
    """Per-device data distributions D^(m) with diagonal feature covariance."""
    ground_truths: np.ndarray
    covariance: np.ndarray
    noise_std: float
    kind: LossKind
    feature_law: FeatureLaw = FeatureLaw.GAUSSIAN

    def __post_init__(self):
        self.ground_truths = np.atleast_2d(np.asarray(self.ground_truths, dtype=np.float64))
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(-1)
        self.kind = LossKind.from_name(self.kind)
        self.feature_law = FeatureLaw.from_name(self.feature_law)
        if np.any(self.covariance <= 0):
            raise ConfigError("covariance entries must be > 0", field='population.covariance')
        if self.covariance.shape[0] != self.ground_truths.shape[1]:
            raise ConfigError("covariance and ground truth dimensions differ", field='population')

    @property
    def M(self) -> int:
        return self.ground_truths.shape[0]

    @property
    def p(self) -> int:
        return self.ground_truths.shape[1]

    @property
    def max_feature_norm(self) -> Optional[float]:
        """Almost-sure bound on ||a||; None for unbounded Gaussian features."""
        if self.feature_law is FeatureLaw.RADEMACHER:
            return float(np.sqrt(np.sum(self.covariance)))
        return None

    def sample(self, rng: RngStream, m: int, n: int) -> Batch:
        """Draw n i.i.d. examples from device m's distribution."""
        if self.feature_law is FeatureLaw.RADEMACHER:
            signs = 2.0 * rng.integers(0, 2, (n, self.p)) - 1.0
        else:
            signs = rng.normal((n, self.p))
        features = signs * np.sqrt(self.covariance)
        labels = make_labels(self.kind, features, self.ground_truths[m], self.noise_std, rng)
        return Batch(features, labels)

    def to_dict(self) -> dict:
        return {
            'ground_truths': self.ground_truths.tolist(),
            'covariance': self.covariance.tolist(),
            'noise_std': self.noise_std,
            'kind': self.kind.value,
            'feature_law': self.feature_law.value,
        }


@dataclass
class FederatedInstance:
    """M device datasets, their loss, certified constants and optional population."""
    devices: Tuple[DeviceDataset, ...]
    loss: LossModel
    constants: LossConstants
    population: Optional[PopulationSpec] = None

    def __post_init__(self):
        self.devices = tuple(self.devices)
        if len(self.devices) < 1:
            raise ConfigError("an instance needs at least one device", field='instance.M')
        dims = {d.data.dimension for d in self.devices}
        if len(dims) != 1:
            raise ConfigError(f"devices disagree on dimension: {sorted(dims)}", field='instance.p')

    @property
    def M(self) -> int:
        return len(self.devices)

    @property
    def p(self) -> int:
        return self.devices[0].data.dimension

    def batches(self) -> List[Batch]:
        return [d.data for d in self.devices]

    def pooled(self) -> Batch:
        """Weighted pooled batch whose risk is (1/M) sum_m R^(m)."""
        return Batch.pooled(self.batches())

    def union(self) -> Batch:
        """All examples with uniform weights (for certification)."""
        return Batch(np.vstack([d.data.features for d in self.devices]),
                     np.concatenate([d.data.labels for d in self.devices]))

    def device_risk(self, m: int, w: ParamVector) -> Tuple[float, ParamVector]:
        return batch_risk_and_grad(self.loss, self.devices[m].data, w)

    def equals(self, other: 'FederatedInstance') -> bool:
        return (self.loss == other.loss
                and self.constants == other.constants
                and self.M == other.M
                and all(a.device_id == b.device_id and a.data.equals(b.data)
                        for a, b in zip(self.devices, other.devices)))


def make_labels(kind: LossKind, features: np.ndarray, truth: np.ndarray,
                noise_std: float, rng: RngStream) -> np.ndarray:
    """Labels for each loss kind from a ground truth plus Gaussian noise."""
    signal = features @ truth
    noise = rng.normal(signal.shape[0]) * noise_std
    if kind in (LossKind.QUADRATIC, LossKind.ABSOLUTE):
        return signal + noise
    if kind is LossKind.LOGISTIC:
        return np.where(signal + noise > 0.0, 1.0, -1.0)
    if kind is LossKind.SIGMOID_SQUARED:
        return np.where(signal + noise > 0.0, 1.0, 0.0)
    return signal ** 2 + noise


def ground_truths(cfg: HeterogeneityConfig, rng: RngStream) -> np.ndarray:
    """
    M x p ground truths whose mean distance to their centroid equals cfg.shift.

    shift = 0 (or M = 1) gives identical rows.
    """
    centre = rng.normal(cfg.p) * cfg.truth_scale / np.sqrt(cfg.p)
    truths = np.tile(centre, (cfg.M, 1))
    if cfg.shift > 0 and cfg.M > 1:
        offsets = np.vstack([rng.unit_vector(cfg.p) for _ in range(cfg.M)])
        offsets -= offsets.mean(axis=0)
        mean_length = float(np.mean(np.linalg.norm(offsets, axis=1)))
        if mean_length > 0:
            truths += offsets * (cfg.shift / mean_length)
    return truths


def generate_instance(cfg: HeterogeneityConfig, loss: LossModel, seed: int,
                      override_constants: Optional[dict] = None) -> FederatedInstance:
    """
    Generate a synthetic federated instance; a pure function of (cfg, loss, seed).

    Args:
        cfg: Instance shape
        loss: Loss family
        seed: Master seed
        override_constants: Optional {'G', 'L', 'nu'} values replacing certified ones

    Returns:
        FederatedInstance with a PopulationSpec attached
    """
    cfg.validate()
    rng = derive_stream(seed, [StreamPurpose.DATA])
    truths = ground_truths(cfg, rng.spawn(0))
    population = PopulationSpec(truths, cfg.covariance(), cfg.noise_std, loss.kind,
                                FeatureLaw.from_name(cfg.feature_law))

    sizes = cfg.device_sizes()
    devices = []
    if cfg.shared_data:
        shared = population.sample(rng.spawn(1, 0), 0, cfg.base_n)
        devices = [DeviceDataset(m, Batch(shared.features.copy(), shared.labels.copy()))
                   for m in range(cfg.M)]
    else:
        for m, n_m in enumerate(sizes):
            devices.append(DeviceDataset(m, population.sample(rng.spawn(1, m), m, n_m)))

    instance = FederatedInstance(tuple(devices), loss, LossConstants(0.0, None, None), population)
    instance.constants = apply_overrides(certify_constants(loss, instance.union()), override_constants)
    logger.info(f"Generated {loss.kind.value} instance: M={cfg.M}, p={cfg.p}, "
                f"sizes={sizes if cfg.M <= 8 else str(sizes[:8]) + '...'}, shift={cfg.shift}, "
                f"constants={instance.constants.to_dict()}")
    return instance


def apply_overrides(constants: LossConstants, overrides: Optional[dict]) -> LossConstants:
    if not overrides:
        return constants
    values = constants.to_dict()
    for key, value in overrides.items():
        if key not in values:
            raise ConfigError(f"unknown constant '{key}'", field='instance.override_constants')
        if value is not None:
            values[key] = float(value)
    logger.warning(f"Loss constants overridden: {values}")
    return LossConstants(**values)


def neighboring_instance(inst: FederatedInstance, m: int, i: int, z: Example) -> FederatedInstance:
    """
    Copy of the instance with example i of device m replaced by z.

    Constants are recertified over the new union of data.

    Raises:
        ConfigError: If m or i is out of range
    """
    if not 0 <= m < inst.M:
        raise ConfigError(f"device {m} out of range for M={inst.M}", field='device')
    if not 0 <= i < inst.devices[m].size:
        raise ConfigError(f"index {i} out of range for N_m={inst.devices[m].size}", field='index')
    devices = list(inst.devices)
    devices[m] = DeviceDataset(m, inst.devices[m].data.replaced(i, z))
    result = FederatedInstance(tuple(devices), inst.loss, inst.constants, inst.population)
    result.constants = certify_constants(inst.loss, result.union())
    return result


def population_gradient(spec: PopulationSpec, loss: LossModel, w: ParamVector, m: int) -> ParamVector:
    """
    Closed-form population gradient Sigma (w - w*_m) for the quadratic loss.

    Raises:
        DiagnosticError: For any other loss kind
    """
    if loss.kind is not LossKind.QUADRATIC:
        raise DiagnosticError("population gradient unavailable")
    return spec.covariance * (np.asarray(w, dtype=np.float64) - spec.ground_truths[m])


def homogeneous_config(M: int, p: int, n: int) -> HeterogeneityConfig:
    """Shared-data, zero-shift configuration: every device holds the same data."""
    return HeterogeneityConfig(M=M, p=p, base_n=n, shift=0.0, shared_data=True)
