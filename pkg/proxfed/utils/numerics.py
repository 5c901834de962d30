"""
Dense vector helpers and deterministic random streams.

Model parameters are plain 1-D float64 numpy arrays. Random streams are
counter-based (Philox) generators keyed by a master seed and a tag path such
as (purpose, round, device), so that the draws a device sees in a round never
depend on which thread solved which device, or in what order.
"""
import logging
from enum import IntEnum
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from proxfed.utils.errors import ConfigError

logger = logging.getLogger(__name__)

ParamVector = np.ndarray

SEED_MASK = 0xFFFF_FFFF_FFFF_FFFF


class StreamPurpose(IntEnum):
    """First tag of every stream path."""
    DATA = 0
    DEVICE_SAMPLING = 1
    MINIBATCH = 2
    LOCAL_SGD = 3
    T_STAR = 4
    PROBES = 5
    STABILITY = 6
    VERIFY = 7


def as_param(values: Union[Sequence[float], np.ndarray], name: str = 'w') -> ParamVector:
    """
    Convert values to a finite 1-D float64 parameter vector.

    Args:
        values: Coordinates
        name: Name used in error messages

    Returns:
        A new float64 array

    Raises:
        ConfigError: If the vector is empty, not 1-D or holds NaN/Inf
    """
    w = np.atleast_1d(np.array(values, dtype=np.float64))
    if w.ndim != 1 or w.size == 0:
        raise ConfigError(f"expected a non-empty vector, got shape {w.shape}", field=name)
    if not np.all(np.isfinite(w)):
        raise ConfigError("vector holds non-finite entries", field=name)
    return w


def check_same_dim(a: ParamVector, b: ParamVector):
    """Raise ConfigError unless both vectors have the same dimension."""
    if a.shape != b.shape:
        raise ConfigError(f"dimension mismatch: {a.shape} vs {b.shape}", field='dimension')


def dot(a: ParamVector, b: ParamVector) -> float:
    """
    Euclidean inner product.

    Raises:
        ConfigError: On dimension mismatch
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_dim(a, b)
    return float(np.dot(a, b))


def norm(a: ParamVector) -> float:
    return float(np.linalg.norm(a))


def sq_norm(a: ParamVector) -> float:
    return float(np.dot(a, a))


def is_finite(a: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(a)))


class RngStream:
    """A reproducible random stream identified by (master_seed, path)."""

    def __init__(self, master_seed: int, path: Tuple[int, ...] = ()):
        """
        Initialize the stream.

        Args:
            master_seed: 64-bit master seed (masked to 64 bits)
            path: Tag path, e.g. (StreamPurpose.MINIBATCH, round, device)
        """
        self.master_seed = int(master_seed) & SEED_MASK
        self.path = tuple(int(tag) for tag in path)
        if any(tag < 0 for tag in self.path):
            raise ConfigError(f"stream tags must be non-negative, got {self.path}", field='tags')
        sequence = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.master_seed}, path={self.path})"

    def spawn(self, *tags: int) -> 'RngStream':
        """Derive a child stream whose path extends this one."""
        return RngStream(self.master_seed, self.path + tuple(tags))

    def uniform(self, size: Optional[Union[int, Tuple[int, ...]]] = None) -> Union[float, np.ndarray]:
        """Uniform draws in [0, 1)."""
        return self.generator.random(size)

    def normal(self, size: Optional[Union[int, Tuple[int, ...]]] = None,
               scale: Union[float, np.ndarray] = 1.0) -> Union[float, np.ndarray]:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int,
                 size: Optional[Union[int, Tuple[int, ...]]] = None) -> Union[int, np.ndarray]:
        """Integers in [low, high)."""
        return self.generator.integers(low, high, size)

    def subset(self, n: int, k: int) -> np.ndarray:
        """Uniform k-subset of range(n) without replacement, sorted ascending."""
        return np.sort(self.generator.choice(n, size=k, replace=False))

    def unit_vector(self, p: int) -> np.ndarray:
        """Uniformly distributed point on the unit sphere in R^p."""
        v = self.generator.normal(size=p)
        length = np.linalg.norm(v)
        while length == 0.0:
            v = self.generator.normal(size=p)
            length = np.linalg.norm(v)
        return v / length

    def ball_point(self, p: int, radius: float) -> np.ndarray:
        """Uniformly distributed point in the ball of the given radius."""
        return self.unit_vector(p) * radius * self.generator.random() ** (1.0 / p)


def derive_stream(seed: int, tags: Iterable[int] = ()) -> RngStream:
    """
    Derive a deterministic stream from a master seed and a tag path.

    Identical (seed, tags) always give identical draws; distinct tag paths give
    independent Philox streams.
    """
    return RngStream(seed, tuple(tags))
