"""
Device and minibatch sampling for one federated round.
"""
import logging
from typing import List, Union

import numpy as np

from proxfed.loaders.synthetic import DeviceDataset, PopulationSpec
from proxfed.problems.losses import Batch
from proxfed.utils.errors import ConfigError
from proxfed.utils.numerics import RngStream

logger = logging.getLogger(__name__)


def sample_devices(rng: RngStream, M: int, I: int) -> List[int]:
    """
    Uniform size-I subset of range(M) drawn without replacement.

    Args:
        rng: Round stream
        M: Number of devices
        I: Devices per round

    Returns:
        Sorted device ids

    Raises:
        ConfigError: Unless 1 <= I <= M
    """
    if not 1 <= I <= M:
        raise ConfigError(f"I={I} must satisfy 1 <= I <= M={M}", field='run.I')
    if I == M:
        return list(range(M))
    return [int(m) for m in rng.subset(M, I)]


def sample_minibatch(rng: RngStream, source: Union[DeviceDataset, PopulationSpec, Batch],
                     b: int, device: int = 0) -> Batch:
    """
    Draw b i.i.d. examples.

    A DeviceDataset (or Batch) is resampled with replacement from its empirical
    distribution; a PopulationSpec yields b fresh draws from device `device`.

    Raises:
        ConfigError: If b < 1
    """
    if b < 1:
        raise ConfigError(f"b must be >= 1, got {b}", field='run.b')
    if isinstance(source, PopulationSpec):
        return source.sample(rng, device, b)
    data = source.data if isinstance(source, DeviceDataset) else source
    indices = rng.integers(0, len(data), size=b)
    return data.take(np.asarray(indices))
