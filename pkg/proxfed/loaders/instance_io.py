"""
JSON layout for federated instances.

Layout (format_version 1)::

    {
      "format_version": 1,
      "dimension": p,
      "loss": {"kind": "logistic", "domain_radius": 10.0},
      "constants": {"G": ..., "L": ... or null, "nu": ... or null},
      "devices": [
        {"device_id": 0, "features": [[...], ...], "labels": [...]},
        ...
      ],
      "population": null or {"ground_truths": [[...]], "covariance": [...],
                             "noise_std": ..., "kind": "...",
                             "feature_law": "gaussian" or "rademacher"}
    }

Floats are written with repr precision, so a save/load cycle is exact.
"""
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from proxfed.loaders.synthetic import DeviceDataset, FederatedInstance, PopulationSpec
from proxfed.problems.losses import Batch, LossConstants, LossModel
from proxfed.utils.errors import ConfigError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def instance_to_dict(instance: FederatedInstance) -> dict:
    return {
        'format_version': FORMAT_VERSION,
        'dimension': instance.p,
        'loss': {'kind': instance.loss.kind.value, 'domain_radius': instance.loss.domain_radius},
        'constants': instance.constants.to_dict(),
        'devices': [
            {
                'device_id': d.device_id,
                'features': d.data.features.tolist(),
                'labels': d.data.labels.tolist(),
            }
            for d in instance.devices
        ],
        'population': instance.population.to_dict() if instance.population is not None else None,
    }


def instance_from_dict(payload: dict) -> FederatedInstance:
    """
    Rebuild an instance from its JSON layout.

    Raises:
        ConfigError: On a missing key, unknown version or dimension mismatch
    """
    try:
        version = payload['format_version']
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported instance format version {version}", field='format_version')
        dimension = int(payload['dimension'])
        loss = LossModel(payload['loss']['kind'], float(payload['loss']['domain_radius']))
        constants = LossConstants(**payload['constants'])
        devices = []
        for entry in payload['devices']:
            data = Batch(np.asarray(entry['features'], dtype=np.float64).reshape(-1, dimension),
                         np.asarray(entry['labels'], dtype=np.float64))
            devices.append(DeviceDataset(int(entry['device_id']), data))
        population: Optional[PopulationSpec] = None
        if payload.get('population'):
            population = PopulationSpec(**payload['population'])
    except KeyError as e:
        raise ConfigError(f"instance file is missing key {e}", field=str(e))
    return FederatedInstance(tuple(devices), loss, constants, population)


def save_instance(instance: FederatedInstance, path: str) -> bool:
    """
    Save an instance as JSON.

    Returns:
        True if successful, False otherwise
    """
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(instance_to_dict(instance), f)
        logger.info(f"Saved instance with {instance.M} devices to {path}")
        return True
    except Exception as e:
        logger.error(f"Error saving instance to {path}: {e}")
        return False


def load_instance(path: str) -> FederatedInstance:
    """Load an instance written by save_instance."""
    logger.info(f"Loading instance from {path}")
    with open(path, 'r') as f:
        return instance_from_dict(json.load(f))
