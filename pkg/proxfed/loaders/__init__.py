from .synthetic import (
    FederatedInstance,
    HeterogeneityConfig,
    PopulationSpec,
    generate_instance,
    neighboring_instance,
    population_gradient,
)
from .instance_io import load_instance, save_instance

__all__ = ['FederatedInstance', 'HeterogeneityConfig', 'PopulationSpec', 'generate_instance',
           'neighboring_instance', 'population_gradient', 'load_instance', 'save_instance']
