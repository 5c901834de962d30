"""
Configuration management utilities.
"""
import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from proxfed.loaders.synthetic import HeterogeneityConfig
from proxfed.problems.losses import LossKind, LossModel
from proxfed.processors.diagnostics import MoreauConfig
from proxfed.processors.engine import (
    Algorithm,
    EpsPolicy,
    FedAvgConfig,
    LocalSolver,
    RunConfig,
    SamplingMode,
    ScheduleKind,
)
from proxfed.processors.verification import VerifySettings
from proxfed.utils.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = 'PROXFED_THREADS'

# Keys whose value is a free-form mapping rather than a config section
_FREE_FORM = {'instance.override_constants'}


class Config:
    """Configuration management."""

    DEFAULT_CONFIG = {
        'instance': {
            'loss': 'logistic',
            'M': 8,
            'p': 5,
            'base_n': 50,
            'imbalance_exponent': 0.0,
            'shift': 1.0,
            'noise_std': 0.1,
            'feature_scale': 1.0,
            'truth_scale': 1.0,
            'shared_data': False,
            'feature_law': 'gaussian',  # gaussian or rademacher (bounded rows)
            'signal_rank': 0,  # leading coordinates at full scale; 0 for a flat spectrum
            'tail_scale': 1.0,
            'domain_radius': 10.0,
            'override_constants': None,  # e.g. {'G': 0.5}
            'file': None,  # load a saved instance instead of generating one
        },
        'run': {
            'algorithm': 'FedProx',  # FedProx, FedMSPP, FedAvg, CentralPPA
            'T': 100,
            'I': 4,
            'b': 1,
            'schedule': 'SmoothFedProx',  # SmoothFedProx, SmoothFedMSPP, NonsmoothRho, Manual
            'eps_policy': 'TheoremBudget',  # TheoremBudget, Fixed, Exact
            'eps_fixed': None,
            'sampling_mode': 'Empirical',  # Empirical or Population
            'seed': 0,
            'rho': None,
            'eta_manual': None,
            'fedavg': {
                'epochs': 1,
                'lr': 0.05,
                'minibatch': 10,
            },
            'local_solver': 'oracle',  # 'oracle' or 'sgd'
            'inner_K': 100000,
            'inner_solver': 'subgradient',  # 'subgradient' or 'dual' (absolute loss)
            'grad_tol': 1e-10,
            'full_batch_minibatch': False,
            'threads': None,
            'progress': True,
        },
        'diagnostics': {
            'moreau': False,
            'rho': None,
            'inner_K': 100000,
            'inner_eps': 1e-12,
            'inner_grad_tol': 1e-10,
            'inner_solver': 'auto',
            'lgd': True,
            'lgd_random_probes': 10,
            'lgd_probe_radius': 1.0,
            'full_directions': False,  # solve every device each round so d_bar_t exists when I < M
        },
        'stability': {
            'enabled': False,
            'trials': 200,
            'N': 20,
            'solver_eps': 1e-10,
            'eta': None,
            'samples': 200,
        },
        'verify': {
            'rounds': 50,
            'nonsmooth_rounds': 20,
            'nonsmooth_inner_K': 100000,
            'frozen_states': 3,
            'direction_trials': 10000,
            'probe_count': 200,
            'soundness_trials': 100,
            'stability_trials': 200,
            'stability_N': 20,
            'mc_samples': 200,
            'homogeneous': {'M': 8, 'p': 10, 'n': 100, 'T': 100},
        },
        'output': {
            'dir': 'results',
            'svg': True,
            'save_instance': True,
        },
        'logging': {
            'level': 'INFO',
        }
    }

    def __init__(self, config_dict: Dict[str, Any] = None):
        """
        Initialize configuration.

        Args:
            config_dict: Configuration dictionary (uses defaults if None)

        Raises:
            ConfigError: If config_dict holds a key the defaults do not know
        """
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        if config_dict:
            if not isinstance(config_dict, dict):
                raise ConfigError("configuration must be a mapping")
            self._update_recursive(self.config, config_dict)

    @classmethod
    def from_file(cls, config_path: str) -> 'Config':
        """
        Load configuration from a JSON or YAML file.

        Args:
            config_path: Path to a .json, .yaml or .yml file

        Returns:
            Config instance

        Raises:
            ConfigError: If the file cannot be read or parsed
        """
        path = Path(config_path)
        try:
            with open(path, 'r') as f:
                if path.suffix.lower() == '.json':
                    config_dict = json.load(f)
                else:
                    config_dict = yaml.safe_load(f)
        except (OSError, json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot load configuration from {config_path}: {e}")
        return cls(config_dict or {})

    def _update_recursive(self, base: dict, update: dict, prefix: str = ''):
        """Recursively update configuration dictionary, rejecting unknown keys."""
        for key, value in update.items():
            path = f"{prefix}{key}"
            if key not in base:
                raise ConfigError(f"unknown configuration key '{path}'", field=path)
            if isinstance(base[key], dict) and isinstance(value, dict) and path not in _FREE_FORM:
                self._update_recursive(base[key], value, f"{path}.")
            else:
                base[key] = value

    def get(self, path: str, default: Any = None) -> Any:
        """
        Get configuration value by path.

        Args:
            path: Dot-separated path (e.g., 'run.T')
            default: Default value if path not found

        Returns:
            Configuration value
        """
        value = self.config
        for key in path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, path: str, value: Any):
        """
        Set configuration value by path.

        Args:
            path: Dot-separated path (e.g., 'run.seed')
            value: Value to set
        """
        keys = path.split('.')
        config = self.config
        for key in keys[:-1]:
            if key not in config:
                config[key] = {}
            config = config[key]
        config[keys[-1]] = value

    def threads(self) -> int:
        """run.threads, else PROXFED_THREADS, else 1."""
        threads = self.get('run.threads')
        if threads is None:
            env = os.environ.get(THREADS_ENV)
            if env:
                try:
                    threads = int(env)
                except ValueError:
                    raise ConfigError(f"{THREADS_ENV} must be an integer, got '{env}'",
                                      field=THREADS_ENV)
        return 1 if threads is None else int(threads)

    def validate(self) -> bool:
        """
        Validate configuration.

        Returns:
            True when valid

        Raises:
            ConfigError: Naming the first invalid field
        """
        LossKind.from_name(self.get('instance.loss'))
        if not self.get('instance.file'):
            self.heterogeneity().validate()
        if not self.get('instance.domain_radius', 0) > 0:
            raise ConfigError("domain_radius must be positive", field='instance.domain_radius')

        for path, enum in (('run.algorithm', Algorithm), ('run.schedule', ScheduleKind),
                           ('run.eps_policy', EpsPolicy), ('run.sampling_mode', SamplingMode),
                           ('run.local_solver', LocalSolver)):
            try:
                enum.from_name(self.get(path))
            except ConfigError as e:
                raise ConfigError(str(e).split(': ', 1)[-1], field=path)

        for path in ('run.T', 'run.I', 'run.b', 'run.inner_K'):
            value = self.get(path)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be an integer >= 1, got {value!r}", field=path)
        M = self.get('instance.M')
        if not self.get('instance.file') and self.get('run.I') > M:
            raise ConfigError(f"I={self.get('run.I')} exceeds M={M}", field='run.I')
        if self.threads() < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads()}", field='run.threads')
        if self.get('diagnostics.lgd_random_probes') < 0:
            raise ConfigError("must be >= 0", field='diagnostics.lgd_random_probes')
        level = str(self.get('logging.level')).upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
            raise ConfigError(f"unknown level '{level}'", field='logging.level')
        return True

    def save(self, config_path: str) -> bool:
        """
        Save configuration to a JSON or YAML file (chosen by suffix).

        Args:
            config_path: Path to save configuration

        Returns:
            True if successful, False otherwise
        """
        try:
            with open(config_path, 'w') as f:
                if Path(config_path).suffix.lower() == '.json':
                    json.dump(self.config, f, indent=2)
                else:
                    yaml.dump(self.config, f, default_flow_style=False)
            return True
        except Exception as e:
            logger.error(f"Error saving config to {config_path}: {e}")
            return False

    # Builders

    def heterogeneity(self) -> HeterogeneityConfig:
        section = self.config['instance']
        return HeterogeneityConfig(
            M=section['M'], p=section['p'], base_n=section['base_n'],
            imbalance_exponent=section['imbalance_exponent'], shift=section['shift'],
            noise_std=section['noise_std'], feature_scale=section['feature_scale'],
            truth_scale=section['truth_scale'], shared_data=section['shared_data'],
            feature_law=section['feature_law'], signal_rank=section['signal_rank'],
            tail_scale=section['tail_scale'])

    def loss_model(self) -> LossModel:
        return LossModel(self.get('instance.loss'), float(self.get('instance.domain_radius')))

    def moreau_config(self) -> Optional[MoreauConfig]:
        """MoreauConfig from the diagnostics section (None when rho is unset)."""
        section = self.config['diagnostics']
        if section['rho'] is None:
            return None
        return MoreauConfig(rho=section['rho'], inner_K=section['inner_K'],
                            inner_eps=section['inner_eps'],
                            inner_grad_tol=section['inner_grad_tol'],
                            inner_solver=section['inner_solver'])

    def run_config(self) -> RunConfig:
        section = self.config['run']
        return RunConfig(
            algorithm=section['algorithm'], T=section['T'], I=section['I'], b=section['b'],
            schedule=section['schedule'], eps_policy=section['eps_policy'],
            eps_fixed=section['eps_fixed'], sampling_mode=section['sampling_mode'],
            seed=int(section['seed']), rho=section['rho'], eta_manual=section['eta_manual'],
            fedavg=FedAvgConfig(**section['fedavg']), local_solver=section['local_solver'],
            inner_K=section['inner_K'], inner_solver=section['inner_solver'],
            grad_tol=section['grad_tol'], full_batch_minibatch=section['full_batch_minibatch'],
            threads=self.threads(), track_moreau=bool(self.get('diagnostics.moreau')),
            moreau=self.moreau_config(), progress=bool(section['progress']),
            full_directions=bool(self.get('diagnostics.full_directions')))

    def verify_settings(self) -> VerifySettings:
        return VerifySettings(**copy.deepcopy(self.config['verify']))
