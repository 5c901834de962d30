"""
Tests for configuration management.
"""
import json
import shutil
import tempfile
from pathlib import Path

import pytest
import yaml

from proxfed.processors.engine import Algorithm, ScheduleKind
from proxfed.utils.config import Config
from proxfed.utils.errors import ConfigError


class TestConfig:
    """Test cases for Config."""

    @pytest.fixture
    def temp_dir(self):
        """Create a temporary directory."""
        temp_dir = tempfile.mkdtemp()
        yield temp_dir
        shutil.rmtree(temp_dir)

    def test_defaults_valid(self):
        """Test that the defaults validate."""
        assert Config().validate()

    def test_get_and_set(self):
        """Test dotted access."""
        config = Config()
        assert config.get('run.T') == 100
        assert config.get('run.missing', 'x') == 'x'
        config.set('run.T', 7)
        assert config.get('run.T') == 7

    def test_partial_update(self):
        """Test that nested sections merge with defaults."""
        config = Config({'run': {'fedavg': {'lr': 0.5}}})
        assert config.get('run.fedavg.lr') == 0.5
        assert config.get('run.fedavg.epochs') == 1

    def test_unknown_key(self):
        """Test that unknown keys raise naming the path."""
        with pytest.raises(ConfigError, match='run.rounds'):
            Config({'run': {'rounds': 5}})

    def test_free_form_overrides(self):
        """Test that constant overrides are taken as given."""
        config = Config({'instance': {'override_constants': {'G': 0.5}}})
        assert config.get('instance.override_constants') == {'G': 0.5}

    def test_too_many_devices(self):
        """Test that I > M names run.I."""
        config = Config({'instance': {'M': 3}, 'run': {'I': 4}})
        with pytest.raises(ConfigError, match='run.I'):
            config.validate()

    def test_bad_enum(self):
        """Test that an unknown algorithm names run.algorithm."""
        with pytest.raises(ConfigError, match='run.algorithm'):
            Config({'run': {'algorithm': 'FedSGD'}}).validate()

    def test_bad_loss(self):
        """Test that an unknown loss names instance.loss."""
        with pytest.raises(ConfigError, match='instance.loss'):
            Config({'instance': {'loss': 'hinge'}}).validate()

    def test_non_integer_rounds(self):
        """Test that T must be a positive integer."""
        with pytest.raises(ConfigError, match='run.T'):
            Config({'run': {'T': 0}}).validate()

    def test_from_yaml(self, temp_dir):
        """Test loading YAML."""
        path = Path(temp_dir) / 'config.yaml'
        path.write_text(yaml.dump({'run': {'T': 12, 'algorithm': 'FedMSPP'}}))
        config = Config.from_file(str(path))
        assert config.get('run.T') == 12
        assert config.run_config().algorithm is Algorithm.FEDMSPP

    def test_from_json(self, temp_dir):
        """Test loading JSON."""
        path = Path(temp_dir) / 'config.json'
        path.write_text(json.dumps({'instance': {'loss': 'quadratic'}}))
        assert Config.from_file(str(path)).loss_model().kind.value == 'quadratic'

    def test_missing_file(self, temp_dir):
        """Test that a missing file raises."""
        with pytest.raises(ConfigError):
            Config.from_file(str(Path(temp_dir) / 'nope.yaml'))

    def test_malformed_file(self, temp_dir):
        """Test that malformed YAML raises."""
        path = Path(temp_dir) / 'bad.yaml'
        path.write_text('run: [unclosed')
        with pytest.raises(ConfigError):
            Config.from_file(str(path))

    def test_save_and_reload(self, temp_dir):
        """Test that a saved configuration reloads identically."""
        config = Config({'run': {'seed': 99}})
        for name in ('saved.yaml', 'saved.json'):
            path = str(Path(temp_dir) / name)
            assert config.save(path)
            assert Config.from_file(path).config == config.config

    def test_threads_env(self, monkeypatch):
        """Test the thread-count environment variable."""
        monkeypatch.setenv('PROXFED_THREADS', '3')
        assert Config().threads() == 3
        assert Config({'run': {'threads': 2}}).threads() == 2
        monkeypatch.setenv('PROXFED_THREADS', 'many')
        with pytest.raises(ConfigError):
            Config().threads()

    def test_threads_default(self, monkeypatch):
        """Test one thread without configuration."""
        monkeypatch.delenv('PROXFED_THREADS', raising=False)
        assert Config().threads() == 1

    def test_builders(self):
        """Test the typed section builders."""
        config = Config({'instance': {'M': 5, 'p': 2}, 'run': {'schedule': 'Manual', 'eta_manual': 0.1}})
        het = config.heterogeneity()
        assert (het.M, het.p) == (5, 2)
        run_cfg = config.run_config()
        assert run_cfg.schedule is ScheduleKind.MANUAL
        assert run_cfg.eta_manual == 0.1
        assert config.moreau_config() is None
        config.set('diagnostics.rho', 0.05)
        assert config.moreau_config().rho == 0.05
        assert config.verify_settings().rounds == 50

    def test_feature_and_direction_keys(self):
        """Test that the feature law, spectrum and full-direction keys reach the builders."""
        config = Config({'instance': {'feature_law': 'rademacher', 'signal_rank': 2,
                                      'tail_scale': 0.1},
                         'diagnostics': {'full_directions': True}})
        het = config.heterogeneity()
        assert (het.feature_law, het.signal_rank, het.tail_scale) == ('rademacher', 2, 0.1)
        assert config.run_config().full_directions
        assert not Config().run_config().full_directions

    def test_bad_feature_law(self):
        """Test that an unknown feature law names its key."""
        with pytest.raises(ConfigError, match='instance.feature_law'):
            Config({'instance': {'feature_law': 'cauchy'}}).validate()
