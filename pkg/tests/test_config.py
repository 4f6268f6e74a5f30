"""Tests for configuration management."""

import os

import pytest

from config import Config, expand_env


class TestConfig:
    """Test configuration loading and management."""

    def test_load_valid_config(self, mock_config):
        """Test loading a valid configuration file."""
        config = Config(mock_config)

        assert config.image_size == 32
        assert config.patch_size == 32
        assert config.seed == 0
        assert config.output_format == "json"
        assert config.metrics_log == "metrics.jsonl"

    def test_config_not_found(self):
        """Test handling of missing configuration file."""
        with pytest.raises(FileNotFoundError, match="missing.cfg"):
            Config("/non/existent/missing.cfg")

    def test_environment_variable_substitution(self, tmp_path, monkeypatch):
        """Test that environment variables are substituted in config."""
        monkeypatch.setenv("TEST_SIAN_SEED", "17")
        config_file = tmp_path / "config.yaml"
        config_file.write_text(
            """
training:
  seed: ${TEST_SIAN_SEED}
logging:
  level: ${TEST_SIAN_UNSET_LEVEL:-DEBUG}
"""
        )

        config = Config(str(config_file))

        assert config.seed == 17
        assert config.log_level == "DEBUG"

    def test_expand_env_leaves_unknown_without_default(self, monkeypatch):
        monkeypatch.delenv("TEST_SIAN_NOPE", raising=False)
        assert expand_env("a ${TEST_SIAN_NOPE} b") == "a ${TEST_SIAN_NOPE} b"

    def test_get_with_dot_notation(self, mock_config):
        """Test getting configuration values with dot notation."""
        config = Config(mock_config)

        assert config.get("network.discriminator.n_layers") == 3
        assert config.get("maskgen.layout.canvas") == [32, 32]
        assert config.get("downstream.synthetic_count") == 2

    def test_get_with_default(self, mock_config):
        """Test getting configuration values with defaults."""
        config = Config(mock_config)

        assert config.get("non.existent.key", "default") == "default"
        assert config.get("network.non_existent", 42) == 42

    def test_overrides_parse_yaml_scalars(self, mock_config):
        config = Config(mock_config)
        config.apply_overrides(["training.epochs=5", "losses.lambda_kld=0.5", "network.use_style=false"])

        assert config.get("training.epochs") == 5
        assert config.get("losses.lambda_kld") == 0.5
        assert config.get("network.use_style") is False

    def test_override_creates_missing_sections(self, mock_config):
        config = Config(mock_config)
        config.set("brand.new.key", "7")
        assert config.get("brand.new.key") == 7

    def test_malformed_override(self, mock_config):
        config = Config(mock_config)
        with pytest.raises(ValueError, match="key=value"):
            config.apply_overrides(["training.epochs"])

    def test_override_through_scalar_fails(self, mock_config):
        config = Config(mock_config)
        with pytest.raises(ValueError, match="not a section"):
            config.set("training.epochs.inner", 1)

    def test_non_mapping_root(self, tmp_path):
        config_file = tmp_path / "list.yaml"
        config_file.write_text("- a\n- b\n")
        with pytest.raises(ValueError, match="mapping"):
            Config(str(config_file))

    def test_from_dict_is_a_copy(self):
        data = {"training": {"seed": 3}}
        config = Config.from_dict(data)
        config.set("training.seed", 4)

        assert config.seed == 4
        assert data["training"]["seed"] == 3

    def test_default_config_ships_desk_scale(self):
        """The shipped config trains 64x64 images with five blocks."""
        config = Config()
        assert config.image_size == 64
        assert config.get("network.n_blocks") == 5
        assert os.path.basename(str(config.config_path)) == "config.yaml"
