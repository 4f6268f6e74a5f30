"""Configuration management for the SIAN synthesis toolkit."""

import copy
import os
import re
import yaml
from typing import Dict, Any, Optional
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "config.yaml"

_ENV_PATTERN = re.compile(r"\$\{(\w+)(?::-([^}]*))?\}")


def expand_env(text: str) -> str:
    """Substitute ${VAR} and ${VAR:-default} references."""

    def _replace(match: "re.Match") -> str:
        name, default = match.group(1), match.group(2)
        value = os.environ.get(name)
        if value is None:
            return default if default is not None else match.group(0)
        return value

    return _ENV_PATTERN.sub(_replace, text)


class Config:
    """Configuration loader with environment variable support."""

    def __init__(self, config_path: Optional[str] = None):
        explicit = config_path is not None
        if config_path is None:
            config_path = DEFAULT_CONFIG_PATH

        self.config_path = Path(config_path)
        if explicit and not self.config_path.exists():
            raise FileNotFoundError(f"Configuration file not found: {self.config_path}")
        self.config = self._load_config()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Config":
        """Build a Config from an already-parsed mapping, e.g. a checkpoint snapshot."""
        obj = cls.__new__(cls)
        obj.config_path = None
        obj.config = copy.deepcopy(dict(data))
        return obj

    def _load_config(self) -> Dict[str, Any]:
        if self.config_path.exists():
            with open(self.config_path, "r") as f:
                config_text = f.read()
            config_text = expand_env(config_text)
            loaded = yaml.safe_load(config_text)
            if loaded is None:
                return {}
            if not isinstance(loaded, dict):
                raise ValueError(
                    f"Configuration root must be a mapping: {self.config_path}"
                )
            return loaded
        else:
            return {
                "logging": {
                    "level": os.getenv("SIAN_LOG_LEVEL", "INFO"),
                    "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
                },
                "network": {"image_size": 64, "n_blocks": 5},
                "training": {"seed": int(os.getenv("SIAN_SEED", "0"))},
            }

    def get(self, key: str, default: Any = None) -> Any:
        keys = key.split(".")
        value = self.config

        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default

        return value

    def set(self, key: str, value: Any) -> None:
        """Set a dotted key; string values are parsed as YAML scalars."""
        if isinstance(value, str):
            try:
                value = yaml.safe_load(value)
            except yaml.YAMLError as e:
                raise ValueError(f"Cannot parse override {key}={value!r}: {e}")

        keys = key.split(".")
        node = self.config
        for k in keys[:-1]:
            child = node.get(k)
            if child is None:
                child = {}
                node[k] = child
            elif not isinstance(child, dict):
                raise ValueError(f"Cannot set '{key}': '{k}' is not a section")
            node = child
        node[keys[-1]] = value

    def apply_overrides(self, overrides) -> None:
        for override in overrides or []:
            if "=" not in override:
                raise ValueError(f"Override must look like key=value, got {override!r}")
            key, raw = override.split("=", 1)
            self.set(key.strip(), raw.strip())

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.config)

    @property
    def log_level(self) -> str:
        return self.get("logging.level", "INFO")

    @property
    def metrics_log(self) -> str:
        return self.get("logging.metrics_log", "metrics.jsonl")

    @property
    def seed(self) -> int:
        return int(self.get("training.seed", 0))

    @property
    def image_size(self) -> int:
        return int(self.get("network.image_size", 64))

    @property
    def patch_size(self) -> int:
        return int(self.get("data.patch_size", self.image_size))

    @property
    def output_format(self) -> str:
        return self.get("output.format", "json")
