"""Configuration management for entity-vqa."""
import copy
import os
from typing import Any, Dict

import yaml


class Config:
    """Configuration loader and manager."""

    def __init__(self, config_path: str = None):
        """Initialize configuration.

        Args:
            config_path: Path to config file. If None, uses default config.yaml
        """
        if config_path is None:
            config_path = os.path.join(
                os.path.dirname(__file__), "..", "..", "config.yaml"
            )

        self.config_path = config_path
        self.config = self._load_config()

    @classmethod
    def defaults(cls) -> 'Config':
        """Configuration holding only the built-in defaults."""
        cfg = cls.__new__(cls)
        cfg.config_path = ''
        cfg.config = cfg._get_default_config()
        return cfg

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file, layered over the defaults."""
        config = self._get_default_config()
        if os.path.exists(self.config_path):
            with open(self.config_path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f) or {}
            if not isinstance(loaded, dict):
                raise ValueError(f"config file {self.config_path} must hold a mapping")
            _merge(config, loaded)
        return config

    def _get_default_config(self) -> Dict[str, Any]:
        """Get default configuration."""
        return {
            'seed': 0,
            'logging': {
                'level': 'WARNING',
            },
            'index': {
                'path': 'data/index.sntidx',
                'backend': 'flat',
                'n_lists': 16,
                'n_scan': 4,
            },
            'detection': {
                'enabled': True,
                'backend': '',
                'min_confidence': 0.3,
                'timeout': 10.0,
            },
            'encoder': {
                'backend': '',
                'timeout': 10.0,
            },
            'resolution': {
                'k': 5,
                'min_score': 0.5,
                'min_margin': 0.05,
            },
            'knowledge': {
                'kb_path': '',
                'budget': 5,
                'recency_window_days': 7,
                'recency_bonus': 0.5,
                'fetchers': [],
                'default_timeout': 3.0,
            },
            'generation': {
                'generator': 'template',
                'timeout': 30.0,
                'token_budget': 512,
                'max_in_flight': 4,
            },
            'evaluation': {
                'judge_threshold': 0.2,
                'max_n': 4,
            },
            'dataset': {
                'min_images': 10,
                'sample_fraction': 0.1,
                'pageview_url': '',
                'max_workers': 4,
            },
            'adapter': {
                'n_latents': 64,
                'd_text': 32,
                'd_img': 16,
                'n_patches': 49,
                'vocab_size': 128,
                'n_layers': 1,
                'profile': 'full',
                'lr': 0.05,
                'steps': 200,
            },
        }

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by dot-separated key.

        Args:
            key: Dot-separated key (e.g., 'resolution.k')
            default: Default value if key not found

        Returns:
            Configuration value
        """
        keys = key.split('.')
        value = self.config
        for k in keys:
            if isinstance(value, dict):
                value = value.get(k)
            else:
                return default
            if value is None:
                return default
        return value

    def set(self, key: str, value: Any):
        """Set configuration value by dot-separated key.

        Args:
            key: Dot-separated key (e.g., 'resolution.min_score')
            value: Value to set
        """
        keys = key.split('.')
        config = self.config
        for k in keys[:-1]:
            if k not in config or not isinstance(config[k], dict):
                config[k] = {}
            config = config[k]
        config[keys[-1]] = value

    def resolve_path(self, key: str) -> str:
        """Get a path-valued setting, relative paths resolved against the config file."""
        return self.relative_path(self.get(key, ''))

    def relative_path(self, value: str) -> str:
        if not value or os.path.isabs(value) or not os.path.exists(self.config_path):
            return value
        return os.path.join(os.path.dirname(os.path.abspath(self.config_path)), value)

    def resolve_backend(self, key: str) -> str:
        """Get a ``scheme:target`` backend spec; ``fixture:`` paths resolve like resolve_path."""
        spec = self.get(key, '') or ''
        scheme, _, target = spec.partition(':')
        if scheme == 'fixture' and target:
            return f"fixture:{self.relative_path(target)}"
        return spec

    def save(self, path: str = None):
        """Save configuration to file.

        Args:
            path: Path to save config. If None, uses original config_path
        """
        save_path = path or self.config_path
        dir_path = os.path.dirname(save_path)
        if dir_path:
            os.makedirs(dir_path, exist_ok=True)
        with open(save_path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.config, f, default_flow_style=False, sort_keys=False)


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> None:
    """Recursively merge ``override`` into ``base`` in place."""
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
