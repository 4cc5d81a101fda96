"""
Environment manager for loading machine-specific configuration overrides.
"""

import os
from typing import Dict, Optional, Tuple

import yaml
from dotenv import dotenv_values

from .utils.exceptions import ConfigurationException
from .utils.logger import logger

ENV_PREFIX = "SIU3R_"


class EnvManager:
    """Collects SIU3R_<SECTION>__<KEY> overrides from .env files and the process environment."""

    def __init__(self, env_dir: str = None):
        """
        Initialize environment manager.

        Args:
            env_dir: Directory containing .env files (default: current directory)
        """
        self.env_dir = env_dir or os.getcwd()
        self.env_cache = {}

    def get_overrides(self, profile: Optional[str] = None) -> Dict[Tuple[str, str], object]:
        """
        Get configuration overrides for a profile.

        Looks for .env (no profile) or .env.{profile} in env_dir; process
        environment variables take precedence over file values.

        Args:
            profile: Profile name (e.g., 'laptop', 'cluster')

        Returns:
            Mapping of (section, key) to parsed values

        Raises:
            ConfigurationException: If a requested profile file is missing or a
                variable name is malformed
        """
        cache_key = profile or ""
        if cache_key in self.env_cache:
            return self.env_cache[cache_key]

        env_filename = f".env.{profile}" if profile else ".env"
        env_path = os.path.join(self.env_dir, env_filename)

        raw = {}
        if os.path.exists(env_path):
            raw.update(dotenv_values(env_path))
            logger.info(f"Loaded overrides file: {env_filename}")
        elif profile:
            raise ConfigurationException(
                f"Profile file not found: {env_filename}\n"
                f"Expected location: {env_path}"
            )

        raw.update({k: v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)})

        overrides = {}
        for name, value in raw.items():
            if not name.startswith(ENV_PREFIX) or value is None:
                continue
            body = name[len(ENV_PREFIX):]
            if "__" not in body:
                raise ConfigurationException(
                    f"Malformed override '{name}': expected {ENV_PREFIX}<SECTION>__<KEY>"
                )
            section, key = body.split("__", 1)
            overrides[(section.lower(), key.lower())] = yaml.safe_load(value)

        if overrides:
            logger.debug(f"Environment overrides: {sorted(overrides)}")
        self.env_cache[cache_key] = overrides
        return overrides

    def clear_cache(self):
        """Clear the overrides cache."""
        self.env_cache = {}
