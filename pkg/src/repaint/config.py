"""Configuration loading for the regeneration harness."""

import json
import logging
import os
from pathlib import Path
from typing import Any, Mapping

from pydantic import ValidationError as PydanticValidationError

from repaint.core import (
    BackendEndpoints,
    ImageSettings,
    IutLimits,
    MockSettings,
    RunConfig,
    default_fan_out,
)
from repaint.errors import ConfigError

# Configure logger
logger = logging.getLogger(__name__)

ENV_PREFIX = "REPAINT_"

# Environment variables that do not follow the REPAINT_<SECTION>_<KEY> pattern.
ENV_ALIASES = {
    "REPAINT_MLLM_URL": ("backend", "mllm_url"),
    "REPAINT_TEXT_URL": ("backend", "text_url"),
    "REPAINT_T2I_URL": ("backend", "t2i_url"),
    "REPAINT_EMBED_URL": ("backend", "embed_url"),
    "REPAINT_API_KEY": ("backend", "api_key"),
}

# Command-line flag name -> (section, key)
FLAG_KEYS = {
    "iterations": ("run", "iterations"),
    "fanout": ("run", "fan_out"),
    "weights": ("run", "weights"),
    "seed": ("run", "seed"),
    "jobs": ("run", "concurrency"),
    "prompt_mode": ("run", "prompt_mode"),
    "model_id": ("run", "model_id"),
    "mock": ("mock", "enabled"),
    "out": ("paths", "out_dir"),
    "cache_dir": ("paths", "cache_dir"),
    "log_level": ("logging", "level"),
    "log_json": ("logging", "json"),
}

# RunConfig field -> config path used in error messages
FIELD_PATHS = {
    "max_iterations": "run.iterations",
    "fan_out": "run.fan_out",
    "weights": "run.weights",
    "concurrency": "run.concurrency",
    "base_seed": "run.seed",
    "seed_policy": "run.seed_policy",
    "prompt_mode": "run.prompt_mode",
    "model_id": "run.model_id",
    "endpoints": "backend",
    "repair_attempts": "backend.repair_attempts",
    "transport_retries": "backend.transport_retries",
    "timeout_s": "backend.timeout_s",
    "limits": "limits",
    "image": "image",
    "mock": "mock",
    "use_mock": "mock.enabled",
    "costs": "costs",
    "cache_dir": "paths.cache_dir",
    "out_dir": "paths.out_dir",
    "log_level": "logging.level",
    "log_json": "logging.json",
}

DEFAULT_CONFIG_NAME = "default_config.json"


def _coerce(value: str, default: Any, name: str) -> Any:
    """Convert an environment string to the type of the default value."""
    try:
        if isinstance(default, bool):
            return value.lower() in ["true", "1", "yes"]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return [int(v) for v in items]
            if default and isinstance(default[0], float):
                return [float(v) for v in items]
            return items
    except ValueError as e:
        raise ConfigError(name, f"cannot parse '{value}': {e}") from e
    return value


def parse_number_list(value: str, kind: type = float) -> list:
    """Parse a comma-separated flag value such as ``4,3,3``."""
    try:
        return [kind(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError("flags", f"cannot parse list '{value}': {e}") from e


class Config:
    """Layered configuration: defaults, config file, .env file, environment, flags."""

    def __init__(
        self,
        config_path: str | None = None,
        env_file_path: str | None = None,
        environ: Mapping[str, str] | None = None,
    ):
        """Initialize the configuration.

        Args:
            config_path: Optional path to a configuration file
            env_file_path: Optional path to a .env file
            environ: Environment to read, defaults to ``os.environ``
        """
        self._config_path = config_path
        self._environ = dict(os.environ if environ is None else environ)
        self._config_cache: dict[str, Any] = {}
        self._env_vars: dict[str, str] = {}
        self.explicit: set[str] = set()
        self.config: dict[str, Any] = {}

        # Load configuration in order of precedence:
        # 1. Built-in default_config.json
        # 2. Config file from REPAINT_CONFIG
        # 3. Config file from constructor parameter
        # 4. .env file
        # 5. Environment variables
        self._load_default_config()

        env_config_path = self._environ.get("REPAINT_CONFIG")
        if env_config_path:
            self._load_config_from_json(env_config_path)
        if config_path:
            self._load_config_from_json(config_path)

        if env_file_path:
            self._load_env_file(env_file_path)
        elif (Path.cwd() / ".env").is_file():
            self._load_env_file(str(Path.cwd() / ".env"))

        self._load_from_environment_variables()

    def _load_default_config(self) -> None:
        """Load the built-in default_config.json from the project root or cwd."""
        candidates = [
            Path(__file__).parent.parent.parent / DEFAULT_CONFIG_NAME,
            Path.cwd() / DEFAULT_CONFIG_NAME,
        ]
        for path in candidates:
            if path.is_file():
                try:
                    self.config = json.loads(path.read_text(encoding="utf-8"))
                except (OSError, json.JSONDecodeError) as e:
                    raise ConfigError("defaults", f"cannot load {path}: {e}") from e
                logger.debug(f"Loaded default configuration from {path}")
                return
        logger.warning(f"Could not find {DEFAULT_CONFIG_NAME}, using built-in defaults")
        self.config = {}

    def _load_config_from_json(self, config_path: str) -> None:
        """Merge a JSON configuration file into the current configuration.

        Raises:
            ConfigError: If the file is missing or not a JSON object
        """
        path = Path(config_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from e
        if not text.strip():
            logger.info(f"Configuration file {path} is empty, keeping defaults")
            return
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config", f"{path} must contain a JSON object")
        self._update_config_recursively(self.config, loaded)
        self._mark_explicit(loaded)
        logger.info(f"Loaded configuration from {path}")

    def _mark_explicit(self, source: dict[str, Any]) -> None:
        for section, values in source.items():
            if isinstance(values, dict):
                self.explicit.update(f"{section}.{key}" for key in values)

    def _update_config_recursively(self, target: dict, source: dict) -> None:
        """Recursively update configuration dictionary.

        Args:
            target: Target dictionary to update
            source: Source dictionary with new values
        """
        for key, value in source.items():
            if (
                key in target
                and isinstance(target[key], dict)
                and isinstance(value, dict)
            ):
                self._update_config_recursively(target[key], value)
            else:
                target[key] = value

    def _load_env_file(self, env_file_path: str) -> None:
        """Collect REPAINT_* assignments from a .env file.

        Args:
            env_file_path: Path to the .env file
        """
        try:
            with open(env_file_path, encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line or line.startswith("#") or "=" not in line:
                        continue
                    key, value = line.split("=", 1)
                    key = key.strip()
                    value = value.strip()

                    # Remove quotes if present
                    if (value.startswith('"') and value.endswith('"')) or (
                        value.startswith("'") and value.endswith("'")
                    ):
                        value = value[1:-1]

                    if key.startswith(ENV_PREFIX):
                        self._env_vars[key] = value
        except OSError as e:
            raise ConfigError("env", f"cannot read {env_file_path}: {e}") from e

    def _load_from_environment_variables(self) -> None:
        """Apply REPAINT_* variables; the process environment wins over .env."""
        for key, value in self._environ.items():
            if key.startswith(ENV_PREFIX):
                self._env_vars[key] = value

        for key, value in sorted(self._env_vars.items()):
            if key == "REPAINT_CONFIG":
                continue
            if key in ENV_ALIASES:
                section, setting = ENV_ALIASES[key]
            else:
                section, setting = self._split_env_key(key)
                if section is None:
                    logger.warning(f"Ignoring unknown configuration variable {key}")
                    continue
            default = self.config.get(section, {}).get(setting)
            coerced = _coerce(value, default, f"{section}.{setting}")
            self.config.setdefault(section, {})[setting] = coerced
            self.explicit.add(f"{section}.{setting}")

    def _split_env_key(self, key: str) -> tuple[str | None, str]:
        rest = key[len(ENV_PREFIX):].lower()
        for section in sorted(self.config, key=len, reverse=True):
            prefix = f"{section}_"
            if rest.startswith(prefix) and rest[len(prefix):] in self.config[section]:
                return section, rest[len(prefix):]
        return None, rest

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get a configuration value.

        Args:
            section: Configuration section
            key: Configuration key
            default: Default value if not found

        Returns:
            The configuration value
        """
        cache_key = f"{section}.{key}"
        if cache_key in self._config_cache:
            return self._config_cache[cache_key]

        if section in self.config and key in self.config[section]:
            value = self.config[section][key]
            self._config_cache[cache_key] = value
            return value
        return default

    def get_section(self, section: str) -> dict[str, Any]:
        return self.config.get(section, {})

    def get_all(self) -> dict[str, Any]:
        return self.config

    def update(self, updates: dict[str, Any]) -> None:
        """Merge updates (e.g. command-line flags) into the configuration.

        Args:
            updates: Dictionary with configuration updates, by section
        """
        self._update_config_recursively(self.config, updates)
        self._mark_explicit(updates)
        self._config_cache.clear()

    def apply_flags(self, flags: Mapping[str, Any]) -> None:
        """Apply command-line flags; ``None`` means the flag was not given."""
        updates: dict[str, dict[str, Any]] = {}
        for name, value in flags.items():
            if value is None or name not in FLAG_KEYS:
                continue
            section, key = FLAG_KEYS[name]
            updates.setdefault(section, {})[key] = value
        if updates:
            self.update(updates)

    def to_run_config(self) -> RunConfig:
        """Validate the merged configuration into a RunConfig.

        When the iteration count changes but no fan-out schedule was given, the
        default schedule for that count is used.

        Raises:
            ConfigError: Naming the offending field path
        """
        run = self.get_section("run")
        backend = self.get_section("backend")
        iterations = run.get("iterations", 4)
        fan_out = run.get("fan_out")
        if fan_out is None or (
            "run.fan_out" not in self.explicit
            and isinstance(iterations, int)
            and iterations >= 1
            and len(fan_out) != iterations
        ):
            fan_out = default_fan_out(iterations) if isinstance(iterations, int) else []

        fields = {
            "max_iterations": iterations,
            "fan_out": fan_out,
            "weights": run.get("weights"),
            "concurrency": run.get("concurrency"),
            "base_seed": run.get("seed"),
            "seed_policy": run.get("seed_policy"),
            "prompt_mode": run.get("prompt_mode"),
            "model_id": run.get("model_id"),
            "repair_attempts": backend.get("repair_attempts"),
            "transport_retries": backend.get("transport_retries"),
            "timeout_s": backend.get("timeout_s"),
            "costs": self.get_section("costs") or None,
            "cache_dir": self.get("paths", "cache_dir"),
            "out_dir": self.get("paths", "out_dir"),
            "use_mock": self.get("mock", "enabled"),
            "log_level": self.get("logging", "level"),
            "log_json": self.get("logging", "json"),
        }
        nested = {
            "endpoints": (
                BackendEndpoints,
                {k: v for k, v in backend.items() if k in BackendEndpoints.model_fields},
            ),
            "limits": (IutLimits, self.get_section("limits")),
            "image": (ImageSettings, self.get_section("image")),
            "mock": (
                MockSettings,
                {k: v for k, v in self.get_section("mock").items() if k != "enabled"},
            ),
        }
        for name, (model, values) in nested.items():
            try:
                fields[name] = model.model_validate(values)
            except PydanticValidationError as e:
                error = e.errors()[0]
                raise ConfigError(
                    _field_path((name,) + tuple(error["loc"])), error["msg"]
                ) from e
        try:
            return RunConfig.model_validate(
                {k: v for k, v in fields.items() if v is not None}
            )
        except PydanticValidationError as e:
            error = e.errors()[0]
            raise ConfigError(_field_path(tuple(error["loc"])), error["msg"]) from e


def _field_path(loc: tuple) -> str:
    # Model-level validators report an empty location; the only one checks the schedule.
    if not loc:
        return "run.fan_out"
    head = str(loc[0])
    rest = [str(part) for part in loc[1:] if not isinstance(part, int)]
    return ".".join([FIELD_PATHS.get(head, head)] + rest)


def load_config(
    path: str | None = None,
    env: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
    env_file: str | None = None,
) -> RunConfig:
    """Resolve the run configuration: flags > env > file > defaults.

    Raises:
        ConfigError: Unreadable file or invalid value, naming the field path
    """
    config = Config(config_path=path, env_file_path=env_file, environ=env)
    if flags:
        config.apply_flags(flags)
    return config.to_run_config()
