"""
Configuration for relayctl and the components it hosts.

Global values resolve in this order: command-line flags, then the process
environment, then a dotenv-format config file. The file is the one named by
``--config``, else ``$RELAY_CONFIG``, else ``./relayctl.env`` when present.
Config files use the same variable names as the environment.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError, field_validator

from mdx_relay.core.errors import ConfigError, ParameterError
from mdx_relay.core.manifest import DEFAULT_CHUNK_SIZE
from mdx_relay.service.auth import DEFAULT_TOKEN_TTL
from mdx_relay.service.quota import TiB

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

ENV_VARS = {
    "server_url": "RELAY_SERVER_URL",
    "credential_path": "RELAY_CREDENTIAL_FILE",
    "log_level": "RELAY_LOG_LEVEL",
    "data_root": "RELAY_DATA_ROOT",
}
CONFIG_ENV_VAR = "RELAY_CONFIG"
DEFAULT_CONFIG_FILE = "relayctl.env"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def build_settings(model: Type[M], **values: Any) -> M:
    """
    Construct a settings model, turning validation failures into ``ParameterError``.

    ``None`` values are dropped so model defaults apply.
    """
    try:
        return model(**{k: v for k, v in values.items() if v is not None})
    except ValidationError as exc:
        problems = [{"field": ".".join(map(str, e["loc"])), "message": e["msg"]} for e in exc.errors()]
        fields = ", ".join(p["field"] for p in problems)
        raise ParameterError(f"invalid {model.__name__}: {fields}", detail=problems) from exc


class GlobalConfig(BaseModel):
    """Effective global configuration and where each value came from."""

    server_url: Optional[str] = None
    credential_path: Optional[Path] = None
    log_level: str = "INFO"
    data_root: Optional[Path] = None
    config_file: Optional[Path] = None
    sources: Dict[str, str] = {}

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"log level must be one of {', '.join(LOG_LEVELS)}")
        return level

    def describe(self) -> Dict[str, Any]:
        """Each value with its source, for ``relayctl config show``."""
        shown: Dict[str, Any] = {
            name: {
                "value": None if getattr(self, name) is None else str(getattr(self, name)),
                "source": self.sources.get(name, "default"),
                "env": env,
            }
            for name, env in ENV_VARS.items()
        }
        shown["config_file"] = None if self.config_file is None else str(self.config_file)
        return shown


def _config_file(explicit: Optional[Union[str, Path]], environ: Mapping[str, str]) -> Optional[Path]:
    if explicit:
        path = Path(explicit)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        return path
    if environ.get(CONFIG_ENV_VAR):
        path = Path(environ[CONFIG_ENV_VAR])
        if not path.is_file():
            raise ConfigError(f"config file {path} (from {CONFIG_ENV_VAR}) does not exist")
        return path
    default = Path(DEFAULT_CONFIG_FILE)
    return default if default.is_file() else None


def load_config(
    flags: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
    config_file: Optional[Union[str, Path]] = None,
) -> GlobalConfig:
    """
    Resolve the global configuration.

    Args:
        flags: Values given on the command line; ``None`` means not given
        environ: Environment to read (defaults to ``os.environ``)
        config_file: Explicit config file (``--config``)

    Returns:
        The effective configuration with per-value sources

    Raises:
        ConfigError: if the config file is missing or a value is invalid
    """
    flags = flags or {}
    environ = os.environ if environ is None else environ
    path = _config_file(config_file, environ)
    file_values = {k: v for k, v in dotenv_values(path).items() if v is not None} if path else {}

    values: Dict[str, Any] = {}
    sources: Dict[str, str] = {}
    for name, env in ENV_VARS.items():
        if flags.get(name) is not None:
            values[name], sources[name] = flags[name], "flag"
        elif environ.get(env):
            values[name], sources[name] = environ[env], "env"
        elif file_values.get(env):
            values[name], sources[name] = file_values[env], "file"

    try:
        config = GlobalConfig(**values, config_file=path, sources=sources)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc.errors()[0]['msg']}") from exc
    logger.debug("Configuration resolved: %s", config.describe())
    return config


class AgentSettings(BaseModel):
    """Tunables of the relay agent."""

    staging_root: Path
    journal_path: Optional[Path] = None
    chunk_size: int = Field(default=DEFAULT_CHUNK_SIZE, ge=1)
    parallelism: int = Field(default=4, ge=1)
    stability_window: float = Field(default=5.0, ge=0)
    poll_interval: float = Field(default=2.0, gt=0)
    max_active_files: int = Field(default=2, ge=1)
    max_transfer_attempts: int = Field(default=5, ge=1)

    @property
    def journal(self) -> Path:
        return self.journal_path or self.staging_root / ".relay" / "journal.jsonl"

    @property
    def archive_root(self) -> Path:
        return self.staging_root / ".archived"


class ServiceSettings(BaseModel):
    """Tunables of the storage service."""

    data_root: Path
    host: str = "127.0.0.1"
    port: int = Field(default=8080, ge=0, le=65535)
    registry_path: Optional[Path] = None
    org_map_path: Optional[Path] = None
    quota_bytes: int = Field(default=TiB, ge=0)
    soft_quota: bool = False
    token_ttl: float = Field(default=DEFAULT_TOKEN_TTL, gt=0)
