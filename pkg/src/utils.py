"""
Utility functions shared across the Stein-Encoder toolkit.

Workflow:
1. Load YAML configuration files and pick out typed sections
2. Save and load JSON documents (numpy-aware)
3. Set up logging handlers from the configuration
4. Start the Prometheus metrics server and write metric snapshots
5. Derive reproducible per-task seeds from a base seed
6. Resolve the worker count from flags, environment and hardware
"""
import os
import json
import logging
from datetime import datetime
from typing import Dict, Any, Optional

import numpy as np
import yaml
from dotenv import load_dotenv
from prometheus_client import REGISTRY, start_http_server, write_to_textfile

from src.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "STEIN_ENCODER_THREADS"
DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def load_config(config_path: str) -> Dict[str, Any]:
    """
    Load an encoder configuration from a YAML file.

    Args:
        config_path: Path to the configuration file.

    Returns:
        Configuration mapping (empty for an empty file).
    """
    try:
        with open(config_path, 'r') as file:
            config = yaml.safe_load(file)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Error loading configuration file {config_path}: {e}") from e
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ConfigError(f"Configuration file {config_path} must contain a mapping")
    return config


def config_section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    """Return a (possibly empty) top-level section of the configuration."""
    section = config.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"Configuration section '{name}' must be a mapping")
    return section


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(data: Any) -> str:
    """Serialize data to an indented JSON string, converting numpy values."""
    return json.dumps(data, indent=2, default=_json_default)


def save_json(data: Dict[str, Any], filepath: str) -> bool:
    """
    Save a report or summary as indented JSON.

    Args:
        data: Data to save.
        filepath: Destination; parent directories are created.

    Returns:
        True if successful, False otherwise.
    """
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)

        with open(filepath, 'w') as file:
            file.write(to_json(data))

        logger.info(f"Saved data to {filepath}")
        return True

    except (OSError, TypeError) as e:
        logger.error(f"Error saving JSON file: {str(e)}")
        return False


def read_json(filepath: str) -> Dict[str, Any]:
    """Read a JSON document written by save_json."""
    with open(filepath, 'r') as file:
        return json.load(file)


def format_timestamp(timestamp: datetime) -> str:
    """
    Render a timestamp for run_info.json.

    Args:
        timestamp: Time the command finished.

    Returns:
        Timestamp as YYYY-MM-DD HH:MM:SS.
    """
    return timestamp.strftime('%Y-%m-%d %H:%M:%S')


def setup_logging(config: Dict[str, Any], verbosity: int = 0) -> logging.Logger:
    """
    Set up logging based on configuration.

    Args:
        config: Configuration dictionary (uses the 'logging' section).
        verbosity: Count of -v flags; each one lowers the level by one step.

    Returns:
        The root logger.
    """
    settings = config_section(config, 'logging')
    level_name = str(settings.get('level', 'INFO')).upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ConfigError(f"Unknown logging level: {level_name}")
    level = max(logging.DEBUG, level - 10 * verbosity)

    handlers = [logging.StreamHandler()]
    log_file = settings.get('file')
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level,
        format=settings.get('format', DEFAULT_LOG_FORMAT),
        handlers=handlers,
        force=True,
    )
    return logging.getLogger()


def setup_monitoring(config: Dict[str, Any], port: Optional[int] = None) -> bool:
    """
    Set up Prometheus monitoring server.

    Args:
        config: Configuration dictionary.
        port: Explicit port; falls back to monitoring.prometheus_port.

    Returns:
        True if a server was started.
    """
    if port is None:
        port = config_section(config, 'monitoring').get('prometheus_port')
    if not port:
        return False
    try:
        logger.info(f"Starting Prometheus metrics server on port {port}")
        start_http_server(int(port))
        return True
    except OSError as e:
        logger.error(f"Error setting up monitoring: {str(e)}")
        return False


def write_metrics(filepath: str) -> None:
    """Write a text-format snapshot of all registered metrics."""
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_to_textfile(filepath, REGISTRY)


def derive_seed(base_seed: int, *indices: int) -> int:
    """
    Derive an independent 32-bit seed for a task from a base seed.

    Args:
        base_seed: Run-level seed.
        indices: Task coordinates, e.g. replication and fold numbers.

    Returns:
        Seed that depends only on (base_seed, indices).
    """
    sequence = np.random.SeedSequence([int(base_seed), *[int(i) for i in indices]])
    return int(sequence.generate_state(1)[0])


def resolve_threads(requested: Optional[int] = None) -> int:
    """
    Resolve the number of parallel workers.

    Order: explicit request, then STEIN_ENCODER_THREADS (.env is honoured),
    then the number of logical cores.
    """
    if requested is not None:
        if int(requested) < 1:
            raise ConfigError("--threads must be a positive integer")
        return int(requested)
    load_dotenv()
    env_value = os.getenv(THREADS_ENV_VAR)
    if env_value:
        try:
            threads = int(env_value)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {env_value!r}") from e
        if threads < 1:
            raise ConfigError(f"{THREADS_ENV_VAR} must be positive")
        return threads
    return os.cpu_count() or 1
