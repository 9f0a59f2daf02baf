import logging
import os
import platform
import sys

import numpy as np
import yaml

from .errors import ConfigurationError

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
OMNIGLOT_ENV = "CUEHUNT_OMNIGLOT_ROOT"


def check_keys(kind, data, allowed):
    """Reject unknown keys in a config mapping."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{kind} config must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError(f"Unknown {kind} config keys: {', '.join(unknown)}. Allowed keys: {', '.join(sorted(allowed))}")


def setup_logging(verbosity=0, log_file=None):
    """Configure the package logger: console (stderr) plus an optional log file."""
    logger = logging.getLogger("cuehunt")
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    else:
        level = logging.INFO
    logger.setLevel(level)
    logger.handlers.clear()
    logger.propagate = False

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    return logger


def load_config_file(path):
    """Read a JSON (or YAML) config file into a dict."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found at {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON/YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must contain a mapping at the top level")
    return data


def load_train_config(path=None, overrides=None, base=None):
    """Build a TrainConfig: ``base`` defaults, then the file, then flag overrides."""
    from .train import TrainConfig

    data = dict(base or {})
    if path:
        data.update(load_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return TrainConfig.from_dict(data)


def versions():
    from . import __version__

    return {"cuehunt": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(out_dir, command, config, seeds=None):
    """Dump everything needed to rerun a command to <out_dir>/manifest.yaml."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds or {},
        "versions": versions(),
    }
    path = os.path.join(out_dir, "manifest.yaml")
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    logging.getLogger(__name__).info(f"Manifest written to: {path}")
    return path
