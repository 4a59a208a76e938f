"""Options and error handling shared by every command."""
from contextlib import contextmanager
from typing import Any, Dict

import click
from loguru import logger

from app.config import Settings, get_config
from app.exceptions import ExpoDebiasError
from app.extensions import init_logging, init_reproducibility

# click parameter name -> settings field
COMMON_FIELDS = {
    "seed": "SEED",
    "out": "OUT_DIR",
    "deterministic": "DETERMINISTIC",
}


def common_options(command):
    command = click.option("--deterministic", is_flag=True, default=None,
                           help="Deterministic torch kernels on a single thread.")(command)
    command = click.option("--out", type=click.Path(file_okay=False), default=None,
                           help="Output directory.")(command)
    command = click.option("--seed", type=int, default=None, help="Run seed.")(command)
    command = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                           help="Flat key=value config file.")(command)
    return command


def load_settings(options: Dict[str, Any], fields: Dict[str, str]) -> Settings:
    """Settings from the config file with command-line flags on top, then logging and torch setup."""
    overrides = {}
    for name, field in {**COMMON_FIELDS, **fields}.items():
        value = options.get(name)
        if value is not None and value is not False:
            overrides[field] = value
    try:
        settings = get_config(options.get("config_path"), **overrides)
    except (ExpoDebiasError, OSError) as e:
        raise click.ClickException(str(e)) from e

    init_logging(settings)
    init_reproducibility(settings.DETERMINISTIC)
    return settings


@contextmanager
def command_errors(command: str):
    """Turn domain, argument and I/O failures into a nonzero exit with a readable message."""
    try:
        yield
    except (ExpoDebiasError, ValueError, OSError) as e:
        logger.error(f"{command} failed: {e}")
        raise click.ClickException(str(e)) from e
