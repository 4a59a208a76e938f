from flask import Flask
from loguru import logger
import sys
import os

import torch

from app.config import Settings

LOG_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan> - <level>{message}</level>"


def init_logging(settings: Settings) -> None:
    """Configure loguru sinks from settings."""

    logs_dir = settings.LOG_DIR
    if logs_dir:
        try:
            os.makedirs(logs_dir, exist_ok=True)
        except Exception as e:
            # If directory cannot be created, fall back to stderr-only logging
            print(f"Warning: Could not create logs directory '{logs_dir}': {e}", file=sys.stderr)
            logs_dir = None

    # Reset existing handlers
    logger.remove()

    # Console logging; stdout is kept for command reports
    logger.add(
        sys.stderr,
        colorize=True,
        format=LOG_FORMAT,
        level=settings.LOG_LEVEL
    )

    if logs_dir:
        logger.add(
            os.path.join(logs_dir, "expodebias.log"),
            rotation="5 MB",
            retention="7 days",
            compression="zip",
            level="DEBUG",
            enqueue=True
        )


def init_reproducibility(deterministic: bool) -> None:
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        logger.debug("Deterministic torch algorithms enabled, single thread")


def init_extensions(app: Flask) -> None:
    """Initialize logging and numeric backends for the app."""
    settings: Settings = app.config['SETTINGS']
    init_logging(settings)
    init_reproducibility(settings.DETERMINISTIC)
    logger.debug("Extensions initialized")
