"""
Logging configuration for the SIU3R field engine.
"""

import logging
import sys
import time
from contextlib import contextmanager
from typing import Optional


def setup_logger(name: str = "siu3r_engine", level: int = logging.INFO):
    """
    Set up and return a logger with a stdout handler.

    Calling it again (e.g. for --verbose) replaces the handler instead of
    stacking a second one.

    Args:
        name: Logger name
        level: Logging level

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.handlers = []

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_format = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    console_handler.setFormatter(console_format)
    logger.addHandler(console_handler)

    return logger


@contextmanager
def log_step(step: str, log: Optional[logging.Logger] = None):
    """
    Log the start and wall time of one pipeline step; failures are logged and re-raised.

    Example:
        with log_step("Rasterizing view 0"):
            out = render(field, cam, size)
    """
    log = log or logger
    log.info(f"{step}...")
    start = time.perf_counter()
    try:
        yield
    except Exception as e:
        log.error(f"{step} failed after {time.perf_counter() - start:.2f}s: {type(e).__name__}")
        raise
    log.info(f"{step} done in {time.perf_counter() - start:.2f}s")


# Default logger instance
logger = setup_logger()
