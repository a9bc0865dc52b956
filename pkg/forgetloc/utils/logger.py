"""
Custom logger module for enhanced logging functionality.

This module provides the `CLogger` class, a custom logging formatter that adds
date and time information to each log entry, and supports colored log messages
for improved readability. Console output is always on; file output is added by
`configure_logging` and writes to both:
- A complete log file (all logs across runs).
- A session log file (only current session).

Usage:
    from forgetloc.utils.logger import logger

    logger.debug("Debug message")
    logger.info("Info message")
"""

import logging
import os
from datetime import datetime
from typing import Optional

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class CLogger(logging.Formatter):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.colors = {
            "red": "\033[31m",
            "green": "\033[32m",
            "yellow": "\033[33m",
            "cyan": "\033[36m",
            "magenta": "\033[35m",
            "reset": "\033[0m",
        }
        self.level_colors = {
            "DEBUG": "cyan",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "magenta",
        }

    def format(self, record: logging.LogRecord) -> str:
        log_fmt = LOG_FORMAT
        color = self.level_colors.get(record.levelname)
        if color:
            log_fmt = self.colors[color] + log_fmt + self.colors["reset"]

        formatter = logging.Formatter(log_fmt, DATE_FORMAT)
        return formatter.format(record)


def get_logger(name: str = "forgetloc",
               log_dir: Optional[str] = None,
               complete_log: str = "complete.log",
               session_prefix: str = "session",
               level: str = "INFO") -> logging.Logger:
    """Create a logger with console output and, if log_dir is given, file handlers (complete + session)."""
    logger = logging.getLogger(name)
    logger.setLevel(level.upper())

    # Prevent duplicate handlers
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(CLogger(LOG_FORMAT))
        logger.addHandler(console_handler)

    if log_dir is not None and not any(isinstance(h, logging.FileHandler) for h in logger.handlers):
        os.makedirs(log_dir, exist_ok=True)
        file_formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)

        complete_handler = logging.FileHandler(os.path.join(log_dir, complete_log))
        complete_handler.setFormatter(file_formatter)
        logger.addHandler(complete_handler)

        session_file = os.path.join(
            log_dir,
            f"{session_prefix}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        )
        session_handler = logging.FileHandler(session_file)
        session_handler.setFormatter(file_formatter)
        logger.addHandler(session_handler)

    return logger


def configure_logging(settings) -> logging.Logger:
    """Apply level and file output from application settings to the package logger"""
    return get_logger(
        "forgetloc",
        log_dir=str(settings.log_dir) if settings.log_to_file else None,
        complete_log=settings.log_complete_file,
        session_prefix=settings.log_session_prefix,
        level=settings.log_level,
    )


logger = get_logger()
