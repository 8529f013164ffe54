import logging
import os
import sys
from pathlib import Path
from datetime import datetime

import colorlog

LOG_COLORS = {
    "DEBUG": "blue",
    "INFO": "yellow",
    "WARNING": "green",
    "ERROR": "red",
    "CRITICAL": "bold_red",
}

FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CONSOLE_FORMAT = "%(log_color)s%(levelname)s%(reset)s - %(blue)s%(name)s%(reset)s - %(white)s%(message)s"

# every logger handed out by setup_logger, so a log file can be attached later
_LOGGERS: dict[str, logging.Logger] = {}
_FILE_HANDLER: logging.Handler | None = None


def _default_level() -> int:
    name = os.getenv("NASAOCC_LOG_LEVEL", "INFO").upper()
    return getattr(logging, name, logging.INFO)


def setup_logger(name: str = __name__, level: int | None = None) -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level if level is not None else _default_level())
    console_handler.setFormatter(
        colorlog.ColoredFormatter(CONSOLE_FORMAT, log_colors=LOG_COLORS)
    )
    logger.addHandler(console_handler)

    if _FILE_HANDLER is not None:
        logger.addHandler(_FILE_HANDLER)

    _LOGGERS[name] = logger
    return logger


def attach_log_file(out_dir: str | Path) -> Path:
    """Send every module logger to <out_dir>/logs/nasa_occ_<date>.log"""
    global _FILE_HANDLER

    logs_dir = Path(out_dir) / "logs"
    logs_dir.mkdir(parents=True, exist_ok=True)
    log_filename = logs_dir / f"nasa_occ_{datetime.now().strftime('%Y%m%d')}.log"

    detach_log_file()

    file_handler = logging.FileHandler(log_filename, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
    _FILE_HANDLER = file_handler

    for logger in _LOGGERS.values():
        logger.addHandler(file_handler)

    return log_filename


def detach_log_file() -> None:
    global _FILE_HANDLER

    if _FILE_HANDLER is None:
        return

    for logger in _LOGGERS.values():
        logger.removeHandler(_FILE_HANDLER)
    _FILE_HANDLER.close()
    _FILE_HANDLER = None
