import logging
import os
from datetime import datetime


def setup_logger(name, log_level=None, log_dir=None):
    """Setup logger with console and (optional) file handlers"""

    # Level and directory fall back to the environment so every module can
    # call setup_logger(__name__) at import time
    if log_level is None:
        log_level = os.getenv('LOG_LEVEL', 'INFO')
    if isinstance(log_level, str):
        log_level = getattr(logging, log_level.upper(), logging.INFO)
    if log_dir is None:
        log_dir = os.getenv('LOG_DIR', '')

    logger = logging.getLogger(name)
    logger.setLevel(log_level)
    logger.propagate = False

    # Remove existing handlers
    logger.handlers.clear()

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, f"{name}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log")
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def configure_logging(log_level=None, log_dir=None):
    """Re-apply level/file settings to every logger created through setup_logger"""
    if log_level is not None:
        os.environ['LOG_LEVEL'] = str(log_level)
    if log_dir is not None:
        os.environ['LOG_DIR'] = str(log_dir)

    for name, existing in list(logging.Logger.manager.loggerDict.items()):
        if isinstance(existing, logging.Logger) and not existing.propagate and existing.handlers:
            setup_logger(name)
