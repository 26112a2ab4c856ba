import logging
import os

from .settings import LOG_LEVEL, LOGGER_NAME


def setup_logger():
    logger = logging.getLogger(LOGGER_NAME)
    level = os.environ.get("COELAB_LOG_LEVEL", LOG_LEVEL).upper()
    logger.setLevel(level)

    # Re-imports must not stack handlers
    if logger.handlers:
        return logger

    # Create a console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)

    # Create a formatter
    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    console_handler.setFormatter(formatter)

    logger.addHandler(console_handler)
    return logger


logger = setup_logger()
