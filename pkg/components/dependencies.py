import os
import sys
from pathlib import Path
import logging
from datetime import datetime
from typing import Optional

LOG_LEVEL_ENV = "DWELLOPT_LOG"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"
_LEVELS = {"DEBUG": logging.DEBUG, "INFO": logging.INFO, "WARNING": logging.WARNING, "ERROR": logging.ERROR}


def resolve_log_level(level: Optional[str] = None) -> int:
    """
    Translate a level name (or the DWELLOPT_LOG environment variable) into a logging level.

    Args:
        level (Optional[str]): Explicit level name. When None, DWELLOPT_LOG is consulted.

    Returns:
        int: The logging level, INFO when the name is missing or unknown.
    """
    name = level if level is not None else os.environ.get(LOG_LEVEL_ENV, "INFO")
    return _LEVELS.get(str(name).strip().upper(), logging.INFO)


def setup_logging(log_dir: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
    """
    Configure logging for the application with a console handler and an optional timestamped file handler.

    The log file is named 'dwellopt_YYYYMMDD_HHMM.log' based on the current timestamp.

    Args:
        log_dir (Optional[str]): Directory where log files will be stored. No file handler when None.
        level (Optional[str]): Level name; defaults to the DWELLOPT_LOG environment variable.

    Returns:
        logging.Logger: Configured logger instance for the application.

    Raises:
        ValueError: If log_dir is invalid.
        RuntimeError: If log file directory creation fails.
    """
    try:
        # Validate input
        if log_dir is not None and (not isinstance(log_dir, str) or not log_dir.strip()):
            raise ValueError("log_dir must be a non-empty string")

        resolved = resolve_log_level(level)

        # Configure logger
        logger = logging.getLogger('app')
        logger.setLevel(resolved)
        logger.propagate = False

        # Avoid adding handlers multiple times
        if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler) for h in logger.handlers):
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            logger.addHandler(console_handler)

        for handler in logger.handlers:
            handler.setLevel(resolved)

        if log_dir is not None and not any(isinstance(h, logging.FileHandler) for h in logger.handlers):
            log_path = Path(log_dir)
            log_path.mkdir(parents=True, exist_ok=True)

            # Generate timestamped log file name
            timestamp = datetime.now().strftime("%Y%m%d_%H%M")
            file_handler = logging.FileHandler(log_path / f"dwellopt_{timestamp}.log")
            file_handler.setLevel(resolved)
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            logger.addHandler(file_handler)

        if level is None and os.environ.get(LOG_LEVEL_ENV) and os.environ[LOG_LEVEL_ENV].strip().upper() not in _LEVELS:
            logger.warning(f"Unknown {LOG_LEVEL_ENV} value '{os.environ[LOG_LEVEL_ENV]}', using INFO")

        return logger

    except ValueError as ve:
        raise ValueError(f"Error [setup_logging]: Invalid input - {ve}")
    except Exception as e:
        raise RuntimeError(f"Error [setup_logging]: Failed to configure logging - {e}")


def setup_environment(output_location: str, log_dir: Optional[str] = None) -> Path:
    """
    Set up the output tree for a run: logging plus the standard subdirectories.

    Args:
        output_location (str): Base directory for fronts, reports, audit logs and checkpoints.
        log_dir (Optional[str]): Directory for log files; defaults to '<output_location>/logs'.

    Returns:
        Path: The resolved output directory.

    Raises:
        ValueError: If output_location is empty or points at a file.
    """
    if not isinstance(output_location, str) or not output_location.strip():
        raise ValueError("Error [setup_environment]: output_location must be a non-empty string")

    out_path = Path(output_location).resolve()
    if out_path.exists() and not out_path.is_dir():
        raise ValueError(f"Error [setup_environment]: output location '{output_location}' is not a directory")

    setup_logging(log_dir if log_dir is not None else str(out_path / "logs"))
    logger = logging.getLogger('app.dependencies')

    if not out_path.exists():
        logger.info(f"Creating output directory: {out_path}")
    out_path.mkdir(parents=True, exist_ok=True)

    # Create standard subdirectories
    for sub in ("fronts", "reports", "checkpoints", "plot_data"):
        (out_path / sub).mkdir(parents=True, exist_ok=True)

    logger.info("Environment setup completed successfully")
    return out_path
