"""
Logging configuration for madiff.

Console output is kept compatible with tqdm progress bars during training and
evaluation; rotating file logs separate routine processing from errors. Inside
containers the JSON formatter emits one structured object per line.
"""

import json
import logging
import logging.handlers
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

ROOT_LOGGER_NAME = "madiff"

DEFAULT_LOG_FORMAT = (
    "[%(asctime)s] [%(levelname)-8s] [%(name)s:%(funcName)s:%(lineno)d] - %(message)s"
)
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

LOG_DIR_NAME = "logs"
LOG_PROCESSING_FILE = "madiff_processing.log"
LOG_ERROR_FILE = "madiff_errors.log"
LOG_CRITICAL_FILE = "madiff_critical.log"

MAX_LOG_SIZE = 10 * 1024 * 1024  # 10MB
BACKUP_COUNT = 5

# LogRecord attributes that are not user-supplied ``extra`` fields
_RECORD_ATTRIBUTES = frozenset(
    {
        "name",
        "msg",
        "args",
        "created",
        "filename",
        "funcName",
        "levelname",
        "levelno",
        "lineno",
        "module",
        "msecs",
        "message",
        "pathname",
        "process",
        "processName",
        "relativeCreated",
        "thread",
        "threadName",
        "taskName",
        "exc_info",
        "exc_text",
        "stack_info",
    }
)


class MillisecondFormatter(logging.Formatter):
    """Text formatter with millisecond timestamps and a trailing traceback."""

    def formatTime(self, record, datefmt=None):
        stamp = datetime.fromtimestamp(record.created).strftime(datefmt or DATE_FORMAT)
        return f"{stamp}.{int(record.msecs):03d}"

    def format(self, record):
        if record.module == "__main__":
            record.module = "cli"

        if not record.exc_info:
            return super().format(record)

        # Formatted once here so the parent does not append a second copy
        exc_info = record.exc_info
        record.exc_info = None
        try:
            text = super().format(record)
        finally:
            record.exc_info = exc_info
        return text + "\nTraceback:\n" + "".join(traceback.format_exception(*exc_info))


class TqdmLoggingHandler(logging.StreamHandler):
    """Console handler that writes through tqdm so progress bars stay intact."""

    def emit(self, record):
        try:
            try:
                from tqdm import tqdm
            except ImportError:
                super().emit(record)
                return
            tqdm.write(self.format(record), file=self.stream)
        except RecursionError:
            raise
        except Exception:
            self.handleError(record)


class JSONFormatter(logging.Formatter):
    """One JSON object per record, for log collectors in containers."""

    def format(self, record):
        payload: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
            "message": record.getMessage(),
            "process": record.process,
            "thread": record.thread,
        }

        if record.exc_info:
            payload["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1]),
                "traceback": "".join(traceback.format_exception(*record.exc_info)),
            }

        for key, value in record.__dict__.items():
            if key not in _RECORD_ATTRIBUTES:
                payload[key] = value

        return json.dumps(payload, default=str)


def _rotating_handler(
    path: Path, level: int, formatter: logging.Formatter, max_bytes: int
) -> logging.Handler:
    handler = logging.handlers.RotatingFileHandler(
        path, maxBytes=max_bytes, backupCount=BACKUP_COUNT
    )
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(
    level: int = logging.INFO,
    log_dir: Optional[Union[str, Path]] = None,
    use_json: bool = False,
    use_tqdm: bool = False,
    console_level: Optional[int] = None,
    disable_file_logging: bool = False,
) -> logging.Logger:
    """
    Configure the ``madiff`` logger hierarchy.

    Args:
        level: Base logging level
        log_dir: Directory for rotating log files (default: ./logs)
        use_json: Emit JSON records instead of text
        use_tqdm: Route console output through tqdm.write
        console_level: Console threshold (default: same as level)
        disable_file_logging: Skip file handlers (tests, read-only filesystems)

    Returns:
        The configured package root logger
    """
    root_logger = logging.getLogger(ROOT_LOGGER_NAME)
    root_logger.setLevel(level)
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    formatter: logging.Formatter
    if use_json:
        formatter = JSONFormatter()
    else:
        formatter = MillisecondFormatter(DEFAULT_LOG_FORMAT, datefmt=DATE_FORMAT)

    console_handler: logging.Handler
    if use_tqdm:
        console_handler = TqdmLoggingHandler(sys.stderr)
    else:
        console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level if console_level is None else console_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if not disable_file_logging:
        directory = Path(log_dir) if log_dir is not None else Path.cwd() / LOG_DIR_NAME
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            root_logger.error(f"Failed to create log directory {directory}: {e}")
            return root_logger

        targets = (
            (LOG_PROCESSING_FILE, logging.INFO, MAX_LOG_SIZE),
            (LOG_ERROR_FILE, logging.ERROR, MAX_LOG_SIZE),
            (LOG_CRITICAL_FILE, logging.CRITICAL, MAX_LOG_SIZE // 2),
        )
        for filename, file_level, max_bytes in targets:
            try:
                root_logger.addHandler(
                    _rotating_handler(
                        directory / filename, file_level, formatter, max_bytes
                    )
                )
            except OSError as e:
                root_logger.error(f"Failed to create log handler {filename}: {e}")

    root_logger.debug(
        f"Logging configured - Level: {logging.getLevelName(level)}, "
        f"JSON: {use_json}, tqdm: {use_tqdm}, "
        f"File logging: {not disable_file_logging}"
    )
    return root_logger


def get_logger(name: str) -> logging.Logger:
    """Return the package logger for a module (``madiff.<name>``)."""
    if name == ROOT_LOGGER_NAME or name.startswith(ROOT_LOGGER_NAME + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


def log_exception(logger: logging.Logger, exc: Exception, context: str = "") -> None:
    """
    Log an exception with its traceback and structured fields.

    Args:
        logger: Logger instance
        exc: Exception to log
        context: What was being done when the exception occurred
    """
    exc_type = type(exc).__name__
    exc_msg = str(exc)
    log_msg = (
        f"Exception in {context}: {exc_type}: {exc_msg}"
        if context
        else f"{exc_type}: {exc_msg}"
    )
    logger.error(
        log_msg,
        extra={
            "exception_type": exc_type,
            "exception_message": exc_msg,
            "context": context,
        },
        exc_info=(type(exc), exc, exc.__traceback__),
    )


def log_run_config(logger: logging.Logger, resolved: Dict[str, Any]) -> None:
    """Log the fully resolved run configuration, one sorted JSON document."""
    logger.info("Resolved configuration: " + json.dumps(resolved, sort_keys=True))


def configure_production_logging(
    debug: bool = False,
    log_dir: Optional[Union[str, Path]] = None,
    disable_file_logging: bool = False,
) -> logging.Logger:
    """
    CLI logging defaults: console shows warnings (everything with --debug),
    files keep INFO and above.
    """
    level = logging.DEBUG if debug else logging.INFO
    in_container = any(
        key in os.environ for key in ("KUBERNETES_SERVICE_HOST", "DOCKER_CONTAINER")
    )
    return setup_logging(
        level=level,
        log_dir=log_dir,
        use_json=in_container,
        use_tqdm=not in_container and sys.stderr.isatty(),
        console_level=logging.DEBUG if debug else logging.WARNING,
        disable_file_logging=disable_file_logging,
    )
