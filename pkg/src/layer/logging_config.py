import logging
import sys
from typing import Optional

from opentelemetry import trace

_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def configure_logging(log_file_name: Optional[str] = None, logger_name: str = "layer") -> logging.Logger:
    """
    Configure and return a logger with both stream (stdout) and optional file handlers.

    Calling it again replaces the handlers installed by a previous call, so the CLI
    and the tests can configure logging more than once in one process.

    :param log_file_name: The path to the log file. If provided, logs will also be written to this file.
    :type log_file_name: Optional[str]
    :param logger_name: The name of the logger to configure.
    :type logger_name: str
    :return: The configured logger instance.
    :rtype: logging.Logger
    """
    logger = logging.getLogger(logger_name)
    logger.setLevel(logging.INFO)
    for handler in list(logger.handlers):
        if getattr(handler, "_layer_handler", False):
            logger.removeHandler(handler)
            handler.close()

    # Stream handler (stdout)
    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setLevel(logging.INFO)
    stream_handler.setFormatter(logging.Formatter(_FORMAT))
    stream_handler._layer_handler = True
    logger.addHandler(stream_handler)

    # File handler if a log file is specified
    if log_file_name:
        file_handler = logging.FileHandler(log_file_name)
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter(_FORMAT))
        file_handler._layer_handler = True
        logger.addHandler(file_handler)

    return logger


def tracing_enabled(flag: Optional[str]) -> bool:
    """Interpret the LAYER_ENABLE_TRACING value; anything but "true" disables tracing."""
    if not flag:
        return False
    return str(flag).strip().lower() == "true"


def configure_tracing(enabled: bool, logger: Optional[logging.Logger] = None) -> bool:
    """
    Install an SDK tracer provider that prints finished spans to stderr.

    :param enabled: Whether tracing was requested.
    :param logger: Logger used to report the outcome.
    :return: True if a provider was installed.
    """
    logger = logger or logging.getLogger("layer")
    if not enabled:
        logger.info("Tracing is not enabled")
        return False
    try:
        from opentelemetry.sdk.trace import TracerProvider
        from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor
    except ModuleNotFoundError:
        logger.error("Required libraries for tracing not installed.")
        logger.error("Please make sure opentelemetry-sdk is installed.")
        return False
    provider = TracerProvider()
    provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter(out=sys.stderr)))
    trace.set_tracer_provider(provider)
    logger.info("Tracing is enabled.")
    return True
