# Logging configuration
from .config import bind_run_context, get_logger, setup_logging

__all__ = ["setup_logging", "get_logger", "bind_run_context"]
