import os
import sys
from typing import Callable, Optional

from loguru import logger

# Optional type checking with beartype
try:
    from beartype import beartype, BeartypeConf

    optional_typecheck = beartype(conf=BeartypeConf(is_pep484_tower=True))
except ImportError:

    def optional_typecheck(callable_obj: Callable) -> Callable:
        """Dummy decorator if beartype is not installed."""
        return callable_obj


VERBOSE_ENV = "TEMPORAL_LATTICE_VERBOSE"
DETAILED_FORMAT = (
    "<green>{elapsed}</green> | <level>{level: <7}</level> | <cyan>{module}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
_configured_sinks = []


def resolve_verbose(verbose: Optional[bool] = None) -> bool:
    """Explicit argument wins, otherwise read TEMPORAL_LATTICE_VERBOSE."""
    if verbose is not None:
        return verbose
    return os.environ.get(VERBOSE_ENV, "").lower() in ("true", "1", "yes")


def setup_logging(verbose: Optional[bool] = None) -> bool:
    """
    Configure loguru sinks for the command line tools.

    Verbose mode logs DEBUG with elapsed time and source line, otherwise INFO
    with the default format. Calling this again replaces the sinks it added before.

    Args:
        verbose: Force verbosity. If None, reads TEMPORAL_LATTICE_VERBOSE.

    Returns:
        bool: The resolved verbosity.
    """
    verbose = resolve_verbose(verbose)
    log_level = "DEBUG" if verbose else "INFO"

    logger.remove()
    _configured_sinks.clear()
    if verbose:
        _configured_sinks.append(logger.add(sys.stderr, level=log_level, format=DETAILED_FORMAT))
        logger.debug("Verbose logging enabled")
    else:
        _configured_sinks.append(logger.add(sys.stderr, level=log_level))
    logger.debug(f"Logger configured for level: {log_level}")
    return verbose
