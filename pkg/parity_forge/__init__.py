"""Transform feature columns to mutual independence of protected columns."""
from loguru import logger

__version__ = "0.1.0"

# quiet unless an application (or the CLI) enables it
logger.disable("parity_forge")
