"""
Entry point of the model-free bounds solver.

    python -m app.main bound --config run.json --out out/
"""
import sys

from app.api.cli import main
from app.core.config import settings
from app.core.logging import get_logger

logger = get_logger(__name__)


if __name__ == "__main__":
    logger.info("Starting bounds solver", version=settings.app_version)
    sys.exit(main())
