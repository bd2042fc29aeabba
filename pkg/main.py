import logging
import logging.handlers
import os
import sys

from dotenv import load_dotenv

import config
from cli import PglmmCli


def setup_logging(log_file: str = config.LOG_FILE):
    """Configures the root logger for a CLI run."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.handlers.RotatingFileHandler(
                log_file, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8"
            ),
            logging.StreamHandler(),
        ],
    )
    return logging.getLogger(__name__)


def main(argv=None) -> int:
    load_dotenv()
    logger = setup_logging(os.getenv("PGLMM_LOG_FILE", config.LOG_FILE))

    try:
        return PglmmCli().run(argv)
    except Exception as e:
        logger.critical(f"FATAL: unhandled exception: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
