"""
Main entry point for the diffdet command line.
Sets up logging, registers the command routers and middleware, and maps
errors to exit codes.
"""
import json
import logging
import sys

from config import LOG_LEVEL
from core import DiffDetError
from handlers import Dispatcher
from handlers.data_handlers import data_router
from handlers.eval_handlers import eval_router
from handlers.train_handlers import train_router
from handlers.transfer_handlers import transfer_router
from middleware import RunManifestMiddleware

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_CODES = {
    "config": 3,
    "data": 4,
    "data-access": 4,
    "checkpoint": 5,
    "training": 6,
    "loss": 6,
    "evaluation": 7,
    "corruption": 7,
    "mode": 8,
}


def build_dispatcher() -> Dispatcher:
    dp = Dispatcher()

    # Every run leaves one manifest behind
    dp.middleware(RunManifestMiddleware())

    # Include routers
    dp.include_router(train_router)
    dp.include_router(transfer_router)
    dp.include_router(eval_router)
    dp.include_router(data_router)
    return dp


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    dp = build_dispatcher()
    try:
        dp.dispatch(argv)
    except SystemExit as e:
        # argparse: --help exits 0, usage errors exit 2
        code = int(e.code or 0)
        if code == 2:
            print(json.dumps({"error": "usage", "message": "invalid command line"}), file=sys.stderr)
        return code
    except DiffDetError as e:
        logger.debug("command failed", exc_info=True)
        payload = {"error": e.category, "message": str(e)}
        diagnostics = getattr(e, "diagnostics", None)
        if diagnostics:
            payload["diagnostics"] = diagnostics
        print(json.dumps(payload), file=sys.stderr)
        return EXIT_CODES.get(e.category, 1)
    except Exception as e:
        logger.exception("unexpected failure")
        print(json.dumps({"error": "internal", "message": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
