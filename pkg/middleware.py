"""
Middleware that records a run manifest around every command.
"""
import logging
from typing import Any, Callable, Dict

from core import DiffDetError
from storage import RunManifest, hash_paths, write_manifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class RunManifestMiddleware:
    """Writes exactly one manifest per command run, on success and on failure."""

    def __call__(
        self,
        handler: Callable[[Any, Dict[str, Any]], Any],
        event: Any,
        data: Dict[str, Any]
    ) -> Any:
        context = data["context"]
        manifest = RunManifest(command=context.command, argv=list(context.argv))
        try:
            result = handler(event, data)
        except Exception as e:
            manifest.status = "error"
            category = e.category if isinstance(e, DiffDetError) else "internal"
            manifest.error = {"category": category, "message": str(e)}
            raise
        finally:
            if context.config is not None:
                manifest.seed = context.config.seed
                manifest.config = context.config.snapshot()
            manifest.inputs = hash_paths(context.inputs)
            manifest.outputs = hash_paths(p for p in context.outputs if p.exists())
            manifest.metrics = dict(context.metrics)
            path = write_manifest(manifest, context.run_dir / MANIFEST_NAME)
            logger.info("Run manifest written to %s (%d outputs)", path, len(manifest.outputs))
        return result
