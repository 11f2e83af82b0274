"""
Handlers package for the command-line interface.
Contains the command router, the dispatcher and per-run context.
"""
from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable

from config import WORKDIR

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, dict[str, Any]], Any]
Middleware = Callable[[Handler, argparse.Namespace, dict[str, Any]], Any]


@dataclass
class RunContext:
    """What one command run read, wrote and measured."""

    command: str
    argv: list[str]
    run_dir: Path
    config: Any = None
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)

    def output(self, path: str | Path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def input(self, path: str | Path | None) -> None:
        if path is not None:
            self.inputs.append(Path(path))


@dataclass
class Command:
    name: str
    handler: Handler
    help: str
    arguments: Callable[[argparse.ArgumentParser], None] | None


class CommandRouter:
    """Groups related subcommands; handlers register with @router.command(...)."""

    def __init__(self, name: str):
        self.name = name
        self.commands: dict[str, Command] = {}

    def command(self, name: str, help: str = "", arguments: Callable[[argparse.ArgumentParser], None] | None = None):
        def register(handler: Handler) -> Handler:
            self.commands[name] = Command(name, handler, help, arguments)
            return handler
        return register


class Dispatcher:
    def __init__(self, prog: str = "diffdet"):
        self.prog = prog
        self.commands: dict[str, Command] = {}
        self.middlewares: list[Middleware] = []

    def include_router(self, router: CommandRouter) -> None:
        for name, command in router.commands.items():
            if name in self.commands:
                raise ValueError(f"command '{name}' registered twice")
            self.commands[name] = command

    def middleware(self, middleware: Middleware) -> None:
        self.middlewares.append(middleware)

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog=self.prog, description="Single-step diffusion-feature object detection")
        sub = parser.add_subparsers(dest="command", required=True)
        for command in self.commands.values():
            p = sub.add_parser(command.name, help=command.help)
            p.add_argument("--run-dir", type=Path, default=None, help="output directory of this run")
            if command.arguments is not None:
                command.arguments(p)
        return parser

    def dispatch(self, argv: list[str]) -> Any:
        args = self.build_parser().parse_args(argv)
        command = self.commands[args.command]
        run_dir = args.run_dir or WORKDIR / "runs" / f"{args.command}-{datetime.now():%Y%m%d-%H%M%S}"
        run_dir.mkdir(parents=True, exist_ok=True)
        data = {"context": RunContext(command=args.command, argv=list(argv), run_dir=run_dir)}
        logger.info("Running %s in %s", args.command, run_dir)

        handler = command.handler
        for middleware in reversed(self.middlewares):
            handler = _bind(middleware, handler)
        return handler(args, data)


def _bind(middleware: Middleware, handler: Handler) -> Handler:
    def wrapped(event, data):
        return middleware(handler, event, data)
    return wrapped
