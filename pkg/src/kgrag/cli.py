"""Command-line entry point.

Pipeline stages run directly against the core package; `serve` hosts the
HTTP service and `ask` is a thin client for a running service. Exit codes:
0 success, 2 config error, 3 missing prerequisite or stale artifact,
4 external-service failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import resolve_config
from .errors import (
    ConfigError,
    EncoderError,
    FingerprintError,
    KgragError,
    LlmError,
    PrerequisiteError,
)
from .stages import STAGES, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_EXTERNAL = 4


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="path to the JSON config document")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key by dot path (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrag", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        stage_parser = sub.add_parser(stage, help=f"run the {stage} pipeline stage")
        _add_config_args(stage_parser)

    serve = sub.add_parser("serve", help="run the HTTP service")
    _add_config_args(serve)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)

    ask = sub.add_parser("ask", help="query a running service")
    ask.add_argument("--url", required=True, help="service base URL")
    ask.add_argument("--question", required=True)
    ask.add_argument("--topic", action="append", default=[], help="topic entity (repeatable)")
    ask.add_argument("--k", type=int, default=None)
    ask.add_argument(
        "--retrieve-only", action="store_true", help="skip the reasoner, return triples"
    )
    return parser


def _run_stage_command(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args.overrides)
    written = run_stage(args.command, config)
    for path in written:
        print(path)
    return EXIT_OK


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import create_app

    config = resolve_config(args.config, args.overrides)
    app = create_app(config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _ask(args: argparse.Namespace) -> int:
    import requests

    url = args.url.rstrip("/")
    body = {"question": args.question, "topic_entities": args.topic}
    if args.k is not None:
        body["k"] = args.k
    route = "/retrieve" if args.retrieve_only else "/answer"
    try:
        resp = requests.post(url + route, json=body, timeout=300)
    except requests.RequestException as exc:
        print(f"service unreachable: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    if resp.status_code != 200:
        print(f"service returned {resp.status_code}: {resp.text}", file=sys.stderr)
        return EXIT_EXTERNAL
    print(json.dumps(resp.json(), indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command in STAGES:
            return _run_stage_command(args)
        if args.command == "serve":
            return _serve(args)
        if args.command == "ask":
            return _ask(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, FingerprintError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except (EncoderError, LlmError) as exc:
        print(f"external service error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except KgragError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
