"""Run the service: python -m embedserver [--host H] [--port P]."""
from __future__ import annotations

import argparse
from pathlib import Path

import uvicorn

from .app import create_app
from .registry import Registry


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description="embedding/scoring inference service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8100)
    parser.add_argument("--models", type=Path, default=None,
                        help="registry YAML (default: packaged models.yaml)")
    parser.add_argument("--max-batch", type=int, default=32)
    parser.add_argument("--max-wait-ms", type=float, default=50.0)
    args = parser.parse_args(argv)

    registry = Registry.from_yaml(args.models.read_text("utf-8")) if args.models else None
    app = create_app(registry, max_batch=args.max_batch, max_wait_ms=args.max_wait_ms)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    main()
