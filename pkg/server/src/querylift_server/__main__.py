"""CLI entry point: configure from flags and environment, then serve."""

from __future__ import annotations

import argparse
import os
import sys

from .app import ServerConfig, create_app


def build_config(argv: list[str] | None = None) -> ServerConfig:
    env = os.environ
    parser = argparse.ArgumentParser(
        prog="querylift-embed-server",
        description="Serve a local text encoder behind the embeddings HTTP contract.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "--model",
        default=env.get("QUERYLIFT_SERVER_MODEL", "hash-mlp:256"),
        help="hash-mlp:<dim>[:<seed>] or st:<sentence-transformers name>",
    )
    parser.add_argument("--host", default=env.get("QUERYLIFT_SERVER_HOST", "127.0.0.1"))
    parser.add_argument(
        "--port", type=int, default=int(env.get("QUERYLIFT_SERVER_PORT", "8876"))
    )
    parser.add_argument(
        "--max-batch", type=int,
        default=int(env.get("QUERYLIFT_SERVER_MAX_BATCH", "256")),
        help="largest accepted input list; bigger requests get HTTP 413",
    )
    parser.add_argument(
        "--no-normalize", action="store_true",
        help="return raw encoder outputs instead of unit vectors",
    )
    args = parser.parse_args(argv)
    return ServerConfig(
        model=args.model,
        host=args.host,
        port=args.port,
        max_batch=args.max_batch,
        normalize=not args.no_normalize,
    )


def main(argv: list[str] | None = None) -> int:
    import uvicorn

    config = build_config(argv)
    try:
        app = create_app(config)
    except Exception as e:
        print(f"error: cannot load model {config.model!r}: {e}", file=sys.stderr)
        return 2
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
