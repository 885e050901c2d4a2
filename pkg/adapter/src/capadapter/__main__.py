"""CLI entry point: ``python -m capadapter`` or the ``capadapter`` script."""

from __future__ import annotations

import argparse
import sys

from .config import AdapterConfig
from .server import run_selftest, serve_http, serve_stdio


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capadapter",
        description="Host a captioning model behind the caption-oracle protocol",
    )
    parser.add_argument("--model", default="stub",
                        help="'stub' or 'blip:<huggingface-id>'")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--decoding", default="greedy",
                        help="'greedy' or 'beam:<width>'")
    parser.add_argument("--max-length", type=int, default=20)
    parser.add_argument("--attention-layer", default="cross:-1",
                        help="which attention tensor to export (model-specific)")
    parser.add_argument("--http", type=int, metavar="PORT", default=None,
                        help="serve over HTTP instead of stdio")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--selftest", action="store_true",
                        help="replay the bundled golden transcript and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = AdapterConfig(
        model=args.model,
        device=args.device,
        decoding=args.decoding,
        max_length=args.max_length,
        attention_layer=args.attention_layer,
    )
    if args.selftest:
        return run_selftest(config)
    if args.http is not None:
        serve_http(config, args.host, args.http)
    else:
        serve_stdio(config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
