"""Serve the toy captioner over the oracle wire protocol.

Runs as ``python -m captionattack.serve_toy`` (or ``attack serve-toy``),
speaking newline-delimited JSON on stdio by default, or HTTP POST /v1/infer
with ``--http PORT``. Responses are serialized compactly with sorted keys
so transcripts are byte-reproducible.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import pngio
from .errors import ProtocolError
from .toy import ToyCaptionerConfig, toy_attention, toy_caption, toy_loss_gradient


def dump_response(resp: dict) -> str:
    return json.dumps(resp, sort_keys=True, separators=(",", ":"))


def _decode_image(obj: dict):
    image = obj.get("image")
    if not isinstance(image, dict):
        raise ProtocolError("request carries no image object")
    try:
        width = int(image["width"])
        height = int(image["height"])
        payload = image["png_b64"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed image object: {exc}") from exc
    return pngio.from_png_b64(payload, width, height)


def handle_request(cfg: ToyCaptionerConfig, obj: dict) -> dict:
    """Map one request object to one response object (never raises)."""
    rid = obj.get("id")
    op = obj.get("op")
    try:
        if op == "capabilities":
            resp = {
                "caption": True,
                "attention": True,
                "gradient": True,
                "info": f"toy captioner grid={cfg.grid} salient={cfg.salient_cells} "
                "greedy deterministic",
            }
            if rid is not None:
                resp["id"] = rid
            return resp
        if op == "caption":
            image = _decode_image(obj)
            tokens = toy_caption(cfg, image)
            resp = {"id": rid, "tokens": list(tokens)}
            if obj.get("want_attention"):
                stack = toy_attention(cfg, image, tokens)
                resp["attention"] = [grid.tolist() for grid in stack.grids]
            return resp
        if op == "gradient":
            image = _decode_image(obj)
            grad = toy_loss_gradient(cfg, image).astype("<f4")
            return {
                "id": rid,
                "tokens": list(toy_caption(cfg, image)),
                "grad_b64": base64.b64encode(grad.tobytes()).decode("ascii"),
            }
        return {"id": rid, "error": f"unsupported op {op!r}"}
    except Exception as exc:  # protocol servers answer, they do not die
        return {"id": rid, "error": f"{type(exc).__name__}: {exc}"}


def handle_line(cfg: ToyCaptionerConfig, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        return {"id": None, "error": f"malformed request: {exc}"}
    if not isinstance(obj, dict):
        return {"id": None, "error": "request must be a JSON object"}
    return handle_request(cfg, obj)


def serve_stdio(cfg: ToyCaptionerConfig, stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(dump_response(handle_line(cfg, line)) + "\n")
        stdout.flush()


def build_http_server(cfg: ToyCaptionerConfig, host: str, port: int) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path != "/v1/infer":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length).decode("utf-8")
            payload = dump_response(handle_line(cfg, body)).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def serve_http(cfg: ToyCaptionerConfig, host: str, port: int) -> None:
    server = build_http_server(cfg, host, port)
    print(f"serving toy captioner on http://{host}:{server.server_address[1]}/v1/infer",
          file=sys.stderr, flush=True)
    server.serve_forever()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Serve the toy captioner")
    parser.add_argument("--grid", type=int, default=4)
    parser.add_argument("--salient-cells", type=int, default=2)
    parser.add_argument("--http", type=int, metavar="PORT",
                        help="serve over HTTP instead of stdio")
    parser.add_argument("--host", default="127.0.0.1")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ToyCaptionerConfig(grid=args.grid, salient_cells=args.salient_cells)
    if args.http is not None:
        serve_http(cfg, args.host, args.http)
    else:
        serve_stdio(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
