"""Wire-protocol server: newline-delimited JSON on stdio or HTTP POST.

Every response echoes the request id; malformed requests and model
failures come back as error responses, never as a dead process. Responses
are serialized compactly with sorted keys so transcripts replay
byte-exactly.
"""

from __future__ import annotations

import base64
import io
import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources

import numpy as np
from PIL import Image as PILImage

from .config import AdapterConfig
from .models import load_captioner


def dump_response(resp: dict) -> str:
    return json.dumps(resp, sort_keys=True, separators=(",", ":"))


def _decode_image(obj: dict) -> np.ndarray:
    image = obj.get("image")
    if not isinstance(image, dict):
        raise ValueError("request carries no image object")
    width = int(image["width"])
    height = int(image["height"])
    raw = base64.b64decode(image["png_b64"])
    try:
        with PILImage.open(io.BytesIO(raw)) as pil:
            arr = np.asarray(pil.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ValueError(f"undecodable PNG payload ({type(exc).__name__})") from exc
    if arr.shape[:2] != (height, width):
        raise ValueError(
            f"PNG decodes to {arr.shape[1]}x{arr.shape[0]}, "
            f"header claims {width}x{height}"
        )
    return arr


def normalize_grid(grid: np.ndarray) -> np.ndarray:
    """Per-word attention must sum to 1 no matter what the model emitted."""
    grid = np.asarray(grid, dtype=np.float64)
    grid = np.where(np.isfinite(grid), grid, 0.0)
    grid = np.clip(grid, 0.0, None)
    total = grid.sum()
    if total <= 0.0:
        return np.full(grid.shape, 1.0 / grid.size)
    return grid / total


def handle_request(captioner, obj: dict) -> dict:
    rid = obj.get("id")
    op = obj.get("op")
    try:
        if op == "capabilities":
            resp = dict(captioner.capabilities())
            if rid is not None:
                resp["id"] = rid
            return resp
        if op == "caption":
            arr = _decode_image(obj)
            want = bool(obj.get("want_attention"))
            tokens, grids = captioner.caption(arr, want)
            resp = {"id": rid, "tokens": list(tokens)}
            if want:
                if grids is None:
                    return {"id": rid, "error": "model returned no attention"}
                resp["attention"] = [normalize_grid(g).tolist() for g in grids]
            return resp
        return {"id": rid, "error": f"unsupported op {op!r}"}
    except Exception as exc:  # answer, don't die
        return {"id": rid, "error": f"{type(exc).__name__}: {exc}"}


def handle_line(captioner, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        return {"id": None, "error": f"malformed request: {exc}"}
    if not isinstance(obj, dict):
        return {"id": None, "error": "request must be a JSON object"}
    return handle_request(captioner, obj)


def serve_stdio(config: AdapterConfig, stdin=None, stdout=None) -> None:
    captioner = load_captioner(config)
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(dump_response(handle_line(captioner, line)) + "\n")
        stdout.flush()


def build_http_server(config: AdapterConfig, host: str, port: int) -> ThreadingHTTPServer:
    captioner = load_captioner(config)

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            if self.path != "/v1/infer":
                self.send_error(404)
                return
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length).decode("utf-8")
            payload = dump_response(handle_line(captioner, body)).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)


def serve_http(config: AdapterConfig, host: str, port: int) -> None:
    server = build_http_server(config, host, port)
    print(f"serving {config.model} on http://{host}:{server.server_address[1]}/v1/infer",
          file=sys.stderr, flush=True)
    server.serve_forever()


def run_selftest(config: AdapterConfig) -> int:
    """Replay the bundled golden transcript; 0 when every response matches
    byte-for-byte."""
    captioner = load_captioner(config)
    transcript = resources.files("capadapter").joinpath("golden/selftest.jsonl")
    failures = 0
    total = 0
    for line in transcript.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        pair = json.loads(line)
        got = dump_response(handle_line(captioner, pair["send"]))
        total += 1
        if got != pair["expect"]:
            failures += 1
            print(f"selftest mismatch for request: {pair['send'][:80]}...",
                  file=sys.stderr)
            print(f"  expected: {pair['expect'][:120]}", file=sys.stderr)
            print(f"  got:      {got[:120]}", file=sys.stderr)
    status = "ok" if failures == 0 else "FAILED"
    print(f"selftest {status}: {total - failures}/{total} transcript responses match",
          file=sys.stderr)
    return 0 if failures == 0 else 1
