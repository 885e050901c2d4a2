"""The victim-model boundary: caption an image, optionally with attention
or an input gradient, through a uniform endpoint interface.

Attacks only ever see tokens, attention grids, and (for the gradient
baselines, when advertised) a loss gradient; endpoint internals stay
opaque. Three transports are supported:

* ``toy`` - the in-process deterministic captioner, for tests and sweeps;
* ``cmd:<argv>`` - a subprocess speaking newline-delimited JSON on stdio;
* ``http(s)://host[:port]`` - HTTP POST /v1/infer with the same body.

Wire format (one JSON object per line on stdio):
request  {"id": str, "op": "caption"|"gradient",
          "image": {"width": int, "height": int, "png_b64": str},
          "want_attention": bool, "references": [[str, ...], ...]}
response {"id": str, "tokens": [str, ...],
          "attention": [[[float, ...], ...], ...],   # word-major grids
          "grad_b64": str,     # little-endian float32, 3*W*H, RGB-interleaved
          "error": str}        # optional
The first request {"op": "capabilities"} is answered with
{"caption": bool, "attention": bool, "gradient": bool, "info": str}.
"""

from __future__ import annotations

import itertools
import json
import shlex
import subprocess
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from . import pngio
from .attention import GRID_SUM_TOL, AttentionStack
from .errors import (
    BudgetError,
    ConfigError,
    OracleIOError,
    ProtocolError,
    UnsupportedCapabilityError,
)
from .raster import Image
from .toy import ToyCaptionerConfig, toy_attention, toy_caption, toy_loss_gradient


@dataclass(frozen=True)
class Capabilities:
    caption: bool = True
    attention: bool = False
    gradient: bool = False
    info: str = ""


@dataclass(frozen=True)
class CaptionResult:
    """Oracle output: caption tokens plus, optionally, per-word attention."""

    tokens: tuple[str, ...]
    attention: AttentionStack | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.attention is not None and self.attention.words != self.tokens:
            raise ProtocolError("attention words do not match caption tokens")


class CaptionOracle:
    """Base endpoint: budget accounting plus the caption/gradient surface."""

    def __init__(self, call_budget: int | None = None):
        self._budget = call_budget
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls_used(self) -> int:
        with self._lock:
            return self._calls

    def _charge(self) -> None:
        with self._lock:
            if self._budget is not None and self._calls >= self._budget:
                raise BudgetError(f"oracle call budget of {self._budget} exhausted")
            self._calls += 1

    def capabilities(self) -> Capabilities:
        raise NotImplementedError

    def caption(self, image: Image, want_attention: bool = False) -> CaptionResult:
        raise NotImplementedError

    def loss_gradient(self, image: Image, refs) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ToyOracle(CaptionOracle):
    """In-process endpoint around the deterministic toy captioner."""

    def __init__(self, config: ToyCaptionerConfig | None = None, call_budget: int | None = None):
        super().__init__(call_budget)
        self.config = config or ToyCaptionerConfig()

    def capabilities(self) -> Capabilities:
        return Capabilities(
            caption=True,
            attention=True,
            gradient=True,
            info=f"toy captioner grid={self.config.grid} "
            f"salient={self.config.salient_cells} deterministic",
        )

    def caption(self, image: Image, want_attention: bool = False) -> CaptionResult:
        self._charge()
        tokens = toy_caption(self.config, image)
        stack = toy_attention(self.config, image, tokens) if want_attention else None
        return CaptionResult(tokens=tokens, attention=stack)

    def loss_gradient(self, image: Image, refs) -> np.ndarray:
        self._charge()
        return toy_loss_gradient(self.config, image)


def _stack_from_wire(tokens, grids) -> AttentionStack:
    arr = np.asarray(grids, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != len(tokens):
        raise ProtocolError("attention payload is not one grid per token")
    sums = arr.reshape(arr.shape[0], -1).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > GRID_SUM_TOL):
        raise ProtocolError("attention grids are not normalized to sum 1")
    return AttentionStack(words=tuple(tokens), grids=arr)


def _grad_from_wire(data: str, width: int, height: int) -> np.ndarray:
    import base64

    raw = base64.b64decode(data)
    expected = 3 * width * height * 4
    if len(raw) != expected:
        raise ProtocolError(
            f"gradient payload is {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(height, width, 3)


class _RemoteOracle(CaptionOracle):
    """Shared request/response handling for the stdio and HTTP transports."""

    def __init__(self, call_budget: int | None = None):
        super().__init__(call_budget)
        self._ids = itertools.count(1)
        self._caps: Capabilities | None = None

    def _roundtrip(self, payload: dict) -> dict:
        raise NotImplementedError

    def capabilities(self) -> Capabilities:
        if self._caps is None:
            resp = self._roundtrip({"op": "capabilities"})
            try:
                self._caps = Capabilities(
                    caption=bool(resp["caption"]),
                    attention=bool(resp.get("attention", False)),
                    gradient=bool(resp.get("gradient", False)),
                    info=str(resp.get("info", "")),
                )
            except KeyError as exc:
                raise ProtocolError(f"capabilities response missing {exc}") from exc
        return self._caps

    def _checked(self, payload: dict) -> dict:
        resp = self._roundtrip(payload)
        if resp.get("error"):
            raise ProtocolError(f"oracle error: {resp['error']}")
        if resp.get("id") != payload["id"]:
            raise ProtocolError(
                f"response id {resp.get('id')!r} does not match request {payload['id']!r}"
            )
        return resp

    def caption(self, image: Image, want_attention: bool = False) -> CaptionResult:
        caps = self.capabilities()
        if want_attention and not caps.attention:
            raise UnsupportedCapabilityError("endpoint does not provide attention")
        self._charge()
        resp = self._checked(
            {
                "id": str(next(self._ids)),
                "op": "caption",
                "image": {
                    "width": image.width,
                    "height": image.height,
                    "png_b64": pngio.to_png_b64(image),
                },
                "want_attention": bool(want_attention),
            }
        )
        if "tokens" not in resp:
            raise ProtocolError("caption response carries no tokens")
        tokens = tuple(str(t) for t in resp["tokens"])
        stack = None
        if want_attention:
            if "attention" not in resp:
                raise ProtocolError("attention requested but absent from response")
            stack = _stack_from_wire(tokens, resp["attention"])
        return CaptionResult(tokens=tokens, attention=stack)

    def loss_gradient(self, image: Image, refs) -> np.ndarray:
        if not self.capabilities().gradient:
            raise UnsupportedCapabilityError("endpoint does not provide gradients")
        self._charge()
        resp = self._checked(
            {
                "id": str(next(self._ids)),
                "op": "gradient",
                "image": {
                    "width": image.width,
                    "height": image.height,
                    "png_b64": pngio.to_png_b64(image),
                },
                "references": [list(r) for r in refs],
            }
        )
        if "grad_b64" not in resp:
            raise ProtocolError("gradient response carries no grad_b64")
        return _grad_from_wire(resp["grad_b64"], image.width, image.height)


class StdioOracle(_RemoteOracle):
    """Endpoint served by a subprocess over newline-delimited JSON.

    Responses may arrive out of order; they are matched to requests by id.
    """

    def __init__(self, argv: list[str], call_budget: int | None = None):
        super().__init__(call_budget)
        self._argv = list(argv)
        self._io_lock = threading.Lock()
        self._pending: dict[str, dict] = {}
        try:
            self._proc = subprocess.Popen(
                self._argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
            )
        except OSError as exc:
            raise OracleIOError(f"cannot start oracle process {self._argv!r}: {exc}") from exc

    def _roundtrip(self, payload: dict) -> dict:
        want_id = payload.get("id")
        with self._io_lock:
            if want_id is not None and want_id in self._pending:
                return self._pending.pop(want_id)
            try:
                self._proc.stdin.write(json.dumps(payload, sort_keys=True) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError) as exc:
                raise OracleIOError(f"oracle process pipe failed: {exc}") from exc
            while True:
                line = self._proc.stdout.readline()
                if not line:
                    raise OracleIOError(
                        f"oracle process exited (code {self._proc.poll()})"
                    )
                try:
                    resp = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ProtocolError(f"undecodable oracle response: {exc}") from exc
                if want_id is None or resp.get("id") == want_id:
                    return resp
                if resp.get("id") is not None:
                    self._pending[resp["id"]] = resp

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class HttpOracle(_RemoteOracle):
    """Endpoint behind HTTP POST /v1/infer."""

    def __init__(self, url: str, call_budget: int | None = None, timeout: float = 60.0):
        super().__init__(call_budget)
        self._url = url.rstrip("/")
        if not self._url.endswith("/v1/infer"):
            self._url += "/v1/infer"
        self._timeout = timeout

    def _roundtrip(self, payload: dict) -> dict:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        req = urllib.request.Request(
            self._url, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self._timeout) as resp:
                raw = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise OracleIOError(f"HTTP oracle at {self._url} failed: {exc}") from exc
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"undecodable oracle response: {exc}") from exc


def _parse_toy_spec(spec: str) -> ToyCaptionerConfig:
    if spec == "toy":
        return ToyCaptionerConfig()
    fields = {}
    for part in spec[len("toy:") :].split(","):
        if not part:
            continue
        key, _, value = part.partition("=")
        try:
            fields[key.strip()] = int(value)
        except ValueError as exc:
            raise ConfigError(f"bad toy option {part!r}") from exc
    allowed = {"grid", "salient_cells"}
    unknown = set(fields) - allowed
    if unknown:
        raise ConfigError(f"unknown toy options {sorted(unknown)}; allowed: {sorted(allowed)}")
    return ToyCaptionerConfig(**fields)


def open_endpoint(spec: str, call_budget: int | None = None) -> CaptionOracle:
    """Build an endpoint from a CLI-style spec.

    ``toy`` or ``toy:grid=8,salient_cells=1`` for the in-process captioner,
    ``cmd:<command line>`` for a stdio subprocess, or an ``http(s)://`` URL.
    """
    if spec == "toy" or spec.startswith("toy:"):
        return ToyOracle(_parse_toy_spec(spec), call_budget=call_budget)
    if spec.startswith("cmd:"):
        argv = shlex.split(spec[len("cmd:") :])
        if not argv:
            raise ConfigError("cmd: oracle spec is empty")
        return StdioOracle(argv, call_budget=call_budget)
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpOracle(spec, call_budget=call_budget)
    raise ConfigError(
        f"unrecognized oracle spec {spec!r}; expected 'toy', 'cmd:...', or an http(s) URL"
    )
