"""Caption-model adapter: hosts a captioner behind the oracle wire protocol.

One JSON object per line on stdio (or HTTP POST /v1/infer): ``capabilities``
handshake, ``caption`` with optional per-word attention grids, and error
responses that echo the request id. Attention normalization (each grid sums
to 1) is enforced here regardless of what the underlying model emits; grids
ship at model resolution and are never resampled by the adapter.
"""

from .config import AdapterConfig
from .models import StubCaptioner, load_captioner
from .server import handle_line, handle_request, run_selftest, serve_stdio

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "StubCaptioner",
    "handle_line",
    "handle_request",
    "load_captioner",
    "run_selftest",
    "serve_stdio",
]
