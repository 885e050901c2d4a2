"""Lossless PNG encode/decode for rasters and the oracle wire format."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image as PILImage

from .errors import ProtocolError
from .raster import Image


def to_png_bytes(image: Image) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> Image:
    with PILImage.open(io.BytesIO(data)) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.uint8)
    return Image.from_array(arr)


def to_png_b64(image: Image) -> str:
    return base64.b64encode(to_png_bytes(image)).decode("ascii")


def from_png_b64(data: str, width: int | None = None, height: int | None = None) -> Image:
    try:
        image = from_png_bytes(base64.b64decode(data))
    except Exception as exc:
        raise ProtocolError(f"undecodable PNG payload: {exc}") from exc
    if width is not None and (image.width != width or image.height != height):
        raise ProtocolError(
            f"PNG decodes to {image.width}x{image.height}, "
            f"header claims {width}x{height}"
        )
    return image


def save_png(image: Image, path) -> None:
    PILImage.fromarray(image.pixels, mode="RGB").save(path, format="PNG")


def load_png(path) -> Image:
    with PILImage.open(path) as pil:
        arr = np.asarray(pil.convert("RGB"), dtype=np.uint8)
    return Image.from_array(arr)
