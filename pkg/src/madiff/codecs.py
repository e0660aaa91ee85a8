"""
Binary PPM (P6) and PGM (P5) codecs plus the pixel <-> model-range mapping.

Images are H x W x 3 float tensors in [-1, 1]; masks are H x W tensors in {0, 1}.
Only maxval 255 is accepted. Header errors report the byte offset where
parsing stopped.
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import FormatError, RangeError, ShapeError, ValidationError
from .numerics import DTYPE, Tensor

PathLike = Union[str, Path]

_WHITESPACE = b" \t\n\r\v\f"


def dequantize(pixels: np.ndarray) -> Tensor:
    """8-bit values to model range: v -> 2v/255 - 1."""
    return np.asarray(pixels, dtype=DTYPE) * (2.0 / 255.0) - 1.0


def quantize(x: Tensor) -> np.ndarray:
    """Model range to 8-bit with round-half-away-from-zero, clipped to [0, 255]."""
    v = (np.asarray(x, dtype=DTYPE) + 1.0) * 127.5
    rounded = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def _read_header(data: bytes, magic: bytes, path) -> Tuple[int, int, int, int]:
    """Parse ``magic width height maxval`` and return them with the payload offset."""
    if not data.startswith(magic):
        raise FormatError(f"expected {magic.decode()} magic", offset=0, path=path)
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        start = pos
        while pos < len(data) and data[pos] in _WHITESPACE:
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos == start:
            raise FormatError("missing whitespace in header", offset=pos, path=path)
        token_start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == token_start:
            raise FormatError("expected a decimal header field", offset=pos, path=path)
        fields.append(int(data[token_start:pos]))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("header must end with one whitespace byte", offset=pos, path=path)
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid size {width}x{height}", offset=pos, path=path)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255", offset=pos, path=path)
    return width, height, maxval, pos + 1


def _payload(data: bytes, offset: int, count: int, path) -> np.ndarray:
    if len(data) - offset < count:
        raise FormatError(
            f"truncated payload: {len(data) - offset} of {count} bytes",
            offset=len(data),
            path=path,
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)


def decode_ppm(data: bytes, path=None) -> np.ndarray:
    width, height, _, offset = _read_header(data, b"P6", path)
    return _payload(data, offset, width * height * 3, path).reshape(height, width, 3).copy()


def decode_pgm(data: bytes, path=None) -> np.ndarray:
    width, height, _, offset = _read_header(data, b"P5", path)
    return _payload(data, offset, width * height, path).reshape(height, width).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"PPM needs H x W x 3 pixels, got {pixels.shape}")
    height, width, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (width, height) + np.ascontiguousarray(pixels, np.uint8).tobytes()


def encode_pgm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 2:
        raise ShapeError(f"PGM needs H x W pixels, got {pixels.shape}")
    height, width = pixels.shape
    return b"P5\n%d %d\n255\n" % (width, height) + np.ascontiguousarray(pixels, np.uint8).tobytes()


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read file: {e}", path=path)


def load_image(path: PathLike) -> Tensor:
    """PPM file to an H x W x 3 tensor in model range."""
    return dequantize(decode_ppm(_read(path), path))


def save_image(x: Tensor, path: PathLike) -> Path:
    x = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        raise RangeError("cannot save an image with non-finite values")
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(encode_ppm(quantize(x)))
    return output


def check_binary(mask: Tensor, what: str = "mask") -> Tensor:
    m = np.asarray(mask, dtype=DTYPE)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError(f"{what} is not binary (values other than 0 and 1)")
    return m


def load_mask(path: PathLike) -> Tensor:
    """PGM file (0 = excluded, 255 = included) to an H x W {0, 1} tensor."""
    pixels = decode_pgm(_read(path), path)
    if not np.all((pixels == 0) | (pixels == 255)):
        raise ValidationError(f"mask {path} has values other than 0 and 255")
    return (pixels == 255).astype(DTYPE)


def save_mask(mask: Tensor, path: PathLike) -> Path:
    m = check_binary(mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(encode_pgm((m * 255).astype(np.uint8)))
    return output
