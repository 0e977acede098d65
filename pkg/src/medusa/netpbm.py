"""Binary NetPBM codec: P5 (8-bit grayscale) and P6 (8-bit RGB)."""
import numpy as np

from .tensor import MedusaError


class NetpbmError(MedusaError, ValueError):
    """Malformed or unsupported NetPBM data."""


_CHANNELS = {b"P5": 1, b"P6": 3}


def encode(pixels):
    """Encode a uint8 array (H x W for P5, H x W x 3 for P6)."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise NetpbmError("pixels must be uint8, got %s" % arr.dtype)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError("expected H x W or H x W x 3 pixels, got shape %s" % (arr.shape,))
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    return header + np.ascontiguousarray(arr).tobytes()


def _tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    pos, out = 0, []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after header")
    return out, pos + 1


def decode(data):
    """Decode P5/P6 bytes into a uint8 array."""
    if data[:2] not in _CHANNELS:
        raise NetpbmError("bad magic %r (expected P5 or P6)" % data[:2])
    channels = _CHANNELS[data[:2]]
    (magic, w, h, maxval), start = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise NetpbmError("non-numeric header field") from None
    if w < 1 or h < 1:
        raise NetpbmError("invalid extents %dx%d" % (w, h))
    if maxval != 255:
        raise NetpbmError("only maxval 255 is supported, got %d" % maxval)
    size = w * h * channels
    raster = data[start:start + size]
    if len(raster) < size:
        raise NetpbmError("truncated raster: expected %d bytes, got %d" % (size, len(raster)))
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode(pixels))


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def quantize(values):
    """Map floats in [0, 1] to the nearest 8-bit level."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
