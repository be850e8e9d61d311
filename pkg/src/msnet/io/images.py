"""Binary PPM (P6) / PGM (P5) reading and writing, 8 or 16 bits per sample."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """Read ``count`` header tokens, skipping comments; return (tokens, data offset)."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ImageFormatError("truncated header")
        out.append(buf[i:j])
        i = j
    return out, i + 1  # one whitespace byte separates header and raster


def decode_pnm(buf: bytes) -> np.ndarray:
    """Return (H, W) for PGM or (H, W, 3) for PPM, scaled to [0, 1] float32."""
    toks, off = _tokens(buf, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected binary P5 or P6")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise ImageFormatError("non-integer header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad header: {w}x{h} maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * ch * dtype.itemsize
    if len(buf) - off < need:
        raise ImageFormatError(f"truncated raster: need {need} bytes, have {len(buf) - off}")
    pix = np.frombuffer(buf[off:off + need], dtype=dtype).astype(np.float32) / maxval
    return pix.reshape(h, w, ch) if ch == 3 else pix.reshape(h, w)


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def encode_pnm(img: np.ndarray, maxval: int = 255) -> bytes:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"expected (H, W) or (H, W, 3), got shape {img.shape}")
    h, w = img.shape[:2]
    dtype = ">u2" if maxval > 255 else np.uint8
    raster = np.round(img * maxval).astype(dtype).tobytes()
    return b"%s\n%d %d\n%d\n" % (magic, w, h, maxval) + raster


def write_pnm(path, img: np.ndarray, maxval: int = 255) -> None:
    with open(path, "wb") as f:
        f.write(encode_pnm(img, maxval))


def to_nchw(img: np.ndarray) -> np.ndarray:
    """(H, W[, 3]) image in [0, 1] -> (1, 3, H, W) float32; gray is replicated."""
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None], dtype=np.float32)
