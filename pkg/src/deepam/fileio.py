"""Image file I/O: binary PGM (P5) for 8-bit grayscale, PFM for floats,
PNG for 8-bit export.

PGM and PFM are written from scratch so round trips are bit-exact: PFM
stores little-endian float32 samples unchanged; 8-bit formats clamp to
[0, 255] and round half away from zero.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .images import check_image


class ImageFormatError(ValueError):
    """Bad magic, truncated payload, or unsupported layout."""


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half away from zero to uint8."""
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(a + 0.5), 0.0, 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255)
# ---------------------------------------------------------------------------


def save_pgm(img: np.ndarray, path) -> None:
    a = check_image(img)
    if a.ndim != 2:
        raise ImageFormatError("PGM stores a single channel")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(quantize_u8(a).tobytes())


def _read_pnm_tokens(data: bytes, count: int, offset: int):
    """Read whitespace-separated ASCII tokens, honoring '#' comments."""
    tokens = []
    i = offset
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:i])
    return tokens, i + 1  # skip the single whitespace after the last token


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary PGM (bad magic)")
    tokens, offset = _read_pnm_tokens(data, 3, 2)
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    need = h * w
    payload = data[offset : offset + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# PFM (float32, little-endian via negative scale, rows bottom-to-top)
# ---------------------------------------------------------------------------


def save_pfm(img: np.ndarray, path) -> None:
    a = check_image(img)
    if a.ndim == 2:
        magic, planes = b"Pf", a[None]
    elif a.shape[0] == 3:
        magic, planes = b"PF", a
    else:
        raise ImageFormatError("PFM stores 1 or 3 channels")
    h, w = planes.shape[1:]
    # interleave channels per pixel, bottom row first
    inter = np.ascontiguousarray(planes.transpose(1, 2, 0)[::-1], dtype="<f4")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(inter.tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data.startswith(b"PF"):
        channels = 3
    elif data.startswith(b"Pf"):
        channels = 1
    else:
        raise ImageFormatError(f"{path}: not a PFM (bad magic)")
    tokens, offset = _read_pnm_tokens(data, 3, 2)
    w, h = int(tokens[0]), int(tokens[1])
    scale = float(tokens[2])
    dtype = "<f4" if scale < 0 else ">f4"
    need = h * w * channels * 4
    payload = data[offset : offset + need]
    if len(payload) != need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)[::-1]
    arr = arr.transpose(2, 0, 1).astype(np.float64)
    return arr[0] if channels == 1 else arr


# ---------------------------------------------------------------------------
# PNG (8-bit export via Pillow)
# ---------------------------------------------------------------------------


def save_png(img: np.ndarray, path) -> None:
    from PIL import Image as PILImage

    a = check_image(img)
    q = quantize_u8(a)
    if a.ndim == 2:
        im = PILImage.fromarray(q, mode="L")
    elif a.shape[0] == 3:
        im = PILImage.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0)), mode="RGB")
    else:
        raise ImageFormatError("PNG export supports 1 or 3 channels")
    im.save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image as PILImage, UnidentifiedImageError

    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
            arr = np.asarray(im, dtype=np.float64)
    except UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: {e}") from e
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    return arr


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

_SAVERS = {".pgm": save_pgm, ".pfm": save_pfm, ".png": save_png}
_LOADERS = {".pgm": load_pgm, ".pfm": load_pfm, ".png": load_png}


def save_image(img: np.ndarray, path) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    saver = _SAVERS.get(ext)
    if saver is None:
        raise ImageFormatError(f"unsupported image extension {ext!r}")
    saver(img, path)


def load_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    loader = _LOADERS.get(ext)
    if loader is not None:
        return loader(path)
    # fall back to magic sniffing for unknown extensions
    with open(path, "rb") as f:
        head = f.read(8)
    if head.startswith(b"P5"):
        return load_pgm(path)
    if head.startswith(b"PF") or head.startswith(b"Pf"):
        return load_pfm(path)
    if head.startswith(b"\x89PNG"):
        return load_png(path)
    raise ImageFormatError(f"{path}: unknown magic bytes {head[:4]!r}")
