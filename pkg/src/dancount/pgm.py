"""Binary 8-bit portable graymap (P5) reading and writing."""

from pathlib import Path

import numpy as np

from .errors import IoFailure, MalformedFile


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] (or a uint8 image) as P5."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = data.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(data).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _tokens(buf: bytes, n: int):
    """First n header tokens of a PNM file and the offset after them."""
    toks, i = [], 0
    while len(toks) < n:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise MalformedFile("truncated PGM header")
        toks.append(buf[i:j])
        i = j
    return toks, i + 1  # single whitespace byte after maxval


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a float64 array scaled to [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    toks, off = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise MalformedFile(f"{path}: not a binary graymap")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    if maxval != 255:
        raise MalformedFile(f"{path}: only 8-bit graymaps are supported")
    raw = buf[off : off + w * h]
    if len(raw) != w * h:
        raise MalformedFile(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
