"""Plain Netpbm I/O: 16-bit PGM label maps (65535 = ignore), 8-bit PPM
images and overlays. Binary variants only (P5/P6), big-endian sample order
per the Netpbm spec."""

from __future__ import annotations

import numpy as np


def _read_header(f, magic: bytes):
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in line.split())
    w, h, maxval = fields[:3]
    return w, h, maxval


def write_pgm16(path, labels: np.ndarray):
    lab = np.asarray(labels)
    h, w = lab.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (w, h))
        f.write(lab.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P5")
        if maxval != 65535:
            raise ValueError(f"expected 16-bit PGM, maxval={maxval}")
        data = np.frombuffer(f.read(w * h * 2), dtype=">u2")
    if data.size != w * h:
        raise ValueError("truncated PGM payload")
    return data.reshape(h, w).astype(np.uint16)


def write_ppm8(path, image: np.ndarray):
    """image: (H, W, 3) floats in [0,1] or uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_ppm8(path) -> np.ndarray:
    """Returns (H, W, 3) uint8."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P6")
        if maxval != 255:
            raise ValueError(f"expected 8-bit PPM, maxval={maxval}")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError("truncated PPM payload")
    return data.reshape(h, w, 3)
