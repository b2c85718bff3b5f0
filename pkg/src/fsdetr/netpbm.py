"""Minimal binary PPM (P6) / PGM (P5) reading and writing.

8-bit only. Chosen over compressed formats so datasets and visualizations
round-trip without any external decoding dependency.
"""

import numpy as np


def write_ppm(path, image: np.ndarray):
    """Write a (3,H,W) float image in [0,1] as binary 8-bit PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def write_pgm(path, image: np.ndarray):
    """Write an (H,W) float image in [0,1] as binary 8-bit PGM."""
    if image.ndim != 2:
        raise ValueError(f"expected (H,W) image, got {image.shape}")
    h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def _read_header(f, magic: bytes):
    got = f.read(2)
    if got != magic:
        raise IOError(f"not a {magic.decode()} file (magic {got!r})")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise IOError("truncated netpbm header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise IOError(f"only 8-bit netpbm supported, got maxval {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    """Read a binary 8-bit PPM into a (3,H,W) float64 image in [0,1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise IOError(f"truncated PPM payload in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into an (H,W) float64 image in [0,1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise IOError(f"truncated PGM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
