"""Binary PGM (P5) I/O, a synthetic test texture and PSNR."""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np

from .errors import ValidationError


def _tokens(data: bytes, count: int) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i >= len(data):
            raise ValidationError("truncated PGM header")
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        out.append(data[i:j])
        i = j
    return out, i


def read_pgm(path) -> np.ndarray:
    """Load an 8-bit binary PGM as a float image on [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as err:
        raise ValidationError(f"cannot read image {path}: {err}") from err
    if data[:2] != b"P5":
        raise ValidationError(f"{path}: not a binary 8-bit grayscale PGM (magic {data[:2]!r})")
    (magic, w, h, maxval), i = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ValidationError(f"{path}: malformed PGM header") from None
    if w <= 0 or h <= 0:
        raise ValidationError(f"{path}: invalid size {w}x{h}")
    if not 0 < maxval < 256:
        raise ValidationError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    start = i + 1
    pixels = data[start:start + w * h]
    if len(pixels) != w * h:
        raise ValidationError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return img.astype(float) / maxval


def write_pgm(path, image) -> None:
    """Write an image on [0, 1] (clipped, rounded) as 8-bit binary PGM."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValidationError("PGM images must be two-dimensional")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())
    os.replace(tmp, path)


def synthetic_texture(shape=(32, 32), seed: int = 0) -> np.ndarray:
    """Smooth seeded test image on [0, 1]: oriented sinusoids plus Gaussian blobs."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros(shape)
    for _ in range(3):
        f = rng.uniform(1.0, 4.0)
        th = rng.uniform(0, np.pi)
        img += np.sin(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy) + rng.uniform(0, 2 * np.pi))
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.2)
        img += 2.0 * rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    img -= img.min()
    return img / img.max()


def psnr(x, truth) -> float:
    """``10 log10(1 / MSE)`` for images on [0, 1]."""
    mse = float(np.mean((np.asarray(x).ravel() - np.asarray(truth).ravel()) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
