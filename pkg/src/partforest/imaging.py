"""Image containers, running-average background model and blob utilities.

Frames, score maps and masks are plain numpy arrays indexed ``[row, col]``.
Frames are float64 intensities in [0, 255]; masks are boolean.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage


class ShapeError(ValueError):
    """Raised when array dimensions do not agree."""


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box dimensions must be >= 1, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersection(self, other: "BoundingBox") -> int:
        iw = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        ih = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        return max(iw, 0) * max(ih, 0)


@dataclass(frozen=True)
class BackgroundModel:
    """Running average background ``mean`` with learning rate and threshold."""

    mean: np.ndarray
    learning_rate: float = 0.05
    threshold: float = 25.0

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        mean = np.array(self.mean, dtype=np.float64)
        if mean.ndim != 2 or min(mean.shape) < 1:
            raise ShapeError(f"background mean must be a non-empty 2D grid, got {mean.shape}")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def update_background(bg: BackgroundModel, frame: np.ndarray) -> BackgroundModel:
    frame = np.asarray(frame, dtype=np.float64)
    _check_same_shape(bg.mean, frame)
    a = bg.learning_rate
    return replace(bg, mean=a * frame + (1.0 - a) * bg.mean)


def subtract_background(bg: BackgroundModel, frame: np.ndarray) -> np.ndarray:
    """Foreground where the frame departs from the background by more than the threshold.

    Pixels exactly at the threshold are background.
    """
    frame = np.asarray(frame, dtype=np.float64)
    _check_same_shape(bg.mean, frame)
    return np.abs(frame - bg.mean) > bg.threshold


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def clean_mask(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Drop 4-connected foreground components smaller than ``min_area`` pixels."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def integral_image(mask: np.ndarray) -> np.ndarray:
    """Summed-area table with a zero first row and column."""
    m = np.asarray(mask, dtype=np.int64)
    out = np.zeros((m.shape[0] + 1, m.shape[1] + 1), dtype=np.int64)
    out[1:, 1:] = m.cumsum(0).cumsum(1)
    return out


def box_sums(integral: np.ndarray, x0, y0, x1, y1) -> np.ndarray:
    """Foreground counts inside half-open boxes ``[x0, x1) x [y0, y1)``.

    Coordinates may be arrays and may fall outside the image; they are clipped,
    so out-of-bounds parts of a box contribute nothing.
    """
    h, w = integral.shape[0] - 1, integral.shape[1] - 1
    x0 = np.clip(x0, 0, w)
    x1 = np.clip(x1, 0, w)
    y0 = np.clip(y0, 0, h)
    y1 = np.clip(y1, 0, h)
    x1 = np.maximum(x1, x0)
    y1 = np.maximum(y1, y0)
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def overlap_ratio(mask: np.ndarray, box: BoundingBox) -> float:
    """Fraction of the box area covered by foreground; outside pixels count as background."""
    integral = integral_image(mask)
    count = box_sums(integral, box.x, box.y, box.x + box.w, box.y + box.h)
    return float(count) / box.area


# -- PGM (P5) serialization -------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM. Boolean masks are stored as {0, 255}."""
    image = np.asarray(image)
    if image.dtype == bool:
        data = image.astype(np.uint8) * 255
    else:
        data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64)


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm(path) > 127
