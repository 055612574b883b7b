"""Histogram-of-oriented-gradients feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ShapeError


@dataclass(frozen=True)
class FeatureMap:
    """Cell grid of orientation histograms; ``data`` is indexed (cy, cx, channel)."""

    data: np.ndarray
    cell_size: int

    @property
    def cells_y(self) -> int:
        return self.data.shape[0]

    @property
    def cells_x(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _gradients(image):
    padded = np.pad(image, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


def cell_histograms(image: np.ndarray, cell_size: int, n_orientations: int) -> np.ndarray:
    """Unnormalized per-cell orientation histograms, shape (cells_y, cells_x, n_orientations).

    Orientation is unsigned; bin k is centred on k*pi/n and each pixel's
    magnitude is split linearly between its two nearest bins.
    """
    image = np.asarray(image, dtype=np.float64)
    gx, gy = _gradients(image)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / n_orientations)
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo %= n_orientations
    hi = (lo + 1) % n_orientations

    cy, cx = image.shape[0] // cell_size, image.shape[1] // cell_size
    h, w = cy * cell_size, cx * cell_size
    cell_index = (np.arange(h)[:, None] // cell_size) * cx + (np.arange(w)[None, :] // cell_size)
    cell_index = cell_index.ravel()
    m = mag[:h, :w].ravel()
    hist = np.zeros(cy * cx * n_orientations)
    np.add.at(hist, cell_index * n_orientations + lo[:h, :w].ravel(), m * (1.0 - frac[:h, :w].ravel()))
    np.add.at(hist, cell_index * n_orientations + hi[:h, :w].ravel(), m * frac[:h, :w].ravel())
    return hist.reshape(cy, cx, n_orientations)


def compute_hog(
    image: np.ndarray,
    cell_size: int = 8,
    n_orientations: int = 9,
    clip: float | None = 0.2,
    eps: float = 1e-10,
) -> FeatureMap:
    """HOG feature map with 2x2-cell block normalization.

    Each block is L2-normalized, clipped at ``clip`` and renormalized
    (``clip=None`` skips the clip step). A cell's output is the average of the
    normalized copies from every block that contains it.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 3 * cell_size:
        raise ShapeError(
            f"image {image.shape} too small for cell size {cell_size} (need >= {3 * cell_size})"
        )
    hist = cell_histograms(image, cell_size, n_orientations)
    cy, cx, n = hist.shape

    # blocks[by, bx] stacks the four cells (by..by+1, bx..bx+1)
    blocks = np.stack(
        [hist[:-1, :-1], hist[:-1, 1:], hist[1:, :-1], hist[1:, 1:]], axis=2
    )
    norm = np.sqrt((blocks**2).sum(axis=(2, 3), keepdims=True) + eps)
    blocks = blocks / norm
    if clip is not None:
        blocks = np.minimum(blocks, clip)
        norm = np.sqrt((blocks**2).sum(axis=(2, 3), keepdims=True) + eps)
        blocks = blocks / norm

    out = np.zeros_like(hist)
    count = np.zeros((cy, cx, 1))
    for k, (oy, ox) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        out[oy : oy + cy - 1, ox : ox + cx - 1] += blocks[:, :, k]
        count[oy : oy + cy - 1, ox : ox + cx - 1] += 1
    return FeatureMap(data=out / count, cell_size=cell_size)


def crop_feature(fm: FeatureMap, anchor_cell, tpl_w: int, tpl_h: int) -> np.ndarray:
    """Row-major ``tpl_h x tpl_w x channels`` window whose top-left cell is ``anchor_cell``."""
    cx, cy = anchor_cell
    if cx < 0 or cy < 0 or cx + tpl_w > fm.cells_x or cy + tpl_h > fm.cells_y:
        raise ShapeError(
            f"window {tpl_w}x{tpl_h} at ({cx}, {cy}) exceeds {fm.cells_x}x{fm.cells_y} cells"
        )
    return fm.data[cy : cy + tpl_h, cx : cx + tpl_w].reshape(-1).copy()


def window_stack(fm: FeatureMap, tpl_w: int, tpl_h: int) -> np.ndarray:
    """All in-bounds windows, shape (cells_y - tpl_h + 1, cells_x - tpl_w + 1, tpl_h*tpl_w*channels).

    Entry [y, x] equals ``crop_feature(fm, (x, y), tpl_w, tpl_h)``.
    """
    win = np.lib.stride_tricks.sliding_window_view(fm.data, (tpl_h, tpl_w), axis=(0, 1))
    # sliding_window_view puts the window axes last: (ny, nx, channels, tpl_h, tpl_w)
    win = np.moveaxis(win, 2, -1)
    return win.reshape(win.shape[0], win.shape[1], -1)
