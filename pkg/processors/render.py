# processors/render.py
from __future__ import annotations

import logging
from functools import lru_cache

import cv2
import numpy as np

logger = logging.getLogger(__name__)

# HOG layout: 8 orientations, 8x8-pixel cells, 2x2-cell blocks, one-cell stride
HOG_CELL = 8
HOG_BLOCK = 16
HOG_BINS = 8


def hog_length(size: int) -> int:
    cells = size // HOG_CELL
    return (cells - 1) ** 2 * 4 * HOG_BINS


@lru_cache(maxsize=4)
def _hog(size: int) -> cv2.HOGDescriptor:
    # L2-Hys with a threshold of 1 never clips, so blocks are plain L2-normalized
    return cv2.HOGDescriptor(
        (size, size),
        (HOG_BLOCK, HOG_BLOCK),
        (HOG_CELL, HOG_CELL),
        (HOG_CELL, HOG_CELL),
        HOG_BINS,
        1,       # derivAperture
        -1.0,    # winSigma (default Gaussian block window)
        0,       # L2Hys
        1.0,     # L2HysThreshold
        False,   # gammaCorrection
        64,      # nlevels
    )


def rasterize_depth(triangles: np.ndarray, frame: np.ndarray, view: int, size: int = 64) -> np.ndarray:
    """
    Orthographic depth image of triangles already centered with diameter 1.

    The camera looks along ``frame[view]``; image axes are the other two frame rows.
    Pixels hold 1 - (depth + 0.5) / 2 for the nearest surface (so in [0.5, 1]),
    background is 0.
    """
    image = np.zeros((size, size), dtype=np.float64)
    if len(triangles) == 0:
        return image
    u_ax, v_ax = [frame[k] for k in range(3) if k != view]
    local = np.stack([triangles @ u_ax, triangles @ v_ax, triangles @ frame[view]], axis=-1)
    # pixel (row, col) center at ((row + 0.5) / size - 0.5) on v and u
    px = (local[..., 0] + 0.5) * size - 0.5
    py = (local[..., 1] + 0.5) * size - 0.5
    depth = local[..., 2]

    for t in range(len(triangles)):
        x0, x1, x2 = px[t]
        y0, y1, y2 = py[t]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        c_lo = max(int(np.ceil(min(x0, x1, x2))), 0)
        c_hi = min(int(np.floor(max(x0, x1, x2))), size - 1)
        r_lo = max(int(np.ceil(min(y0, y1, y2))), 0)
        r_hi = min(int(np.floor(max(y0, y1, y2))), size - 1)
        if c_lo > c_hi or r_lo > r_hi:
            continue
        cols, rows = np.meshgrid(np.arange(c_lo, c_hi + 1), np.arange(r_lo, r_hi + 1))
        w0 = ((x1 - cols) * (y2 - rows) - (x2 - cols) * (y1 - rows)) / area
        w1 = ((x2 - cols) * (y0 - rows) - (x0 - cols) * (y2 - rows)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        d = w0 * depth[t, 0] + w1 * depth[t, 1] + w2 * depth[t, 2]
        value = np.where(inside, 1.0 - 0.5 * (np.clip(d, -0.5, 0.5) + 0.5), 0.0)
        block = image[r_lo:r_hi + 1, c_lo:c_hi + 1]
        np.maximum(block, value, out=block)
    return image


def hog_descriptor(image: np.ndarray) -> np.ndarray:
    size = image.shape[0]
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not pixels.any():
        return np.zeros(hog_length(size), dtype=np.float64)
    return np.asarray(_hog(size).compute(pixels), dtype=np.float64).reshape(-1)


def lightfield_hog(triangles: np.ndarray, frame: np.ndarray | None = None, size: int = 64) -> np.ndarray:
    """Three depth views along the frame rows (global axes when ``frame`` is None), HOG per view."""
    if frame is None:
        frame = np.eye(3)
    views = [hog_descriptor(rasterize_depth(triangles, frame, k, size)) for k in range(3)]
    return np.concatenate(views)
