"""Grayscale heatmap emission for interaction maps and factor vectors.

Images are binary PGM (P5): trivially bit-exact across platforms and
dependency-free to read. Values are min-max normalized with darker cells
meaning higher values; a companion CSV grid with the raw numbers is always
written next to the image for downstream plotting.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

__all__ = ["render_heatmap", "read_pgm"]

logger = logging.getLogger(__name__)


def _to_grid(values: np.ndarray) -> np.ndarray:
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid.reshape(1, -1)
    if grid.ndim != 2:
        raise ValueError("heatmap input must be a vector or a 2-D matrix")
    if not np.isfinite(grid).all():
        raise ValueError("heatmap input contains non-finite values")
    return grid


def render_heatmap(values: np.ndarray, path: str | Path) -> Path:
    """Write a P5 PGM (darker = higher) plus a CSV grid; returns the PGM path.

    A constant input renders as mid-gray and logs a warning, since min-max
    normalization is undefined there.
    """
    grid = _to_grid(values)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        logger.warning("constant heatmap input; rendering mid-gray")
        pixels = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        normalized = (grid - lo) / (hi - lo)
        pixels = np.rint(255.0 * (1.0 - normalized)).astype(np.uint8)

    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))

    with open(path.with_suffix(".csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Read back a binary P5 PGM written by :func:`render_heatmap`."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    parts = raw.split(b"\n", 3)
    width, height = (int(tok) for tok in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    pixels = np.frombuffer(parts[3][:width * height], dtype=np.uint8)
    return pixels.reshape(height, width).copy()
