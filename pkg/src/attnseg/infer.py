"""Non-overlapping tiled inference, stitching, and logit heatmap overlays."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabelMap
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class TileGrid:
    window: int
    padded_size: tuple[int, int]
    tiles: tuple[tuple[int, int, int, int], ...]  # (row, col, y0, x0)
    original_size: tuple[int, int]


def make_grid(height: int, width: int, window: int) -> TileGrid:
    if window <= 0:
        raise ContractError(f"window must be positive, got {window}")
    rows, cols = -(-height // window), -(-width // window)
    tiles = tuple((r, c, r * window, c * window) for r in range(rows) for c in range(cols))
    return TileGrid(window, (rows * window, cols * window), tiles, (height, width))


def tile_image(image, window: int) -> tuple[TileGrid, list[np.ndarray]]:
    """Reflect-pad a C×H×W (or H×W) array to multiples of ``window`` and cut
    it into disjoint window×window tiles in row-major order."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    h, w = arr.shape[-2:]
    grid = make_grid(h, w, window)
    hp, wp = grid.padded_size
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, hp - h), (0, wp - w)]
    padded = np.pad(arr, pad, mode="reflect") if (hp, wp) != (h, w) else arr
    tiles = [padded[..., y0 : y0 + window, x0 : x0 + window] for _, _, y0, x0 in grid.tiles]
    return grid, tiles


def stitch(grid: TileGrid, outputs: Sequence) -> np.ndarray:
    """Place per-tile outputs (label maps or C×w×w arrays) and crop to the
    original size."""
    if len(outputs) != len(grid.tiles):
        raise ContractError(f"{len(outputs)} tile outputs for a grid of {len(grid.tiles)} tiles")
    arrays = [o.labels if isinstance(o, LabelMap) else o.data if isinstance(o, Tensor) else np.asarray(o) for o in outputs]
    lead = arrays[0].shape[:-2]
    for a in arrays:
        if a.shape != lead + (grid.window, grid.window):
            raise ContractError(f"tile output shape {a.shape} does not match window {grid.window} and {lead}")
    hp, wp = grid.padded_size
    canvas = np.empty(lead + (hp, wp), dtype=arrays[0].dtype)
    for (_, _, y0, x0), a in zip(grid.tiles, arrays):
        canvas[..., y0 : y0 + grid.window, x0 : x0 + grid.window] = a
    h, w = grid.original_size
    return canvas[..., :h, :w]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SCATT_THREADS", "1")))
    except ValueError:
        return 1


def infer_image(model, image, window: int = 256, workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predict a whole raster tile by tile.

    Returns (H×W uint8 labels, K×H×W logits). Tiles run in parallel on up to
    ``workers`` threads (default: ``SCATT_THREADS``, else 1).
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if window % model.config.downsample_factor:
        raise ContractError(f"window {window} is not divisible by downsample factor {model.config.downsample_factor}")
    grid, tiles = tile_image(arr, window)

    def run(tile):
        return model.forward(tile[None], "eval").data[0]

    workers = workers or worker_count()
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logits = list(pool.map(run, tiles))
    else:
        logits = [run(t) for t in tiles]
    full = stitch(grid, logits)
    return full.argmax(axis=0).astype(np.uint8), full


# heatmaps --------------------------------------------------------------------

_RAMP = np.array(
    [
        [0, 0, 128],
        [0, 0, 255],
        [0, 255, 255],
        [255, 255, 0],
        [255, 0, 0],
    ],
    dtype=np.float64,
)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through a navy-blue-cyan-yellow-red ramp to RGB floats."""
    v = np.clip(values, 0.0, 1.0) * (len(_RAMP) - 1)
    lo = np.minimum(np.floor(v).astype(int), len(_RAMP) - 2)
    frac = (v - lo)[..., None]
    return _RAMP[lo] * (1 - frac) + _RAMP[lo + 1] * frac


def render_base(image) -> np.ndarray:
    """Grayscale rendering (H×W×3 uint8) of a C×H×W image in [0, 1]."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    gray = np.clip(arr.mean(axis=0), 0.0, 1.0) * 255.0
    return np.repeat(np.round(gray).astype(np.uint8)[..., None], 3, axis=2)


def heatmap_overlay(logits, image, class_index: int, alpha: float = 0.5) -> np.ndarray:
    """Blend one class's pre-softmax logit plane over the image.

    The plane is min-max normalized; a constant plane normalizes to all zeros
    and therefore renders uniformly cold. Returns H×W×3 uint8.
    """
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if not 0 <= class_index < z.shape[0]:
        raise ContractError(f"class_index {class_index} outside [0, {z.shape[0]})")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if z.shape[1:] != arr.shape[1:]:
        raise ContractError(f"logits {z.shape} and image {arr.shape} differ in size")
    plane = z[class_index].astype(np.float64)
    lo, hi = plane.min(), plane.max()
    heat = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    base = render_base(arr).astype(np.float64)
    out = (1.0 - alpha) * base + alpha * colormap(heat)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)
