"""Full-volume denoising by overlapping tiles with cosine-feathered blending."""

from __future__ import annotations

import logging
import time
from typing import Optional

import numpy as np
import torch

from .volume_io import Volume

log = logging.getLogger(__name__)


def tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    """Tile origins covering ``[0, n)``; the last tile sits flush with the end."""
    if n <= tile:
        return [0]
    step = tile - overlap
    if step < 1:
        raise ValueError("overlap must be smaller than the tile size")
    starts = list(range(0, n - tile + 1, step))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def feather_1d(tile: int, overlap: int, ramp_in: bool, ramp_out: bool) -> np.ndarray:
    """Raised-cosine ramps (strictly positive) on the sides that border another tile."""
    w = np.ones(tile)
    if overlap > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * (np.arange(overlap) + 0.5) / overlap)
        if ramp_in:
            w[:overlap] = r
        if ramp_out:
            w[-overlap:] = r[::-1]
    return w


def blend_weights(shape, tile: int, overlap: int):
    """Per-tile weight maps and their normalizer over an image of ``shape``.

    Returns ``(tiles, norm)``; ``tiles`` is a list of ``(y, x, weight)``.
    Dividing each weight by ``norm`` gives a partition of unity.
    """
    h, w = shape
    ys, xs = tile_starts(h, tile, overlap), tile_starts(w, tile, overlap)
    tiles = []
    norm = np.zeros((h, w))
    for i, y in enumerate(ys):
        wy = feather_1d(tile, overlap, i > 0, i < len(ys) - 1)
        for j, x in enumerate(xs):
            wx = feather_1d(tile, overlap, j > 0, j < len(xs) - 1)
            wt = np.outer(wy, wx)
            tiles.append((y, x, wt))
            norm[y:y + tile, x:x + tile] += wt
    return tiles, norm


def denoise_slice(net, img: np.ndarray, tile: int = 256, overlap: int = 32, batch: int = 8) -> np.ndarray:
    h, w = img.shape
    ph, pw = max(0, tile - h), max(0, tile - w)
    padded = img
    if ph or pw:
        padded = np.pad(img, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="symmetric")
    tiles, norm = blend_weights(padded.shape, tile, overlap)
    acc = np.zeros(padded.shape)
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for k in range(0, len(tiles), batch):
            chunk = tiles[k:k + batch]
            x = np.stack([padded[y:y + tile, xx:xx + tile] for y, xx, _ in chunk])
            out = net(torch.as_tensor(x, dtype=dtype)[:, None])[:, 0].double().numpy()
            for (y, xx, wt), o in zip(chunk, out):
                acc[y:y + tile, xx:xx + tile] += wt * o
    res = acc / norm
    return res[ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]


def denoise_volume(net, v: Volume, tile: int = 256, overlap: int = 32, batch: int = 8,
                   stats: Optional[dict] = None) -> Volume:
    """Denoise every axial slice of ``v``; output clipped to [0, 1].

    Wall time in seconds is stored in ``stats['seconds']`` when given.
    """
    m = net.config.size_multiple
    if tile % m:
        raise ValueError(f"tile {tile} must be a multiple of {m}")
    if not 0 <= overlap < tile:
        raise ValueError("overlap must be in [0, tile)")
    t0 = time.perf_counter()
    net.eval()
    out = np.empty(v.dims, dtype=np.float32)
    for k in range(v.dims[0]):
        out[k] = np.clip(denoise_slice(net, v.voxels[k].astype(np.float64), tile, overlap, batch), 0.0, 1.0)
    elapsed = time.perf_counter() - t0
    if stats is not None:
        stats["seconds"] = elapsed
    log.info("denoised %s (%d slices) in %.2f s", v.id, v.dims[0], elapsed)
    return Volume(out, v.voxel_size_mm, v.id + "_denoised")
