"""Synthetic CBCT-like phantom volumes.

Soft-edged bright ellipsoids with faint band-limited texture and darker
internal cavities on an exactly-zero background.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume_io import Volume

EDGE = 0.12  # outer fraction of the normalized radius used for the soft edge


def _radius(grid, center, axes, rot):
    d = [g - c for g, c in zip(grid, center)]
    # rotate in the in-plane (height, width) axes only
    y = d[1] * np.cos(rot) - d[2] * np.sin(rot)
    x = d[1] * np.sin(rot) + d[2] * np.cos(rot)
    return np.sqrt((d[0] / axes[0]) ** 2 + (y / axes[1]) ** 2 + (x / axes[2]) ** 2)


def generate_phantom_volume(seed: int, dims: Sequence[int] = (8, 256, 256),
                            min_inplane: int = 16, texture_amp: float = 0.05) -> Volume:
    """Deterministic phantom of 3-8 ellipsoids with 1-3 cavities each."""
    d, h, w = (int(x) for x in dims)
    if d < 1 or min(h, w) < min_inplane:
        raise ValueError(f"phantom dims {tuple(dims)} too small (in-plane must be >= {min_inplane})")
    rng = np.random.default_rng(seed)
    grid = np.meshgrid(np.arange(d) + 0.5, np.arange(h) + 0.5, np.arange(w) + 0.5,
                       indexing="ij", sparse=True)
    size = np.array([d, h, w], dtype=np.float64)
    vol = np.zeros((d, h, w))
    tissue = np.zeros((d, h, w), dtype=bool)
    for _ in range(rng.integers(3, 9)):
        center = size * rng.uniform(0.3, 0.7, size=3)
        axes = size * rng.uniform(0.12, 0.28, size=3)
        axes[0] = max(axes[0], d * 0.35, 1.0)
        rot = rng.uniform(0, np.pi)
        level = rng.uniform(0.55, 0.9)
        r = _radius(grid, center, axes, rot)
        inside = r < 1.0
        profile = np.clip((1.0 - r) / EDGE, 0.0, 1.0)
        body = level * (0.25 + 0.75 * profile)
        for _ in range(rng.integers(1, 4)):
            off = rng.uniform(-0.4, 0.4, size=3) * axes
            off[0] *= 0.3
            c_axes = axes * rng.uniform(0.15, 0.3, size=3)
            c_axes[0] = max(c_axes[0], axes[0] * 0.5)
            rc = _radius(grid, center + off, c_axes, rng.uniform(0, np.pi))
            cav_level = rng.uniform(0.08, 0.2)
            blend = np.clip((1.0 - rc) / 0.3, 0.0, 1.0)
            body = body * (1 - blend) + cav_level * blend
        vol = np.where(inside, np.maximum(vol, body), vol)
        tissue |= inside
    tex = ndimage.gaussian_filter(rng.standard_normal((d, h, w)), sigma=(0.8, 2.0, 2.0))
    peak = np.abs(tex).max()
    if peak > 0:
        tex *= texture_amp / peak
    vol = np.where(tissue, np.clip(vol + tex, 0.02, 1.0), 0.0)
    return Volume(vol.astype(np.float32), id=f"phantom{seed}")
