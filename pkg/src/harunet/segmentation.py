"""Foreground tissue masks: 2-means clustering, dilation, hole filling.

Mask stages: ``M0`` (k-means foreground), ``M1`` (after 5x5 dilation),
``Mf`` (holes filled and smoothed). Foreground components are
8-connected, background 4-connected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import Slice

STAGES = ("M0", "M1", "Mf")
FOUR = ndimage.generate_binary_structure(2, 1)
EIGHT = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown mask stage {self.stage!r}")
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ValueError("mask must be 2D")
        object.__setattr__(self, "bits", b)

    @property
    def shape(self):
        return self.bits.shape


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 2
    max_iters: int = 100
    epsilon: float = 0.2

    def __post_init__(self):
        if self.k != 2:
            raise ValueError("only k=2 clustering is supported")
        if self.max_iters < 1 or not self.epsilon > 0:
            raise ValueError("max_iters must be >= 1 and epsilon > 0")


@dataclass(frozen=True)
class SegmentConfig:
    kmeans: KMeansConfig = KMeansConfig()
    dilate_size: int = 5
    close_start: int = 15
    close_step: int = 5
    max_fill_iters: int = 5


def _pixels(s) -> np.ndarray:
    return s.pixels if isinstance(s, Slice) else np.asarray(s)


def two_means_1d(values: np.ndarray, cfg: KMeansConfig = KMeansConfig()):
    """Lloyd iterations for 2 clusters on a 1D sample.

    Centers start at the 25th and 75th percentiles, or at the extremes when
    those coincide (one mode holding over 75% of the sample). Returns
    ``(centers, labels, converged)``; ``labels`` is None when a cluster
    empties or all values coincide.
    """
    x = np.asarray(values, dtype=np.float64)
    c = np.percentile(x, [25.0, 75.0])
    if c[0] == c[1]:
        c = np.array([x.min(), x.max()])
    labels = None
    for _ in range(cfg.max_iters):
        # ties go to the lower center
        labels = np.abs(x - c[1]) < np.abs(x - c[0])
        n1 = int(labels.sum())
        if n1 == 0 or n1 == x.size:
            return c, None, False
        new = np.array([x[~labels].mean(), x[labels].mean()])
        shift = np.abs(new - c)
        c = new
        if np.all(shift < cfg.epsilon):
            labels = np.abs(x - c[1]) < np.abs(x - c[0])
            return c, labels, True
    return c, labels, False


def kmeans_foreground(s, cfg: KMeansConfig = KMeansConfig()) -> BinaryMask:
    """Initial mask M0: the brighter of two clusters of the non-zero pixels."""
    px = _pixels(s)
    mask = np.zeros(px.shape, dtype=bool)
    nz = px != 0
    if not nz.any():
        return BinaryMask(mask, "M0")
    vals = px[nz].astype(np.float64) * 255.0
    centers, labels, _ = two_means_1d(vals, cfg)
    if labels is None:
        mask[nz] = True
        return BinaryMask(mask, "M0")
    if centers[0] > centers[1]:
        labels = ~labels
    mask[nz] = labels
    return BinaryMask(mask, "M0")


def dilate_mask(m: BinaryMask, size: int = 5) -> BinaryMask:
    """M0 -> M1 by binary dilation with a centered ``size`` x ``size`` square."""
    if m.stage != "M0":
        raise ValueError(f"dilate_mask expects an M0 mask, got {m.stage}")
    se = np.ones((size, size), dtype=bool)
    return BinaryMask(ndimage.binary_dilation(m.bits, structure=se), "M1")


def interior_holes(bits: np.ndarray) -> np.ndarray:
    """Background pixels with no 4-connected path to the image border."""
    bg = ~bits
    lab, n = ndimage.label(bg, structure=FOUR)
    if n == 0:
        return np.zeros_like(bits)
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    outside = np.isin(lab, border[border > 0])
    return bg & ~outside


def count_holes(bits: np.ndarray) -> int:
    lab, n = ndimage.label(interior_holes(bits), structure=FOUR)
    return n


def close_mask(bits: np.ndarray, size: int) -> np.ndarray:
    """Binary closing with a square kernel on a zero-padded canvas.

    Padding keeps the closing extensive at the image border.
    """
    pad = size
    canvas = np.pad(bits, pad)
    se = np.ones((size, size), dtype=bool)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(canvas, structure=se), structure=se)
    return closed[pad:-pad, pad:-pad] | bits


def fill_holes(m: BinaryMask, cfg: SegmentConfig = SegmentConfig()) -> BinaryMask:
    """M1 -> Mf: flood-fill enclosed background, then close with growing kernels.

    Kernel side starts at ``close_start`` and grows by ``close_step`` until an
    iteration finds no enclosed background or ``max_fill_iters`` is reached.
    A final fill guarantees that Mf has no interior holes.
    """
    if m.stage != "M1":
        raise ValueError(f"fill_holes expects an M1 mask, got {m.stage}")
    bits = m.bits.copy()
    for it in range(cfg.max_fill_iters):
        holes = interior_holes(bits)
        if not holes.any():
            break
        bits |= holes
        bits = close_mask(bits, cfg.close_start + cfg.close_step * it)
    bits |= interior_holes(bits)
    return BinaryMask(bits, "Mf")


def segment_stages(s, cfg: SegmentConfig = SegmentConfig()) -> tuple[BinaryMask, BinaryMask, BinaryMask]:
    m0 = kmeans_foreground(s, cfg.kmeans)
    m1 = dilate_mask(m0, cfg.dilate_size)
    return m0, m1, fill_holes(m1, cfg)


def segment_slice(s, cfg: SegmentConfig = SegmentConfig()) -> BinaryMask:
    """Final foreground mask Mf of a slice."""
    return segment_stages(s, cfg)[2]
