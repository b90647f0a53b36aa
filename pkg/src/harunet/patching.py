"""Bounding boxes of tissue components and fixed-size patch placement.

Boxes are ``(x, y, w, h)`` with ``x`` the column and ``y`` the row of the
top-left pixel. Patches are laid on a grid anchored at each box's
top-left corner; leftover strips get extra patches flush with the box's
far edge, flagged as overlapping.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .noise import RNG_NAME, NoiseParams, add_noise, noise_generator, randomized_params
from .segmentation import EIGHT, BinaryMask, SegmentConfig, segment_slice
from .volume_io import (PLANES, DatasetManifest, ManifestEntry, Volume, plane_shape,
                        slice_volume, validate_entries, write_png)

log = logging.getLogger(__name__)


class UnpatchableError(ValueError):
    """Slice is smaller than the patch size."""


class BoundingBox(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x + other.w <= self.x + self.w
                and other.y + other.h <= self.y + self.h)


@dataclass(frozen=True)
class PatchRecord:
    x: int
    y: int
    size: int
    source_id: str = ""
    overlap: bool = False

    @property
    def origin(self):
        return (self.x, self.y)


def extract_bounding_boxes(m) -> list[BoundingBox]:
    """Tight box around every 8-connected foreground component, in label order."""
    bits = m.bits if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)
    if isinstance(m, BinaryMask) and m.stage != "Mf":
        raise ValueError(f"expected an Mf mask, got {m.stage}")
    lab, n = ndimage.label(bits, structure=EIGHT)
    boxes = []
    for sl in ndimage.find_objects(lab):
        rows, cols = sl
        boxes.append(BoundingBox(cols.start, rows.start, cols.stop - cols.start, rows.stop - rows.start))
    return boxes


def remove_nested_boxes(boxes: Sequence[BoundingBox]) -> list[BoundingBox]:
    """Drop boxes contained (inclusively) in another retained box.

    Identical boxes keep the first occurrence. Partial overlaps are kept.
    """
    boxes = [BoundingBox(*b) for b in boxes]
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].w * boxes[i].h)
    kept: list[int] = []
    for i in order:
        if not any(boxes[j].contains(boxes[i]) for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def _anchors(start: int, length: int, patch: int, extent: int) -> list[tuple[int, bool]]:
    if length < patch:
        lo = start - (patch - length) // 2
        return [(min(max(lo, 0), extent - patch), False)]
    out = [(a, False) for a in range(start, start + length - patch + 1, patch)]
    end = start + length
    if out[-1][0] + patch < end:
        out.append((end - patch, True))
    return out


def tile_patches(b: BoundingBox, patch: int, slice_dims: Sequence[int],
                 source_id: str = "") -> list[PatchRecord]:
    """Cover box ``b`` with ``patch`` x ``patch`` windows inside a ``(rows, cols)`` slice."""
    rows, cols = slice_dims
    if rows < patch or cols < patch:
        raise UnpatchableError(f"slice {rows}x{cols} smaller than patch size {patch}")
    b = BoundingBox(*b)
    if b.w < 1 or b.h < 1 or b.x < 0 or b.y < 0 or b.x + b.w > cols or b.y + b.h > rows:
        raise ValueError(f"box {tuple(b)} outside {rows}x{cols} slice")
    xs = _anchors(b.x, b.w, patch, cols)
    ys = _anchors(b.y, b.h, patch, rows)
    return [PatchRecord(x, y, patch, source_id, fx or fy) for y, fy in ys for x, fx in xs]


def patches_for_mask(m: BinaryMask, patch: int, source_id: str = "") -> list[PatchRecord]:
    boxes = remove_nested_boxes(extract_bounding_boxes(m))
    out = []
    for b in boxes:
        out.extend(tile_patches(b, patch, m.shape, source_id))
    return out


# ---------------------------------------------------------------- dataset

def split_volumes(volume_ids: Sequence[str], fractions=(0.7, 0.15, 0.15), seed: int = 0) -> dict:
    """Seeded shuffle of volume ids into train/val/test by the given fractions.

    Every split gets at least one volume when there are at least three.
    """
    ids = list(volume_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-6 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative values summing to 1: {fractions}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    if n >= 3:
        n_val = max(n_val, 1 if fractions[1] > 0 else 0)
        n_test = max(n_test, 1 if fractions[2] > 0 else 0)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} volumes cannot fill the requested splits")
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return {ids[i]: names[k] for k, i in enumerate(order)}


def _slice_job(args):
    s, vol_idx, plane_idx, patch, noise, seg_cfg, per_slice_sigma = args
    mask = segment_slice(s, seg_cfg)
    records = patches_for_mask(mask, patch, s.source_id)
    if not records:
        return s, records, None
    stream = (vol_idx, plane_idx, s.index)
    params = noise
    if per_slice_sigma:
        params = randomized_params(noise, noise_generator(noise.seed, stream + (1,)))
    noisy = add_noise(s.pixels, params, stream)
    return s, records, noisy


def build_patch_dataset(volumes: Sequence[Volume], planes: Sequence[str], noise: NoiseParams,
                        split_seed: int, out_dir, patch: int = 256,
                        fractions=(0.7, 0.15, 0.15), seg_cfg: SegmentConfig = SegmentConfig(),
                        per_slice_sigma: bool = False, threads: int = 1) -> DatasetManifest:
    """Segment, tile and corrupt every slice; write patch PNGs under ``out_dir``.

    Returns the manifest (entry paths relative to ``out_dir``). Slices with
    an empty foreground mask contribute no patches and are counted in
    ``skipped_slices``.
    """
    for p in planes:
        if p not in PLANES:
            raise ValueError(f"unknown plane {p!r}")
    splits = split_volumes([v.id for v in volumes], fractions, split_seed)
    os.makedirs(os.path.join(out_dir, "patches"), exist_ok=True)

    jobs = []
    for vi, v in enumerate(volumes):
        for p in planes:
            rows, cols = plane_shape(v.dims, p)
            if rows < patch or cols < patch:
                raise UnpatchableError(f"{v.id}/{p}: slices {rows}x{cols} smaller than patch {patch}")
            for s in slice_volume(v, p):
                jobs.append((s, vi, PLANES.index(p), patch, noise, seg_cfg, per_slice_sigma))

    entries: list[ManifestEntry] = []
    skipped = 0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for s, records, noisy in pool.map(_slice_job, jobs):
            if not records:
                skipped += 1
                continue
            for k, r in enumerate(records):
                pid = f"{s.source_id}_{s.plane}_{s.index:04d}_{k:03d}"
                geo = dict(volume_id=s.source_id, plane=s.plane, index=s.index,
                           x=r.x, y=r.y, w=r.size, h=r.size, overlap=r.overlap)
                win = (slice(r.y, r.y + r.size), slice(r.x, r.x + r.size))
                for role, img in (("noisy", noisy), ("clean", s.pixels)):
                    rel = os.path.join("patches", f"{pid}_{role}.png")
                    write_png(os.path.join(out_dir, rel), img[win])
                    entries.append(ManifestEntry(rel, role, pid, splits[s.source_id], **geo))
    if skipped:
        log.warning("%d slices had no foreground and produced no patches", skipped)
    validate_entries(entries)
    header = dict(noise.header(), per_slice_sigma=bool(per_slice_sigma), patch=int(patch),
                  split_seed=int(split_seed))
    return DatasetManifest(entries, header, int(noise.seed), RNG_NAME, skipped)
