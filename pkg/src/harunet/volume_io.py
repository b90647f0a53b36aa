"""Volume and slice containers, file formats and dataset manifests.

Volumes are stored as a one-line ASCII header followed by little-endian
voxel data in depth-major order::

    HVOL v1 <depth> <height> <width> <dtype> <vmin> <vmax>\\n

Slices and patches are 16-bit grayscale PNG, masks are 1-bit PNG.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

PLANES = ("axial", "frontal", "sagittal")
ROLES = ("noisy", "clean")
SPLITS = ("train", "val", "test")

_DTYPES = {
    "uint8": np.dtype("<u1"),
    "uint16": np.dtype("<u2"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}
_HEADER_MAX = 256


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


class ManifestError(ValueError):
    """Manifest entries violate pairing or split rules."""


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    voxel_size_mm: float = 1.0
    id: str = "volume"

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("volume values must lie in [0, 1]")
        if self.voxel_size_mm <= 0:
            raise ValueError("voxel_size_mm must be positive")
        v = v.view()
        v.flags.writeable = False
        object.__setattr__(self, "voxels", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class Slice:
    pixels: np.ndarray
    plane: str
    index: int
    source_id: str

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")
        p = np.asarray(self.pixels)
        if p.ndim != 2:
            raise ValueError("slice pixels must be 2D")
        object.__setattr__(self, "pixels", p)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.pixels.shape)


# ---------------------------------------------------------------- volumes

def _parse_header(line: bytes):
    try:
        text = line.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("volume header is not ASCII") from exc
    parts = text.split()
    if len(parts) != 8 or parts[0] != "HVOL" or parts[1] != "v1":
        raise FormatError(f"malformed volume header: {text.strip()!r}")
    try:
        dims = tuple(int(p) for p in parts[2:5])
        vmin, vmax = float(parts[6]), float(parts[7])
    except ValueError as exc:
        raise FormatError(f"malformed volume header: {text.strip()!r}") from exc
    dtype = parts[5]
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    if min(dims) < 1:
        raise FormatError(f"non-positive dims {dims}")
    if not (np.isfinite(vmin) and np.isfinite(vmax)) or vmax <= vmin:
        raise FormatError(f"invalid value range [{vmin}, {vmax}]")
    return dims, dtype, vmin, vmax


def load_volume(path, format: str = "hvol", volume_id: Optional[str] = None) -> Volume:
    """Read an HVOL file and normalize it to [0, 1].

    Normalization uses the range declared in the header, not the data range.
    """
    if format != "hvol":
        raise ValueError(f"unsupported volume format {format!r}")
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline(_HEADER_MAX)
        if not header.endswith(b"\n"):
            raise FormatError("volume header missing or too long")
        dims, dtype, vmin, vmax = _parse_header(header)
        payload = fh.read()
    dt = _DTYPES[dtype]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"dimension mismatch: header {dims} {dtype} needs {expected} bytes, file has {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=dt).reshape(dims)
    if not np.all(np.isfinite(raw)):
        raise FormatError("volume contains non-finite values")
    if vmin == 0.0 and vmax == 1.0 and dt.kind == "f":
        vox = raw.astype(np.float32)
    else:
        vox = ((raw.astype(np.float64) - vmin) / (vmax - vmin)).astype(np.float32)
    if vox.min() < 0.0 or vox.max() > 1.0:
        raise FormatError("voxel values fall outside the declared range")
    return Volume(vox, id=volume_id or path.stem)


def store_volume(v: Volume, path, dtype: str = "float32") -> None:
    """Write ``v`` as HVOL. Integer dtypes quantize over their full range."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dt = _DTYPES[dtype]
    if dt.kind == "f":
        vmin, vmax = 0.0, 1.0
        data = v.voxels.astype(dt)
    else:
        vmin, vmax = 0.0, float(np.iinfo(dt).max)
        data = np.rint(v.voxels.astype(np.float64) * vmax).astype(dt)
    d, h, w = v.dims
    header = f"HVOL v1 {d} {h} {w} {dtype} {vmin:g} {vmax:g}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data).tobytes())


# ---------------------------------------------------------------- slices

_PLANE_AXIS = {"axial": 0, "frontal": 1, "sagittal": 2}


def plane_shape(dims: Sequence[int], plane: str) -> tuple[int, int]:
    """(rows, cols) of a slice of a volume with ``dims`` along ``plane``."""
    axis = _PLANE_AXIS[plane]
    rest = [d for i, d in enumerate(dims) if i != axis]
    return rest[0], rest[1]


def slice_volume(v: Volume, plane: str, crop: Optional[Sequence[int]] = None) -> list[Slice]:
    """Cut ``v`` into 2D slices normal to ``plane``.

    axial slices index depth (pixels are height x width), frontal slices
    index height (depth x width), sagittal slices index width
    (depth x height). ``crop`` is ``(x, y, w, h)`` in slice coordinates and
    is applied to every slice.
    """
    if plane not in _PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}")
    rows, cols = plane_shape(v.dims, plane)
    if crop is not None:
        x, y, w, h = (int(c) for c in crop)
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > cols or y + h > rows:
            raise ValueError(f"crop {tuple(crop)} out of bounds for {rows}x{cols} slices")
    axis = _PLANE_AXIS[plane]
    out = []
    for k in range(v.dims[axis]):
        px = np.take(v.voxels, k, axis=axis)
        if crop is not None:
            px = px[y:y + h, x:x + w]
        out.append(Slice(px, plane, k, v.id))
    return out


def write_png(path, image: np.ndarray) -> None:
    """Save a [0, 1] image as 16-bit grayscale PNG (values are clipped)."""
    q = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Load a grayscale PNG as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image")
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32)
    if arr.dtype == bool:
        return arr.astype(np.float32)
    return (arr.astype(np.float64) / 65535.0).astype(np.float32)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("1"), dtype=bool)


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    role: str
    pair_id: str
    split: str
    volume_id: str
    plane: str
    index: int
    x: int
    y: int
    w: int
    h: int
    overlap: bool = False

    FIELDS = ("path", "role", "pair_id", "split", "volume_id", "plane",
              "index", "x", "y", "w", "h", "overlap")

    def to_line(self) -> str:
        vals = [self.path, self.role, self.pair_id, self.split, self.volume_id, self.plane,
                str(self.index), str(self.x), str(self.y), str(self.w), str(self.h),
                "1" if self.overlap else "0"]
        for v in vals:
            if "\t" in v or "\n" in v:
                raise ManifestError(f"field {v!r} contains a tab or newline")
        return "\t".join(vals)

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(cls.FIELDS):
            raise FormatError(f"manifest record has {len(parts)} fields, expected {len(cls.FIELDS)}")
        p = parts
        try:
            return cls(p[0], p[1], p[2], p[3], p[4], p[5], int(p[6]), int(p[7]), int(p[8]),
                       int(p[9]), int(p[10]), p[11] == "1")
        except ValueError as exc:
            raise FormatError(f"bad manifest record: {line.strip()!r}") from exc

    @property
    def geometry(self):
        return (self.volume_id, self.plane, self.index, self.x, self.y, self.w, self.h)


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    noise: dict = field(default_factory=dict)
    seed: int = 0
    rng: str = "numpy.Philox4x64"
    skipped_slices: int = 0

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (list(self.entries) == list(other.entries) and self.noise == other.noise
                and self.seed == other.seed and self.rng == other.rng)

    def pairs(self, split: Optional[str] = None) -> list[tuple[ManifestEntry, ManifestEntry]]:
        """(noisy, clean) entries, ordered by first appearance of the pair id."""
        noisy, clean, order = {}, {}, []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if e.pair_id not in noisy and e.pair_id not in clean:
                order.append(e.pair_id)
            (noisy if e.role == "noisy" else clean)[e.pair_id] = e
        return [(noisy[k], clean[k]) for k in order]


def validate_entries(entries: Iterable[ManifestEntry]) -> None:
    """Raise ManifestError unless every noisy entry has one matching clean partner."""
    by_pair: dict[str, dict[str, ManifestEntry]] = {}
    split_of: dict[str, str] = {}
    for e in entries:
        if e.role not in ROLES:
            raise ManifestError(f"unknown role {e.role!r}")
        if e.split not in SPLITS:
            raise ManifestError(f"unknown split {e.split!r}")
        if e.plane not in PLANES:
            raise ManifestError(f"unknown plane {e.plane!r}")
        slot = by_pair.setdefault(e.pair_id, {})
        if e.role in slot:
            raise ManifestError(f"duplicate pair id {e.pair_id!r} for role {e.role}")
        slot[e.role] = e
        prev = split_of.setdefault(e.volume_id, e.split)
        if prev != e.split:
            raise ManifestError(f"split leakage: volume {e.volume_id!r} in {prev} and {e.split}")
    for pid, slot in by_pair.items():
        if set(slot) != set(ROLES):
            missing = (set(ROLES) - set(slot)).pop()
            raise ManifestError(f"pair {pid!r} lacks a {missing} entry")
        if slot["noisy"].geometry != slot["clean"].geometry or slot["noisy"].split != slot["clean"].split:
            raise ManifestError(f"pair {pid!r} has mismatched geometry")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def write_manifest(manifest: DatasetManifest, path) -> None:
    validate_entries(manifest.entries)
    head = ["#HMANIFEST", "v1"]
    head += [f"{k}={_fmt(v)}" for k, v in sorted(manifest.noise.items())]
    head += [f"rng={manifest.rng}", f"seed={manifest.seed}"]
    lines = ["\t".join(head)] + [e.to_line() for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_manifest(path) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#HMANIFEST\tv1"):
        raise FormatError(f"{path}: missing manifest header")
    noise, rng, seed = {}, None, None
    for item in lines[0].split("\t")[2:]:
        key, sep, val = item.partition("=")
        if not sep:
            raise FormatError(f"malformed header field {item!r}")
        if key == "rng":
            rng = val
        elif key == "seed":
            seed = int(val)
        else:
            noise[key] = _parse_value(val)
    if rng is None or seed is None:
        raise FormatError("manifest header lacks rng or seed")
    entries = [ManifestEntry.from_line(ln) for ln in lines[1:] if ln.strip()]
    validate_entries(entries)
    return DatasetManifest(entries, noise, seed, rng)


def resolve(manifest_path, entry: ManifestEntry) -> str:
    """Absolute path of an entry's patch file (entries are stored relative)."""
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), entry.path)
