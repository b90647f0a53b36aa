import numpy as np
import pytest

from harunet.volume_io import (DatasetManifest, FormatError, ManifestEntry, ManifestError, Volume,
                               load_volume, read_manifest, read_png, slice_volume, store_volume,
                               write_manifest, write_png)


def _write_raw(path, dims, dtype, vmin, vmax, data):
    with open(path, "wb") as fh:
        fh.write(f"HVOL v1 {dims[0]} {dims[1]} {dims[2]} {dtype} {vmin} {vmax}\n".encode())
        fh.write(data)


def test_uint16_rescaled_to_unit_range(tmp_path):
    p = tmp_path / "a.hvol"
    _write_raw(p, (4, 4, 4), "uint16", 0, 65535, np.full(64, 32768, "<u2").tobytes())
    v = load_volume(p)
    assert v.dims == (4, 4, 4)
    np.testing.assert_allclose(v.voxels, 32768 / 65535, rtol=1e-6)


def test_short_file_is_dimension_mismatch(tmp_path):
    p = tmp_path / "a.hvol"
    _write_raw(p, (4, 4, 4), "uint16", 0, 65535, np.zeros(63, "<u2").tobytes())
    with pytest.raises(FormatError, match="dimension mismatch"):
        load_volume(p)


@pytest.mark.parametrize("header", [b"HVOL v2 1 1 1 uint8 0 255\n", b"garbage\n", b"HVOL v1 1 1 uint8 0 255\n",
                                    b"HVOL v1 1 1 1 int7 0 1\n", b"HVOL v1 1 1 1 uint8 5 5\n"])
def test_malformed_header(tmp_path, header):
    p = tmp_path / "a.hvol"
    p.write_bytes(header + b"\x00")
    with pytest.raises(FormatError):
        load_volume(p)


def test_non_finite_rejected(tmp_path):
    p = tmp_path / "a.hvol"
    _write_raw(p, (1, 1, 2), "float32", 0, 1, np.array([0.5, np.nan], "<f4").tobytes())
    with pytest.raises(FormatError):
        load_volume(p)


def test_float_round_trip_bitwise(tmp_path, rng):
    v = Volume(rng.random((3, 5, 7)).astype(np.float32), id="r")
    store_volume(v, tmp_path / "r.hvol")
    back = load_volume(tmp_path / "r.hvol")
    assert back.voxels.tobytes() == v.voxels.tobytes()


def test_normalization_preserves_order(tmp_path, rng):
    raw = rng.integers(100, 4000, size=200).astype("<u2")
    p = tmp_path / "a.hvol"
    _write_raw(p, (2, 10, 10), "uint16", 0, 4095, raw.tobytes())
    v = load_volume(p).voxels.ravel()
    assert np.array_equal(np.argsort(raw, kind="stable"), np.argsort(v, kind="stable"))


def test_slice_shapes_and_crop(rng):
    v = Volume(rng.random((10, 256, 256)).astype(np.float32))
    s = slice_volume(v, "axial")
    assert len(s) == 10 and s[0].shape == (256, 256)
    c = slice_volume(v, "axial", crop=(0, 0, 128, 128))
    assert all(x.shape == (128, 128) for x in c)
    with pytest.raises(ValueError):
        slice_volume(v, "axial", crop=(200, 0, 128, 128))


def test_axial_index_identity_and_partition(rng):
    vox = rng.random((6, 7, 8)).astype(np.float32)
    v = Volume(vox)
    ax = slice_volume(v, "axial")
    for k in range(6):
        for i in range(7):
            for j in range(8):
                assert ax[k].pixels[i, j] == vox[k, i, j]
    for plane, n in (("axial", 6), ("frontal", 7), ("sagittal", 8)):
        sl = slice_volume(v, plane)
        assert len(sl) == n
        assert sum(s.pixels.size for s in sl) == vox.size
        assert np.isclose(sum(float(s.pixels.sum(dtype=np.float64)) for s in sl), vox.sum(dtype=np.float64))


def test_png_round_trip(tmp_path, rng):
    img = rng.random((20, 30))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == (20, 30)
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-7


def _entry(pid, role, split="train", vol="v0", x=0):
    return ManifestEntry(f"{pid}_{role}.png", role, pid, split, vol, "axial", 0, x, 0, 64, 64, False)


def test_empty_manifest_round_trip(tmp_path):
    m = DatasetManifest([], {"sigma_q": 0.04}, 3)
    write_manifest(m, tmp_path / "m.tsv")
    assert read_manifest(tmp_path / "m.tsv") == m


def test_random_manifest_round_trip(tmp_path, rng):
    entries = []
    for k in range(50):
        vol = f"vol{rng.integers(0, 6)}"
        split = ("train", "val", "test")[int(vol[-1]) % 3]
        geo = dict(volume_id=vol, plane=str(rng.choice(["axial", "frontal", "sagittal"])),
                   index=int(rng.integers(0, 100)), x=int(rng.integers(0, 500)), y=int(rng.integers(0, 500)),
                   w=64, h=64, overlap=bool(rng.integers(0, 2)))
        for role in ("noisy", "clean"):
            entries.append(ManifestEntry(f"p/{k}_{role}.png", role, f"pair{k}", split, **geo))
    m = DatasetManifest(entries, {"sigma_q": 0.04, "sigma_e": 0.02, "clip": True}, 99)
    write_manifest(m, tmp_path / "m.tsv")
    assert read_manifest(tmp_path / "m.tsv") == m


def test_unpartnered_noisy_rejected_on_read(tmp_path):
    text = "#HMANIFEST\tv1\trng=x\tseed=1\n" + _entry("a", "noisy").to_line() + "\n"
    (tmp_path / "m.tsv").write_text(text)
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.tsv")


def test_duplicate_and_leakage_rejected(tmp_path):
    dup = [_entry("a", "noisy"), _entry("a", "clean"), _entry("a", "noisy")]
    with pytest.raises(ManifestError, match="duplicate"):
        write_manifest(DatasetManifest(dup), tmp_path / "m.tsv")
    leak = [_entry("a", "noisy"), _entry("a", "clean"), _entry("b", "noisy", "val"), _entry("b", "clean", "val")]
    with pytest.raises(ManifestError, match="leakage"):
        write_manifest(DatasetManifest(leak), tmp_path / "m.tsv")
    geo = [_entry("a", "noisy"), _entry("a", "clean", x=5)]
    with pytest.raises(ManifestError, match="geometry"):
        write_manifest(DatasetManifest(geo), tmp_path / "m.tsv")
