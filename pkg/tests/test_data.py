import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from smir.data import (
    AugmentSettings,
    DatasetManifest,
    SynthSpec,
    augment,
    color_jitter,
    foreground_patch_flags,
    generate_synthetic,
    generate_synthetic_arrays,
    load_dataset,
    read_image,
    sample_geometry,
    tile_count,
    tile_image,
    write_label,
)
from smir.patches import PatchGrid


def _png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(tmp_path, [("a.png", "la.png"), ("b.png", None)], split="train",
                        num_classes=3, tile_size=256, extra={"name": "x"})
    back = DatasetManifest.read(m.write(tmp_path / "m.txt"))
    assert back.entries == m.entries and back.split == "train"
    assert back.num_classes == 3 and back.tile_size == 256 and back.extra == {"name": "x"}
    assert not back.labeled


def test_manifest_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        DatasetManifest.read(tmp_path / "nope.txt")
    (tmp_path / "bad.txt").write_text("split\n---\n")
    with pytest.raises(ValueError):
        DatasetManifest.read(tmp_path / "bad.txt")


def test_pixel_scaling(tmp_path):
    _png(tmp_path / "w.png", np.full((4, 4, 3), 255))
    _png(tmp_path / "m.png", np.full((4, 4, 3), 51))
    assert np.all(read_image(tmp_path / "w.png") == 1.0)
    np.testing.assert_allclose(read_image(tmp_path / "m.png"), 0.2)


def test_load_sorted_with_labels(tmp_path):
    for name in ("b", "a"):
        _png(tmp_path / f"{name}.png", np.zeros((6, 8, 3)))
        write_label(tmp_path / f"{name}_l.png", np.ones((6, 8)))
    m = DatasetManifest(tmp_path, [("b.png", "b_l.png"), ("a.png", "a_l.png")], num_classes=2)
    ds = load_dataset(m)
    assert ds.ids == ["a", "b"] and len(ds) == 2
    assert ds.labels[0].dtype == np.int64 and np.all(ds.labels[0] == 1)
    assert ds.subset(["b"]).ids == ["b"]


def test_dimension_mismatch_names_both(tmp_path):
    _png(tmp_path / "img.png", np.zeros((6, 8, 3)))
    write_label(tmp_path / "lbl.png", np.zeros((6, 7)))
    m = DatasetManifest(tmp_path, [("img.png", "lbl.png")])
    with pytest.raises(ValueError) as err:
        load_dataset(m)
    assert "img.png" in str(err.value) and "lbl.png" in str(err.value)


def test_unreadable_image_is_named(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="broken.png"):
        load_dataset(DatasetManifest(tmp_path, [("broken.png", None)]))


def test_empty_manifest(tmp_path):
    ds = load_dataset(DatasetManifest(tmp_path, []))
    assert len(ds) == 0 and ds.labels is None


# -- tiling ---------------------------------------------------------------------

def test_tile_counts():
    big = np.arange(512 * 512).reshape(512, 512)
    tiles = tile_image(big, 256)
    assert len(tiles) == 4
    np.testing.assert_array_equal(tiles[1], big[:256, 256:])
    assert len(tile_image(np.zeros((300, 300)), 256)) == 1
    assert tile_count(29395, 90599, 256) == 114 * 353 == 40_242


@given(st.integers(1, 80), st.integers(1, 80), st.integers(1, 30))
def test_tiles_partition_covered_area(h, w, t):
    big = np.arange(h * w).reshape(h, w)
    tiles = tile_image(big, t)
    assert len(tiles) == tile_count(h, w, t)
    seen = np.concatenate([x.ravel() for x in tiles]) if tiles else np.array([], int)
    assert len(set(seen.tolist())) == len(seen) == tile_count(h, w, t) * t * t


# -- augmentation ---------------------------------------------------------------

def test_augment_keeps_label_aligned(rng):
    img = rng.random((32, 40, 3))
    label = np.arange(32 * 40).reshape(32, 40)
    s = AugmentSettings(hflip_prob=0.5, crop_size=16, brightness=(1, 1), contrast=(1, 1), saturation=(1, 1))
    for seed in range(20):
        out, lbl = augment(img, label, s, np.random.default_rng(seed))
        assert out.shape == (16, 16, 3) and lbl.shape == (16, 16)
        ys, xs = np.divmod(lbl, 40)
        np.testing.assert_array_equal(out, img[ys, xs])


@given(st.integers(0, 2**31 - 1))
def test_jitter_stays_in_range_and_spares_labels(seed):
    r = np.random.default_rng(seed)
    img = r.random((8, 8, 3))
    label = r.integers(0, 4, (8, 8))
    out, lbl = augment(img, label, AugmentSettings(hflip_prob=0.0), r)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(lbl, label)


def test_identity_jitter_copies():
    img = np.full((4, 4, 3), 0.3)
    out = color_jitter(img, (1.0, 1.0, 1.0))
    assert out is not img and np.array_equal(out, img)


def test_crop_alignment_and_too_large():
    s = AugmentSettings(crop_size=16, crop_align=(4, 8))
    for seed in range(30):
        g = sample_geometry((40, 48), s, np.random.default_rng(seed))
        assert g.top % 4 == 0 and g.left % 8 == 0 and g.top + 16 <= 40 and g.left + 16 <= 48
    with pytest.raises(ValueError):
        sample_geometry((8, 8), s, np.random.default_rng(0))


def test_flip_frequency():
    flips = [sample_geometry((4, 4), AugmentSettings(), np.random.default_rng(i)).flip for i in range(1000)]
    assert abs(np.mean(flips) - 0.5) < 0.06


# -- synthetic corpus ----------------------------------------------------------------

def test_synthetic_is_deterministic():
    a = generate_synthetic_arrays(SynthSpec(count=4, size=32, seed=3))
    b = generate_synthetic_arrays(SynthSpec(count=4, size=32, seed=3))
    c = generate_synthetic_arrays(SynthSpec(count=4, size=32, seed=4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_synthetic_texture_lives_on_foreground():
    images, labels = generate_synthetic_arrays(SynthSpec(count=20, size=64, seed=0))
    fg, bg = [], []
    for img, lbl in zip(images, labels):
        if (lbl > 0).sum() < 50:
            continue
        fg.append(img[lbl > 0].var(axis=0).mean())
        bg.append(img[lbl == 0].var(axis=0).mean())
    assert np.mean(fg) > 4 * np.mean(bg)


def test_synthetic_zero_shapes_is_all_background():
    _, labels = generate_synthetic_arrays(SynthSpec(count=3, size=32, shapes_per_image=(0, 0)))
    assert np.all(labels == 0)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(num_classes=5)
    with pytest.raises(ValueError):
        SynthSpec(shapes_per_image=(3, 1))


def test_synthetic_files_round_trip(tmp_path):
    spec = SynthSpec(count=3, size=32, num_classes=3, seed=2)
    m = generate_synthetic(spec, tmp_path, split="train")
    ds = load_dataset(DatasetManifest.read(tmp_path / "manifest.txt"))
    images, labels = generate_synthetic_arrays(spec)
    assert m.extra["class_names"] == "background,disk,rectangle"
    np.testing.assert_allclose(np.stack(ds.images), images, atol=1e-12)
    np.testing.assert_array_equal(np.stack(ds.labels), labels)


def test_foreground_patch_flags():
    label = np.zeros((8, 8), int)
    label[5, 1] = 2
    flags = foreground_patch_flags(label, PatchGrid(2, 2, 4, 4))
    assert flags.tolist() == [False, False, True, False]
