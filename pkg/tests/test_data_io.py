import numpy as np
import pytest
from PIL import Image

from cbmt.data_io import (DatasetManifest, DomainShift, ManifestEntry, SynthSpec, decode_mask, encode_mask, fit_roi,
                          generate_synthetic, load_dataset, synthesize)


def test_mask_decode_example():
    raster = np.array([[0, 0, 128, 128],
                       [0, 128, 255, 128],
                       [0, 128, 255, 128],
                       [0, 0, 128, 0]], np.uint8)
    m = decode_mask(raster)
    assert m[..., 0].sum() == 9
    assert m[..., 1].sum() == 2
    assert (m[..., 1] <= m[..., 0]).all()
    np.testing.assert_array_equal(encode_mask(m), raster)


def test_fit_roi_noop_and_crop(rng):
    img = rng.uniform(size=(20, 30, 3))
    np.testing.assert_array_equal(fit_roi(img, (20, 30), 1), img)
    np.testing.assert_array_equal(fit_roi(img, (10, 10), 1), img[5:15, 10:20])
    assert fit_roi(img, (40, 60), 1).shape == (40, 60, 3)


def test_synthetic_is_deterministic_and_nested():
    spec = SynthSpec(n_images=3, n_test=2, image_size=(48, 48), seed=5)
    a = synthesize(spec, "target", "train")
    b = synthesize(spec, "target", "train")
    assert [s.id for s in a] == ["target_train_0000", "target_train_0001", "target_train_0002"]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.pixels, y.pixels)
        np.testing.assert_array_equal(x.mask, y.mask)
        assert (x.mask[..., 1] <= x.mask[..., 0]).all()
        assert x.mask[..., 1].any()


def test_domain_shift_changes_appearance_not_geometry():
    spec = SynthSpec(n_images=2, n_test=1, image_size=(48, 48), domain_shift=DomainShift(contrast_scale=0.5))
    src = synthesize(spec, "source", "train")
    plain = synthesize(SynthSpec(n_images=2, n_test=1, image_size=(48, 48)), "source", "train")
    for s, p in zip(src, plain):
        np.testing.assert_array_equal(s.pixels, p.pixels)
    assert DomainShift().is_identity and not DomainShift(blur_sigma=1.0).is_identity


def test_generate_and_load_roundtrip(tmp_path):
    spec = SynthSpec(n_images=2, n_test=1, image_size=(32, 40), seed=1)
    source, target = generate_synthetic(spec, tmp_path)
    assert (tmp_path / "target_test.csv").exists()
    m = DatasetManifest.read(tmp_path / "target_train.csv", "train", (32, 40))
    assert m.labeled and len(m) == 2
    loaded = list(load_dataset(m))
    for disk, mem in zip(loaded, synthesize(spec, "target", "train")):
        assert disk.id == mem.id
        np.testing.assert_allclose(disk.pixels, mem.pixels, atol=1e-12)
        np.testing.assert_array_equal(disk.mask, mem.mask)


def test_missing_mask_file_is_reported(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "a.png")
    m = DatasetManifest(tmp_path, "test", [ManifestEntry("a", tmp_path / "a.png", tmp_path / "a_mask.png")], (8, 8))
    with pytest.raises(OSError, match="a_mask.png"):
        list(load_dataset(m))


def test_unlabeled_manifest_and_duplicates(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "m.csv").write_text("a,a.png\n")
    m = DatasetManifest.read(tmp_path / "m.csv", roi_size=(8, 8))
    assert not m.labeled
    (s,) = load_dataset(m)
    assert s.mask is None
    with pytest.raises(ValueError, match="duplicate"):
        DatasetManifest(tmp_path, "x", [ManifestEntry("a", tmp_path), ManifestEntry("a", tmp_path)])


def test_size_mismatch_is_reported(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((6, 8), np.uint8)).save(tmp_path / "a_mask.png")
    m = DatasetManifest(tmp_path, "t", [ManifestEntry("a", tmp_path / "a.png", tmp_path / "a_mask.png")], (8, 8))
    with pytest.raises(ValueError, match="mask size"):
        list(load_dataset(m))
