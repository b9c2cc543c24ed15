import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage, stats

from scdr.data import (GLYPHS, SyntheticSpec, apply_speckle, augment_chips, augment_dataset, canvas_size,
                       center_chips, generate, generate_sample, kshot_sample, load_dataset, load_manifest,
                       save_dataset)
from scdr.errors import AugmentationError, DataError

CLEAN = SyntheticSpec(speckle=False, rotation=False, clutter_count=0)


def test_glyphs_are_distinct_and_equal_ink():
    flat = [g.tobytes() for g in GLYPHS]
    assert len(set(flat)) == len(GLYPHS)
    assert len({int(g.sum()) for g in GLYPHS}) == 1


def test_same_class_differs_only_at_glyph_when_noise_off():
    a, b = generate_sample(CLEAN, 2, 0), generate_sample(CLEAN, 2, 1)
    # pixels partially covered by a glyph cell sit one pixel outside the mask at most
    near = ndimage.binary_dilation(a.glyph_mask | b.glyph_mask, iterations=1)
    assert not np.array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.image[~near], b.image[~near])


def test_classes_identical_outside_glyph_before_noise():
    a, b = generate_sample(CLEAN, 0, 0), generate_sample(CLEAN, 3, 0)
    near = ndimage.binary_dilation(a.glyph_mask | b.glyph_mask, iterations=1)
    np.testing.assert_array_equal(a.image[~near], b.image[~near])


def test_generation_is_bit_identical():
    spec = SyntheticSpec(seed=11)
    a, b = generate(spec, 3), generate(spec, 3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.glyph_masks, b.glyph_masks)
    assert not np.array_equal(a.images, generate(replace(spec, seed=12), 3).images)


def test_train_and_test_streams_are_disjoint():
    spec = SyntheticSpec()
    tr, te = generate(spec, 5, "train"), generate(spec, 5, "test")
    assert not set(tr.seeds.tolist()) & set(te.seeds.tolist())


def test_images_clipped_and_masks_in_coverage_band():
    for spec in (SyntheticSpec(), SyntheticSpec(rotation=False, glyph_cell=3.0, chassis_size=(30.0, 16.0))):
        ds = generate(spec, 6)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        cover = ds.glyph_masks.reshape(len(ds), -1).mean(axis=1)
        assert np.all((cover >= 0.01) & (cover <= 0.15)), cover


def test_speckle_is_unit_mean():
    rng = np.random.default_rng(0)
    clean = np.full((8, 8), 0.4)
    draws = np.stack([apply_speckle(clean, rng) for _ in range(1000)])
    assert abs(draws.mean() / 0.4 - 1) < 0.02


def test_glyph_placement_gives_up_with_data_error():
    with pytest.raises(DataError, match="place glyph"):
        generate_sample(SyntheticSpec(glyph_cell=4.0, chassis_size=(28.0, 14.0)), 0, 0)


def test_bad_counts_rejected():
    with pytest.raises(DataError):
        generate(SyntheticSpec(), 0)
    with pytest.raises(DataError):
        generate(SyntheticSpec(num_classes=9), 1)


def test_chassis_mean_does_not_separate_classes():
    spec = SyntheticSpec(rotation=False)
    ds = generate(spec, 30)
    means = {}
    for c in range(spec.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        vals = []
        for i in idx:
            y0, x0, y1, x1 = ds.boxes[i]
            vals.append(ds.images[i, y0:y1, x0:x1].mean())
        means[c] = vals
    pairs = list(itertools.combinations(range(spec.num_classes), 2))
    for a, b in pairs:
        p = stats.ttest_ind(means[a], means[b], equal_var=False).pvalue
        assert p > 0.01 / len(pairs), (a, b, p)


# k-shot sampling -----------------------------------------------------------------


def test_kshot_examples():
    ds = generate(SyntheticSpec(), 4)
    full = kshot_sample(ds, 4, 0)
    assert sorted(full.seeds.tolist()) == sorted(ds.seeds.tolist())
    one = kshot_sample(ds, 1, 0)
    assert len(one) == 5 and sorted(one.labels.tolist()) == [0, 1, 2, 3, 4]
    with pytest.raises(DataError, match="class 0"):
        kshot_sample(ds, 5, 0)


def test_kshot_reproducible_and_balanced():
    ds = generate(SyntheticSpec(), 6)
    a, b = kshot_sample(ds, 3, 7), kshot_sample(ds, 3, 7)
    assert np.array_equal(a.seeds, b.seeds)
    assert np.array_equal(a.class_counts(), [3] * 5)


def test_kshot_overlap_matches_hypergeometric_expectation():
    n, k, trials = 10, 4, 100
    labels = np.repeat(np.arange(2), n)
    from scdr.data import Dataset
    ds = Dataset(np.zeros((2 * n, 8, 8), np.float32), labels, np.zeros((2 * n, 8, 8), np.uint8),
                 np.zeros((2 * n, 4), np.int64), np.arange(2 * n), np.zeros(2 * n), 2)
    overlaps = []
    for t in range(trials):
        a = set(kshot_sample(ds, k, 2 * t).seeds.tolist())
        b = set(kshot_sample(ds, k, 2 * t + 1).seeds.tolist())
        overlaps.append(len(a & b) / 2)
    expected = k * k / n
    sd = np.sqrt(k * (k / n) * ((n - k) / n) * ((n - k) / (n - 1)))
    assert abs(np.mean(overlaps) - expected) < 4 * sd / np.sqrt(2 * trials)
    assert np.mean(overlaps) < k


# chip augmentation ---------------------------------------------------------------


def test_canvas_ratio():
    assert canvas_size((64, 64)) == (110, 110)
    assert canvas_size((224, 224)) == (384, 384)


def test_canvas_equal_to_chip_gives_identical_chips():
    img = np.random.default_rng(0).uniform(size=(20, 20))
    chips, _, _ = augment_chips(img, (20, 20), 5, chassis_box=[5, 5, 15, 15], canvas=(20, 20))
    for c in chips:
        np.testing.assert_array_equal(c, img.astype(np.float32))


def test_ten_chips_each_containing_the_chassis():
    s = generate_sample(SyntheticSpec(), 1, 0)
    box = s.meta["chassis_box"]
    chips, masks, boxes = augment_chips(s.image, (64, 64), chassis_box=box, glyph_mask=s.glyph_mask)
    assert len(chips) == 10 and len(masks) == 10
    rng = np.random.default_rng(1)
    for trial in range(1000):
        _, _, bx = augment_chips(s.image, (64, 64), 1, chassis_box=box, seed=int(rng.integers(1 << 31)))
        y0, x0, y1, x1 = bx[0]
        assert 0 <= y0 and 0 <= x0 and y1 <= 64 and x1 <= 64


def test_chassis_larger_than_chip_is_error():
    img = np.zeros((64, 64))
    with pytest.raises(AugmentationError):
        augment_chips(img, (64, 64), chassis_box=[0, 0, 60, 60])


def test_augmented_dataset_keeps_labels_and_shifted_masks():
    ds = generate(SyntheticSpec(), 2)
    aug = augment_dataset(ds, 3, seed=0)
    assert len(aug) == 3 * len(ds)
    assert np.array_equal(aug.labels, np.repeat(ds.labels, 3))
    for i in range(len(aug)):
        m = aug.glyph_masks[i]
        assert m.sum() > 0
        y0, x0, y1, x1 = aug.boxes[i]
        ys, xs = np.nonzero(m)
        assert ys.min() >= y0 and ys.max() < y1 and xs.min() >= x0 and xs.max() < x1


def test_center_chips_keep_size():
    ds = generate(SyntheticSpec(), 1)
    c = center_chips(ds)
    assert c.images.shape == ds.images.shape and np.all(c.glyph_masks.sum(axis=(1, 2)) > 0)


# on-disk layout ------------------------------------------------------------------


def test_save_and_load_round_trip(tmp_path):
    spec = SyntheticSpec(num_classes=3)
    splits = {"train": generate(spec, 2, "train"), "test": generate(spec, 1, "test")}
    path = save_dataset(tmp_path / "a", spec, splits)
    manifest = load_manifest(tmp_path / "a")
    assert len(manifest["samples"]) == 3 * 3
    assert (tmp_path / "a" / "class_2" / "train_0001.png").is_file()
    back = load_dataset(tmp_path / "a", "train")
    assert np.array_equal(back.labels, splits["train"].labels)
    assert np.array_equal(back.glyph_masks, splits["train"].glyph_masks)
    assert np.max(np.abs(back.images - splits["train"].images)) <= 0.5 / 255 + 1e-6
    save_dataset(tmp_path / "b", spec, splits)
    assert path.read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert json.loads(path.read_text())["spec"]["num_classes"] == 3


def test_missing_manifest_is_data_error(tmp_path):
    with pytest.raises(DataError, match="manifest"):
        load_dataset(tmp_path, "train")
