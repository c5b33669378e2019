import itertools

import numpy as np
import pytest
from scipy import stats

from diffcl.errors import ConfigError, VolumeFormatError, VolumeIOError
from diffcl.voldata import (SyntheticSpec, VolumeSample, apply_transform, augment, crop_patch,
                            gen_synthetic_dataset, load_volume, random_transform, save_volume,
                            split_dataset)


def ball_count(shape, center, r):
    """Enumerate voxels whose centre lies within r of ``center``."""
    n = 0
    for i, j, k in itertools.product(*[range(s) for s in shape]):
        if (i - center[0]) ** 2 + (j - center[1]) ** 2 + (k - center[2]) ** 2 <= r * r:
            n += 1
    return n


def sphere_spec(**kw):
    base = dict(grid=(16, 16, 16), count=1, num_classes=2, noise=0.0, blur_sigma=0.0,
                radius_range=(4.0, 4.0), anisotropy=0.0, bias_amplitude=0.0, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def test_sphere_voxel_count():
    s = gen_synthetic_dataset(sphere_spec())[0]
    fg = int((s.label > 0).sum())
    assert abs(fg - 268.08) <= 0.15 * 268.08
    center = s.meta["structures"][0]["center"]
    assert fg == ball_count(s.shape, center, 4.0)


def test_zero_radius_is_all_background():
    s = gen_synthetic_dataset(sphere_spec(radius_range=(0.0, 0.0)))[0]
    assert not s.label.any()


def test_generation_is_deterministic():
    spec = SyntheticSpec(count=3, seed=11)
    a, b = gen_synthetic_dataset(spec), gen_synthetic_dataset(spec)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image) and np.array_equal(x.label, y.label)


def test_labels_and_normalisation():
    for s in gen_synthetic_dataset(SyntheticSpec(count=4, num_classes=4, seed=2)):
        assert s.label.max() < 4 and s.label.min() >= 0
        assert 1 <= s.meta["structures"].__len__() <= 3
        assert abs(float(s.image.mean())) < 1e-5
        assert abs(float(s.image.std()) - 1.0) < 1e-3


@pytest.mark.parametrize("kw,field", [
    ({"grid": (4, 16, 16)}, "grid"),
    ({"radius_range": (3.0, 9.0)}, "radius_range"),
    ({"num_classes": 1}, "num_classes"),
    ({"count": 0}, "count"),
])
def test_invalid_specs_name_the_field(kw, field):
    with pytest.raises(ConfigError) as exc:
        gen_synthetic_dataset(SyntheticSpec(**kw))
    assert exc.value.field == field


def _fake_samples(n):
    return [VolumeSample(np.zeros((2, 2, 2), np.float32), np.zeros((2, 2, 2), np.int64), id=f"s{i}")
            for i in range(n)]


def test_split_counts():
    split = split_dataset(_fake_samples(80), 8, seed=0)
    assert len(split.labeled) == 8 and len(split.unlabeled) == 72
    ids_l = {s.id for s in split.labeled}
    ids_u = {s.id for s in split.unlabeled}
    assert not ids_l & ids_u and len(ids_l | ids_u) == 80
    assert all(s.label is None for s in split.unlabeled)
    assert set(split.heldout_labels) == ids_u


def test_split_edge_and_determinism():
    samples = _fake_samples(10)
    assert len(split_dataset(samples, 9, seed=1).unlabeled) == 1
    a, b = split_dataset(samples, 4, seed=5), split_dataset(samples, 4, seed=5)
    assert [s.id for s in a.labeled] == [s.id for s in b.labeled]
    for bad in (0, 10):
        with pytest.raises(ConfigError):
            split_dataset(samples, bad, seed=0)


def _coord_sample(shape):
    img = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
    return VolumeSample(img, (img % 3).astype(np.int64), id="c")


def test_crop_identity_and_center():
    s = _coord_sample((16, 16, 16))
    c = crop_patch(s, (16, 16, 16), "random", seed=4)
    assert np.array_equal(c.image, s.image)
    c = crop_patch(_coord_sample((32, 32, 32)), (16, 16, 16), "center")
    assert c.meta["crop_offset"] == (8, 8, 8)
    with pytest.raises(ValueError):
        crop_patch(s, (17, 16, 16))


def test_crop_label_follows_image():
    s = _coord_sample((12, 10, 9))
    c = crop_patch(s, (5, 5, 5), "random", seed=9)
    assert np.array_equal(c.label, (c.image % 3).astype(np.int64))


def test_random_crop_offsets_are_uniform():
    s = _coord_sample((20, 20, 20))
    valid = list(itertools.product(range(5), repeat=3))
    counts = dict.fromkeys(valid, 0)
    for seed in range(5000):
        counts[crop_patch(s, (16, 16, 16), "random", seed=seed).meta["crop_offset"]] += 1
    assert all(v > 0 for v in counts.values())
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_flip_and_rotation_identities(rng):
    a = rng.normal(size=(6, 6, 6))
    for ax in range(3):
        assert np.array_equal(apply_transform(apply_transform(a, (ax,), 0, (0, 1)), (ax,), 0, (0, 1)), a)
    for plane in ((0, 1), (0, 2), (1, 2)):
        out = a
        for _ in range(4):
            out = apply_transform(out, (), 1, plane)
        assert np.array_equal(out, a)


def test_augment_preserves_labels():
    s = gen_synthetic_dataset(SyntheticSpec(count=1, num_classes=3, seed=8))[0]
    for seed in range(10):
        t = augment(s, seed)
        assert t.image.shape == s.image.shape
        assert (t.label > 0).sum() == (s.label > 0).sum()
        assert set(np.unique(t.label)) == set(np.unique(s.label))
        # same operator on both grids
        assert np.array_equal(np.sort(t.image[t.label == 1]), np.sort(s.image[s.label == 1]))


def _hyperoctahedral(grid):
    """All 48 signed axis permutations applied to ``grid``."""
    out = []
    for perm in itertools.permutations(range(3)):
        for flips in itertools.product((False, True), repeat=3):
            g = np.transpose(grid, perm)
            for ax, f in enumerate(flips):
                if f:
                    g = np.flip(g, ax)
            out.append(np.ascontiguousarray(g))
    return out


def test_augmentations_compose_within_the_group(rng):
    grid = np.arange(4 ** 3).reshape(4, 4, 4)
    members = {g.tobytes() for g in _hyperoctahedral(grid)}
    assert len(members) == 48
    for _ in range(30):
        t1 = random_transform(grid.shape, rng)
        t2 = random_transform(grid.shape, rng)
        assert apply_transform(grid, *t1).tobytes() in members
        assert apply_transform(apply_transform(grid, *t1), *t2).tobytes() in members


def test_nifti_round_trip(tmp_path, rng):
    img = rng.normal(size=(8, 8, 8)).astype(np.float32)
    lab = rng.integers(0, 3, size=(8, 8, 8))
    s = VolumeSample(img, lab, id="v", spacing=(0.625, 0.625, 0.625))
    save_volume(s, tmp_path / "v.nii.gz", tmp_path / "v_label.nii.gz")
    back = load_volume(tmp_path / "v.nii.gz", tmp_path / "v_label.nii.gz")
    assert np.array_equal(back.image, img)
    assert np.array_equal(back.label, lab)
    np.testing.assert_allclose(back.spacing, (0.625, 0.625, 0.625), atol=1e-6)


def test_nifti_rejects_2d_and_garbage(tmp_path):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.zeros((4, 4), np.float32), np.eye(4)), str(tmp_path / "flat.nii"))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "flat.nii")
    (tmp_path / "junk.nii.gz").write_bytes(b"not a nifti")
    with pytest.raises(VolumeIOError) as exc:
        load_volume(tmp_path / "junk.nii.gz")
    assert "junk.nii.gz" in str(exc.value)
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "missing.nii")
