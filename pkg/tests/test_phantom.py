import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udaseg.phantom import (
    AugmentConfig, DatasetManifest, DomainStyle, InfeasibleSpecError, LabeledVolume, PhantomSpec, augment,
    augment_arrays, build_dataset, default_styles, generate_anatomy, preprocess, render_modality,
)

SMALL = PhantomSpec(grid_shape=(4, 32, 32))


def test_spec_validation():
    with pytest.raises(ValueError, match="num_classes"):
        PhantomSpec(num_classes=1)
    with pytest.raises(ValueError, match="16"):
        PhantomSpec(grid_shape=(4, 8, 32))
    with pytest.raises(ValueError, match="organ_scale"):
        PhantomSpec(organ_scale=(1.5,))


def test_two_classes_single_blob():
    v = generate_anatomy(PhantomSpec(num_classes=2), 0)
    assert set(np.unique(v.labels)) == {0, 1}


def test_anatomy_determinism_and_seed_sensitivity():
    spec = PhantomSpec()
    a, b, c = generate_anatomy(spec, 7), generate_anatomy(spec, 7), generate_anatomy(spec, 8)
    assert np.array_equal(a.labels, b.labels)
    assert (a.labels != c.labels).mean() > 0.01


def test_organs_are_connected_blobs():
    from scipy import ndimage

    v = generate_anatomy(PhantomSpec(), 3)
    assert set(np.unique(v.labels)) == set(range(5))
    for k in range(1, 5):
        _, n = ndimage.label(v.labels == k)
        assert n == 1


def test_infeasible_spec_raises():
    spec = PhantomSpec(grid_shape=(1, 16, 16), num_classes=12, organ_scale=(1.0,))
    with pytest.raises(InfeasibleSpecError):
        generate_anatomy(spec, 0, max_tries=5)


def test_degenerate_style_is_piecewise_constant():
    anat = generate_anatomy(SMALL, 1)
    lut = tuple(np.linspace(0, 1, 6))
    v = render_modality(anat, DomainStyle("A", lut), 0)
    for t in np.unique(anat.tissue):
        vals = v.intensities[anat.tissue == t]
        assert np.ptp(vals) == 0 and vals[0] == pytest.approx(lut[t])
    assert np.array_equal(v.labels, anat.labels)


def test_styles_reverse_class_contrast():
    anat = generate_anatomy(PhantomSpec(), 2)
    sa, sb = default_styles()
    va, vb = render_modality(anat, sa, 0), render_modality(anat, sb, 0)
    ma = [va.intensities[anat.labels == k].mean() for k in range(1, 5)]
    mb = [vb.intensities[anat.labels == k].mean() for k in range(1, 5)]
    assert np.all(np.subtract(ma, mb) != 0)
    assert np.array_equal(np.argsort(ma), np.argsort(mb)[::-1])
    again = render_modality(anat, sa, 0)
    assert np.array_equal(va.intensities, again.intensities)


def test_build_dataset_invariants(tmp_path):
    m = build_dataset(SMALL, 2, 2, 1, seed=3, out_dir=tmp_path)
    ids = m.all_ids()
    assert len(ids["source_train"]) == 2 and len(ids["target_train"]) == 2 and len(ids["paired_oracle"]) == 1
    every = ids["source_train"] + ids["target_train"] + ids["paired_oracle"]
    assert len(set(every)) == 5
    a, b = m.paired_oracle[0]
    va, vb = m.load(a), m.load(b)
    assert np.array_equal(va.labels, vb.labels)
    assert va.domain_tag == "A" and vb.domain_tag == "B"
    assert all(m.load(r).domain_tag == "B" for r in m.target_train)
    m2 = DatasetManifest.load_file(tmp_path / "manifest.json")
    assert m2.digest() == m.digest()
    assert json.loads((tmp_path / "manifest.json").read_text())["hash"] == m.digest()


def test_build_dataset_is_reproducible(tmp_path):
    m1 = build_dataset(SMALL, 1, 1, 1, seed=9, out_dir=tmp_path / "a")
    m2 = build_dataset(SMALL, 1, 1, 1, seed=9, out_dir=tmp_path / "b")
    assert m1.digest() == m2.digest()
    assert np.array_equal(m1.load(m1.target_train[0]).intensities, m2.load(m2.target_train[0]).intensities)


def test_manifest_rejects_shared_ids(tiny_dataset):
    m = tiny_dataset
    bad = DatasetManifest(m.root, m.spec, m.seed, m.source_train, [m.source_train[0]], m.paired_oracle)
    with pytest.raises(ValueError, match="shared"):
        bad.check()


def test_build_dataset_counts_and_io_errors(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(SMALL, 0, 1, 1, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        build_dataset(SMALL, 1, 1, 1, 0, blocker)


def _vol(img, lab=None, spacing=(1.0, 1.0, 1.0)):
    lab = np.zeros(img.shape, np.uint8) if lab is None else lab
    return LabeledVolume(img, lab, spacing, "A", "v")


def test_preprocess_zscore(rng):
    v = _vol(rng.normal(3, 5, (3, 40, 40)))
    out = preprocess(v, (64, 64))
    assert out.intensities.shape == (3, 64, 64)
    assert abs(out.intensities.astype(np.float64).mean()) < 1e-5
    assert abs(out.intensities.astype(np.float64).std() - 1) < 1e-5
    assert out.spacing[1] == pytest.approx(40 / 64)


def test_preprocess_fixed_point(rng):
    x = rng.normal(0, 1, (2, 64, 64))
    x = (x - x.mean()) / x.std()
    out = preprocess(_vol(x), (64, 64))
    assert np.max(np.abs(out.intensities - x)) < 1e-6


def test_preprocess_constant_volume_warns():
    with pytest.warns(RuntimeWarning, match="constant"):
        out = preprocess(_vol(np.full((2, 32, 32), 4.0)), (32, 32))
    assert not out.intensities.any() and out.meta["zscore_warning"]


def test_resize_preserves_label_set(rng):
    lab = rng.integers(0, 5, (2, 32, 32)).astype(np.uint8)
    lab[:, :8] = 0
    out = preprocess(_vol(rng.normal(size=(2, 32, 32)), lab), (64, 64))
    assert set(np.unique(out.labels)) == set(np.unique(lab))


def test_augment_disabled_is_identity(rng):
    v = _vol(rng.normal(size=(2, 16, 16)).astype(np.float32), rng.integers(0, 3, (2, 16, 16)).astype(np.uint8))
    out = augment(v, AugmentConfig.disabled(), 0)
    assert np.array_equal(out.intensities, v.intensities) and np.array_equal(out.labels, v.labels)


def test_mirror_is_involution(rng):
    cfg = AugmentConfig(p_rotate=0, p_scale=0, p_noise=0, p_blur=0, p_brightness=0, p_contrast=0,
                        p_mirror=1.0, mirror_axes=(-1,))
    v = _vol(rng.normal(size=(2, 16, 16)).astype(np.float32), rng.integers(0, 3, (2, 16, 16)).astype(np.uint8))
    once = augment(v, cfg, 0)
    twice = augment(once, cfg, 1)
    assert not np.array_equal(once.labels, v.labels)
    assert np.array_equal(twice.intensities, v.intensities) and np.array_equal(twice.labels, v.labels)


@given(st.sampled_from([90.0, -90.0, 180.0, 270.0]), st.integers(0, 2**31))
def test_right_angle_rotation_keeps_foreground_count(angle, seed):
    rng = np.random.default_rng(seed)
    lab = (rng.random((1, 12, 12)) < 0.3).astype(np.uint8)
    img = rng.normal(size=lab.shape).astype(np.float32)
    cfg = AugmentConfig(p_rotate=1.0, rotate_range=(angle, angle), p_scale=0, p_noise=0, p_blur=0,
                        p_brightness=0, p_contrast=0, p_mirror=0)
    _, out = augment_arrays(img, lab, cfg, np.random.default_rng(0))
    assert out.sum() == lab.sum()


@given(st.integers(0, 2**31))
def test_augment_label_transport(seed):
    rng = np.random.default_rng(seed)
    lab = np.zeros((2, 16, 16), np.uint8)
    lab[:, 4:10, 5:12] = 1
    lab[:, 11:14, 2:5] = 2
    img = lab.astype(np.float32) * 10
    cfg = AugmentConfig(p_rotate=0.7, p_scale=0.7, p_noise=0, p_blur=0, p_brightness=0, p_contrast=0)
    out_img, out_lab = augment_arrays(img, lab, cfg, rng)
    assert set(np.unique(out_lab)) <= {0, 1, 2}
    # geometry moved intensities and labels together: organ pixels stay bright
    inside = out_lab == 1
    if inside.sum() > 10:
        assert np.median(out_img[inside]) > 5
    again = augment_arrays(img, lab, cfg, np.random.default_rng(seed))
    assert np.array_equal(again[1], out_lab)
