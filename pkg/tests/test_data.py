import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from icaf.data import (CRYSTAL, DatasetFormatError, DatasetManifest, GeneratorSpec, GroupEntry, ViewGroup,
                       boundary_visibility, dataset_digest, generate_group, generate_synthetic_dataset,
                       lit_rim, load_group, sample_scene, save_group, split_dataset, visibility_cutoff)


def _spec(**kw):
    base = dict(n_groups=2, views_per_group=4, image_size=(32, 32),
                illumination_angles=[0.0, 90.0, 180.0, 270.0], seed=1)
    base.update(kw)
    return GeneratorSpec(**base)


class TestViewGroup:
    def test_shape_checks(self):
        views = np.zeros((3, 8, 8, 3), np.float32)
        g = ViewGroup("g", views, np.zeros((8, 8), np.int64))
        assert g.num_views == 3 and g.size == (8, 8)
        with pytest.raises(ValueError):
            ViewGroup("g", views, np.zeros((8, 9), np.int64))
        with pytest.raises(ValueError):
            ViewGroup("g", np.zeros((3, 8, 8), np.float32), None, labeled=False)

    def test_labeled_requires_mask(self):
        with pytest.raises(ValueError):
            ViewGroup("g", np.zeros((2, 8, 8, 3), np.float32), None, labeled=True)


class TestGeneratorSpec:
    def test_defaults(self):
        s = GeneratorSpec()
        assert s.views_per_group == 12 and s.image_size == (128, 128)
        assert s.illumination_angles == [30.0 * k for k in range(12)]
        s.validate()

    @pytest.mark.parametrize("kw", [
        dict(views_per_group=3),
        dict(n_classes=4),
        dict(n_classes=1),
        dict(noise_std=-0.1),
        dict(boundary_visibility_width=0.0),
        dict(image_size=(8, 8)),
        dict(n_groups=-1),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            _spec(**kw).validate()

    def test_round_trip_and_digest(self):
        s = _spec()
        s2 = GeneratorSpec.from_dict(json.loads(json.dumps(s.to_dict())))
        assert s2 == s and s2.digest() == s.digest()
        assert _spec(seed=2).digest() != s.digest()


class TestScene:
    def test_classes_and_fractions(self):
        spec = _spec(image_size=(64, 64))
        for seed in range(10):
            scene = sample_scene(np.random.default_rng(seed), spec)
            frac = np.bincount(scene.mask.ravel(), minlength=3) / scene.mask.size
            assert 0.005 <= frac[2] <= 0.2
            assert frac[CRYSTAL] > 0.1
            # rim is a subset of the defect
            assert not np.any(scene.rim & (scene.mask != 2))

    def test_visibility_matches_cosine(self):
        scene = sample_scene(np.random.default_rng(0), _spec(image_size=(64, 64)))
        for ang in (0.0, 45.0, 200.0):
            v = boundary_visibility(scene, ang)
            ref = np.clip(np.cos(scene.normal_angle - math.radians(ang)), 0, None)
            np.testing.assert_allclose(v, ref)
            assert v.min() >= 0 and v.max() <= 1

    def test_lit_rim_is_partial(self):
        # a single view shows only part of each defect boundary; the union over views covers most of it
        spec = GeneratorSpec(n_groups=1, image_size=(128, 128))
        scene = sample_scene(np.random.default_rng(4), spec)
        lits = [lit_rim(scene, spec, a) for a in spec.illumination_angles]
        rim = scene.rim.sum()
        single = max(l.sum() for l in lits) / rim
        union = np.logical_or.reduce(lits).sum() / rim
        assert single <= spec.boundary_visibility_width / 360 + 0.1
        assert union > 0.8

    def test_cutoff(self):
        assert visibility_cutoff(_spec(boundary_visibility_width=120.0)) == pytest.approx(0.5)

    def test_views_differ_by_lighting(self):
        g = generate_group(_spec(image_size=(64, 64), noise_std=0.0), 5, "g")
        rim = sample_scene(np.random.default_rng(5), _spec(image_size=(64, 64))).rim
        assert g.views.dtype == np.float32 and g.views.shape == (4, 64, 64, 3)
        assert g.views.min() >= 0 and g.views.max() <= 1
        assert np.abs(g.views[0][rim] - g.views[2][rim]).max() > 0.05


class TestIO:
    def test_save_load_round_trip(self, tmp_path):
        g = generate_group(_spec(), 0, "grp")
        entry = save_group(g, tmp_path)
        assert entry.views == [f"view_{k:02d}.png" for k in range(4)] and entry.mask == "mask.png"
        m = DatasetManifest(tmp_path, [entry])
        m.save()
        back = load_group(DatasetManifest.load(tmp_path), "grp")
        np.testing.assert_array_equal(back.gt_mask, g.gt_mask)
        assert np.abs(back.views - g.views).max() <= 0.5 / 255 + 1e-6

    def test_version_mismatch(self, tmp_path):
        DatasetManifest(tmp_path, []).save()
        raw = json.loads((tmp_path / "manifest.json").read_text())
        raw["format_version"] = "2"
        (tmp_path / "manifest.json").write_text(json.dumps(raw))
        with pytest.raises(DatasetFormatError):
            DatasetManifest.load(tmp_path)

    def test_missing_file(self, tmp_path):
        entry = save_group(generate_group(_spec(), 0, "grp"), tmp_path)
        DatasetManifest(tmp_path, [entry]).save()
        (tmp_path / "grp" / "view_01.png").unlink()
        with pytest.raises(FileNotFoundError):
            DatasetManifest.load(tmp_path)

    def test_bad_mask(self, tmp_path):
        entry = save_group(generate_group(_spec(), 0, "grp"), tmp_path)
        Image.fromarray(np.full((32, 32), 7, np.uint8)).save(tmp_path / "grp" / "mask.png")
        m = DatasetManifest(tmp_path, [entry])
        with pytest.raises(DatasetFormatError):
            load_group(m, "grp")
        Image.fromarray(np.zeros((16, 32), np.uint8)).save(tmp_path / "grp" / "mask.png")
        with pytest.raises(DatasetFormatError):
            load_group(m, "grp")

    def test_mismatched_view_size(self, tmp_path):
        entry = save_group(generate_group(_spec(), 0, "grp"), tmp_path)
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "grp" / "view_02.png")
        with pytest.raises(DatasetFormatError):
            load_group(DatasetManifest(tmp_path, [entry]), "grp")

    def test_duplicate_ids(self, tmp_path):
        entry = save_group(generate_group(_spec(), 0, "grp"), tmp_path)
        with pytest.raises(DatasetFormatError):
            DatasetManifest(tmp_path, [entry, entry])

    def test_evaluation_needs_mask(self, tmp_path):
        g = generate_group(_spec(), 0, "grp")
        entry = save_group(ViewGroup("grp", g.views, None, labeled=False), tmp_path)
        m = DatasetManifest(tmp_path, [entry])
        assert load_group(m, "grp").gt_mask is None
        with pytest.raises(DatasetFormatError):
            load_group(m, "grp", evaluation=True)


class TestDataset:
    def test_layout(self, tiny_dataset):
        m = DatasetManifest.load(tiny_dataset.root)
        assert m.ids("train") == [f"train_{i:04d}" for i in range(6)]
        assert m.ids("test") == ["test_0000", "test_0001"]
        # test masks stay on disk but are not training labels
        assert load_group(m, "test_0000").gt_mask is None
        assert load_group(m, "test_0000", evaluation=True).gt_mask is not None
        assert (m.root / "generator_spec.json").is_file()

    def test_deterministic(self, tmp_path):
        a = generate_synthetic_dataset(_spec(), tmp_path / "a")
        b = generate_synthetic_dataset(_spec(), tmp_path / "b")
        c = generate_synthetic_dataset(_spec(seed=9), tmp_path / "c")
        assert dataset_digest(a.root) == dataset_digest(b.root) != dataset_digest(c.root)

    def test_zero_groups(self, tmp_path):
        m = generate_synthetic_dataset(_spec(n_groups=0), tmp_path / "empty")
        assert m.groups == [] and not (tmp_path / "empty").exists()

    def test_split(self, tiny_dataset):
        lab, unl = split_dataset(tiny_dataset, 0.34, 0)
        assert len(lab) == 2 and len(unl) == 4
        assert set(lab) | set(unl) == set(tiny_dataset.ids("train"))
        assert split_dataset(tiny_dataset, 0.34, 0) == (lab, unl)
        with pytest.raises(ValueError):
            split_dataset(tiny_dataset, 0.05, 0)
        with pytest.raises(ValueError):
            split_dataset(tiny_dataset, 0.0, 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 400), ratio=st.floats(0.01, 1.0), seed=st.integers(0, 2**32 - 1))
def test_split_count_property(n, ratio, seed):
    m = DatasetManifest("/nonexistent", [GroupEntry(f"g{i}", True, ["v.png"]) for i in range(n)])
    k = math.floor(ratio * n + 0.5)
    if k < 1:
        with pytest.raises(ValueError):
            split_dataset(m, ratio, seed)
        return
    lab, unl = split_dataset(m, ratio, seed)
    assert len(lab) == k and len(unl) == n - k and not set(lab) & set(unl)
