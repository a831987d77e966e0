import numpy as np
import pytest

from latentpoints.data import FAMILIES, normalize, sample_family, synth_dataset


class TestSampling:
    def test_sphere_radius(self):
        rng = np.random.default_rng(0)
        pts, nrm = sample_family("sphere", 512, rng)
        r = np.linalg.norm(pts, axis=1)
        assert np.abs(r - r[0]).max() < 1e-12
        np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-12)

    def test_normals_are_unit_everywhere(self):
        for fam in FAMILIES:
            rng = np.random.default_rng(1)
            _, nrm = sample_family(fam, 256, rng)
            np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-9)

    def test_box_points_on_surface(self):
        rng = np.random.default_rng(2)
        pts, _ = sample_family("box", 400, rng)
        half = np.abs(pts).max(axis=0)
        on_face = np.isclose(np.abs(pts), half[None, :], atol=1e-9).any(axis=1)
        assert on_face.all()

    def test_torus_implicit_equation(self):
        rng = np.random.default_rng(3)
        pts, _, labels, _ = sample_family("torus", 300, rng, return_labels=True)
        rho = np.hypot(pts[:, 0], pts[:, 1])
        tube = np.hypot(rho - rho.mean() * 0 + (rho - np.median(rho)) * 0, pts[:, 2])
        # recover R from the data, then check (rho - R)^2 + z^2 = r^2
        # r and R are jittered per seed; estimate them robustly
        R = (rho.max() + rho.min()) / 2.0
        r = np.sqrt((rho - R) ** 2 + pts[:, 2] ** 2)
        assert r.std() / r.mean() < 0.02

    def test_area_weighted_parts(self):
        rng = np.random.default_rng(4)
        n = 40_000
        pts, nrm, labels, areas = sample_family("composite-chair", n, rng, return_labels=True)
        counts = np.bincount(labels, minlength=len(areas))
        expected = n * areas / areas.sum()
        chi2 = np.sum((counts - expected) ** 2 / expected)
        # 7 dof at alpha=0.001 -> 24.3
        assert chi2 < 24.3
        assert np.abs(counts / n - areas / areas.sum()).max() < 0.05

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            sample_family("pyramid", 10, np.random.default_rng(0))


class TestDataset:
    def test_deterministic_per_seed(self):
        a = synth_dataset(["sphere", "box"], 8, 64, seed=5)
        b = synth_dataset(["sphere", "box"], 8, 64, seed=5)
        for s1, s2 in zip(a.shapes, b.shapes):
            np.testing.assert_array_equal(s1, s2)
        assert a.split == b.split

    def test_different_seed_differs(self):
        a = synth_dataset(["sphere"], 4, 64, seed=1)
        b = synth_dataset(["sphere"], 4, 64, seed=2)
        assert not np.array_equal(a.shapes[0], b.shapes[0])

    def test_splits_disjoint_and_total(self):
        ds = synth_dataset(["torus"], 20, 32, seed=3)
        tr, va, re = ds.split["train"], ds.split["val"], ds.split["reference"]
        assert not (set(tr) & set(va)) and not (set(tr) & set(re)) and not (set(va) & set(re))
        assert sorted(tr + va + re) == list(range(20))

    def test_minimum_count_split(self):
        ds = synth_dataset(["sphere"], 3, 16, seed=0)
        assert all(len(ds.split[k]) == 1 for k in ("train", "val", "reference"))

    def test_count_too_small(self):
        with pytest.raises(ValueError):
            synth_dataset(["sphere"], 2, 16, seed=0)

    def test_normals_on_request(self):
        ds = synth_dataset(["capsule"], 4, 32, seed=1, with_normals=True)
        assert ds.normals is not None and len(ds.normals) == 4
        assert synth_dataset(["capsule"], 4, 32, seed=1).normals is None


class TestNormalize:
    def test_per_shape_max_axis_touches_one(self):
        ds = normalize(synth_dataset(list(FAMILIES), 12, 128, seed=7), "per_shape")
        for s in ds.shapes:
            assert s.min() >= -1.0 - 1e-12 and s.max() <= 1.0 + 1e-12
            assert np.abs(s).max() == pytest.approx(1.0, abs=1e-12)

    def test_global_unit_std(self):
        ds = normalize(synth_dataset(["box", "torus"], 10, 64, seed=8), "global")
        stacked = np.concatenate(ds.shapes, axis=0)
        assert stacked.std() == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-10)

    def test_per_shape_idempotent(self):
        ds = normalize(synth_dataset(["composite-plane"], 6, 64, seed=9), "per_shape")
        again = normalize(ds, "per_shape")
        for a, b in zip(ds.shapes, again.shapes):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_degenerate_shape_rejected(self):
        from latentpoints.data import Dataset

        flat = Dataset(shapes=[np.zeros((5, 3))], normals=None,
                       split={"train": [0], "val": [], "reference": []})
        with pytest.raises(ValueError):
            normalize(flat, "per_shape")

    def test_unknown_mode(self):
        ds = synth_dataset(["sphere"], 3, 8, seed=0)
        with pytest.raises(ValueError):
            normalize(ds, "weird")
