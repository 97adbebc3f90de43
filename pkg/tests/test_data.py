"""Dataset container, generators, and CSV round-trip tests."""

import numpy as np
import pytest

from implicitreg.data import (
    Dataset,
    gaussian_cluster_split,
    gaussian_clusters,
    load_csv,
    save_csv,
    xor_cluster_split,
    xor_clusters,
)


class TestDataset:
    def test_classification_detection(self):
        d = Dataset(features=np.zeros((3, 2)), targets=np.array([0, 1, 1]))
        assert d.is_classification
        assert d.n_classes == 2
        assert d.n == 3 and d.n_features == 2

    def test_regression_targets(self):
        d = Dataset(features=np.zeros((2, 2)), targets=np.array([0.5, -1.0]))
        assert not d.is_classification
        with pytest.raises(ValueError):
            _ = d.n_classes

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="2-D"):
            Dataset(features=np.zeros(3), targets=np.array([0, 1, 0]))
        with pytest.raises(ValueError, match="one entry per example"):
            Dataset(features=np.zeros((3, 2)), targets=np.array([0, 1]))

    def test_non_finite_rejected(self):
        feats = np.zeros((2, 2))
        feats[0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            Dataset(features=feats, targets=np.array([0, 1]))


class TestGenerators:
    def test_clusters_deterministic(self):
        a = gaussian_clusters(32, 3, seed=5)
        b = gaussian_clusters(32, 3, seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.targets, b.targets)
        c = gaussian_clusters(32, 3, seed=6)
        assert not np.array_equal(a.features, c.features)

    def test_clusters_balanced_binary(self):
        d = gaussian_clusters(100, 4, seed=0)
        assert set(np.unique(d.targets)) <= {0, 1}
        assert d.n == 100

    def test_separation_controls_difficulty(self):
        far = gaussian_clusters(400, 2, separation=10.0, seed=1)
        # with means 10 apart and unit variance, a midpoint threshold on the
        # projection separates nearly everything
        mean0 = far.features[far.targets == 0].mean(axis=0)
        mean1 = far.features[far.targets == 1].mean(axis=0)
        assert np.linalg.norm(mean1 - mean0) > 8.0

    def test_label_noise_flips_labels(self):
        clean = gaussian_clusters(500, 2, separation=10.0, label_noise=0.0, seed=2)
        noisy = gaussian_clusters(500, 2, separation=10.0, label_noise=0.2, seed=2)
        flipped = np.mean(clean.targets != noisy.targets)
        assert 0.1 < flipped < 0.3

    def test_split_shapes_and_determinism(self):
        tr1, te1 = gaussian_cluster_split(48, 16, 3, seed=7)
        tr2, te2 = gaussian_cluster_split(48, 16, 3, seed=7)
        assert tr1.n == 48 and te1.n == 16
        assert np.array_equal(tr1.features, tr2.features)
        assert np.array_equal(te1.targets, te2.targets)
        # train and test come from disjoint draws of the same stream
        assert not np.array_equal(tr1.features[:16], te1.features)

    def test_xor_labels_match_quadrant_parity(self):
        d = xor_clusters(2000, 2, separation=12.0, seed=3)
        # separation 12 leaves essentially no overlap, so the sign product
        # of the first two features recovers the label
        parity = (np.sign(d.features[:, 0]) * np.sign(d.features[:, 1]) > 0).astype(int)
        assert np.mean(parity == d.targets) > 0.99

    def test_xor_not_linearly_separable(self):
        d = xor_clusters(4000, 2, separation=8.0, seed=4)
        # any single linear projection mixes the classes: both class means
        # sit near the origin even though clusters are far apart
        mean0 = d.features[d.targets == 0].mean(axis=0)
        mean1 = d.features[d.targets == 1].mean(axis=0)
        assert np.linalg.norm(mean1 - mean0) < 0.5

    def test_xor_noise_dims_and_validation(self):
        d = xor_clusters(64, 5, separation=6.0, seed=0)
        assert d.n_features == 5
        # trailing dimensions carry no class signal
        mean_gap = abs(
            d.features[d.targets == 0, 2:].mean() - d.features[d.targets == 1, 2:].mean()
        )
        assert mean_gap < 0.5
        with pytest.raises(ValueError, match="at least 2 feature"):
            xor_clusters(8, 1)

    def test_xor_split_deterministic(self):
        tr1, te1 = xor_cluster_split(32, 8, 4, seed=9)
        tr2, te2 = xor_cluster_split(32, 8, 4, seed=9)
        assert tr1.n == 32 and te1.n == 8
        assert np.array_equal(tr1.features, tr2.features)
        assert np.array_equal(te1.features, te2.features)


class TestCsv:
    def test_round_trip_bitwise(self, tmp_path):
        d = gaussian_clusters(16, 3, seed=9)
        path = tmp_path / "data.csv"
        save_csv(d, path)
        back = load_csv(path)
        assert np.array_equal(back.features, d.features)
        assert np.array_equal(back.targets, d.targets)
        assert back.is_classification

    def test_regression_round_trip(self, tmp_path):
        d = Dataset(
            features=np.array([[0.1, 0.2], [0.3, 0.4]]),
            targets=np.array([1.5, -2.25]),
        )
        path = tmp_path / "reg.csv"
        save_csv(d, path)
        back = load_csv(path)
        assert not back.is_classification
        assert np.array_equal(back.targets, d.targets)

    def test_header_validation(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,label\n0.0,0.0,0\n")
        with pytest.raises(ValueError, match="header"):
            load_csv(path)
