"""Tests for metrics module."""

import numpy as np
import pytest

from ltpeft.errors import ContractError, DataError, DegenerateError, ShapeError
from ltpeft.metrics import cluster_metrics, feature_report, knn_accuracy, split_accuracy


class TestSplitAccuracy:
    """Test overall and shot-split accuracy."""

    def test_macro_per_split(self) -> None:
        labels = [0, 0, 0, 0, 1, 1, 2]
        preds = [0, 0, 0, 1, 1, 0, 2]
        report = split_accuracy(preds, labels, ["many", "medium", "few"])
        assert report.overall == pytest.approx(100.0 * 5 / 7)
        assert report.many == pytest.approx(75.0)
        assert report.medium == pytest.approx(50.0)
        assert report.few == pytest.approx(100.0)
        np.testing.assert_array_equal(report.class_counts, [4, 2, 1])

    def test_empty_split_is_none(self) -> None:
        report = split_accuracy([0, 1], [0, 1], ["many", "many"])
        assert report.medium is None
        assert report.few is None
        assert report.row() == {"overall": 100.0, "many": 100.0, "medium": None, "few": None}

    def test_class_without_samples(self) -> None:
        report = split_accuracy([0], [0], ["many", "few"])
        assert np.isnan(report.per_class[1])
        assert report.few is None

    def test_length_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            split_accuracy([0, 1], [0], ["many"])

    def test_empty(self) -> None:
        with pytest.raises(DataError):
            split_accuracy([], [], ["many"])

    def test_untagged_label(self) -> None:
        with pytest.raises(ContractError):
            split_accuracy([2], [2], ["many", "few"])


class TestKnn:
    """Test the cosine K-NN probe."""

    def test_separable(self) -> None:
        train = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
        val = np.array([[1.0, 0.05], [0.05, 1.0]])
        assert knn_accuracy(train, [0, 0, 1, 1], val, [0, 1], k_nn=1) == 100.0

    def test_k_larger_than_train(self) -> None:
        train = np.array([[1.0, 0.0], [0.0, 1.0], [0.1, 1.0]])
        assert knn_accuracy(train, [0, 1, 1], [[1.0, 0.0]], [1], k_nn=20) == 100.0

    def test_vote_tie_goes_to_lower_class(self) -> None:
        train = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert knn_accuracy(train, [1, 0], [[1.0, 0.0]], [0], k_nn=2) == 100.0

    def test_scale_invariant(self) -> None:
        rng = np.random.default_rng(0)
        train, val = rng.normal(size=(20, 4)), rng.normal(size=(6, 4))
        y_train, y_val = rng.integers(0, 3, 20), rng.integers(0, 3, 6)
        assert knn_accuracy(train, y_train, val, y_val, 3) == knn_accuracy(5 * train, y_train, 0.1 * val, y_val, 3)

    def test_invalid_k(self) -> None:
        with pytest.raises(ContractError):
            knn_accuracy([[1.0]], [0], [[1.0]], [0], k_nn=0)

    def test_empty_train(self) -> None:
        with pytest.raises(DataError):
            knn_accuracy(np.zeros((0, 2)), np.zeros(0), [[1.0, 0.0]], [0])


class TestClusterMetrics:
    """Test radii, inter-class distance and their ratio."""

    def test_known_geometry(self) -> None:
        x = np.array([[-1.0, 0.0], [1.0, 0.0], [9.0, 0.0], [11.0, 0.0]])
        stats = cluster_metrics(x, [0, 0, 1, 1])
        np.testing.assert_allclose(stats.radii, [1.0, 1.0])
        assert stats.inter == pytest.approx(10.0)
        assert stats.gamma == pytest.approx(2.0 / (2 * 10.0))

    def test_scale_invariant_gamma(self) -> None:
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(30, 3)), np.repeat([0, 1, 2], 10)
        assert cluster_metrics(x, y).gamma == pytest.approx(cluster_metrics(7.0 * x, y).gamma)

    def test_cosine_metric(self) -> None:
        x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        stats = cluster_metrics(x, [0, 0, 1, 1], metric="cosine")
        assert stats.inter == pytest.approx(np.pi / 2)
        np.testing.assert_allclose(stats.radii, [0.0, 0.0], atol=1e-7)

    def test_single_class(self) -> None:
        with pytest.raises(DegenerateError):
            cluster_metrics([[1.0], [2.0]], [0, 0])

    def test_coincident_centers(self) -> None:
        with pytest.raises(DegenerateError):
            cluster_metrics([[1.0], [-1.0], [1.0], [-1.0]], [0, 0, 1, 1])

    def test_length_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            cluster_metrics([[1.0]], [0, 1])

    def test_unknown_metric(self) -> None:
        with pytest.raises(ContractError):
            cluster_metrics([[1.0], [2.0]], [0, 1], metric="manhattan")  # type: ignore[arg-type]


def test_feature_report() -> None:
    """Test feature_report combines both probes on the val set."""
    train = np.array([[1.0, 0.0], [0.0, 1.0]])
    val = np.array([[2.0, 0.0], [0.0, 2.0]])
    report = feature_report("frozen", train, [0, 1], val, [0, 1], k_nn=1)
    assert report.name == "frozen"
    assert report.knn == 100.0
    assert report.stats.inter == pytest.approx(np.sqrt(8.0))
