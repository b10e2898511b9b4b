"""Tests for losses module."""

import numpy as np
import pytest

from ltpeft.autodiff import Tensor, grad_check, parameter
from ltpeft.errors import ConfigError, ContractError, DegenerateError, ShapeError
from ltpeft.losses import (
    HALF_NORMAL_MEAN,
    ClassCounts,
    GclConfig,
    ScheduleState,
    agcl_loss,
    beta_schedule,
    classification_loss,
    cross_entropy,
    gcl_adjust,
    key_loss,
    mse_loss,
    noise_magnitude,
    phase2_loss,
)

TOL = 1e-4


@pytest.fixture
def scores() -> Tensor:
    return parameter(np.random.default_rng(0).normal(0.0, 2.0, size=(4, 5)))


@pytest.fixture
def labels() -> np.ndarray:
    return np.array([0, 3, 4, 1])


@pytest.fixture
def counts() -> ClassCounts:
    return ClassCounts(np.array([100, 40, 10, 4, 1]))


class TestConfig:
    """Test GclConfig and ClassCounts validation."""

    def test_defaults(self) -> None:
        cfg = GclConfig()
        assert (cfg.lambda_plus, cfg.lambda_minus) == (0.0, 4.0)
        assert cfg.formula_variant == "asl_corrected"

    @pytest.mark.parametrize(
        "kwargs",
        [{"alpha": 0.0}, {"lambda_minus": -1.0}, {"formula_variant": "other"}, {"kind": "focal"}],
    )
    def test_invalid(self, kwargs: dict) -> None:
        with pytest.raises(ConfigError):
            GclConfig(**kwargs)

    def test_counts_need_every_class(self) -> None:
        with pytest.raises(ContractError):
            ClassCounts(np.array([3, 0]))

    def test_log_gap(self, counts: ClassCounts) -> None:
        np.testing.assert_allclose(counts.log_gap, np.log(100.0) - np.log([100, 40, 10, 4, 1]))
        assert counts.log_gap[0] == 0.0


class TestGclAdjust:
    """Test the logit adjustment."""

    def test_uniform_counts_leave_scores_unchanged(self, scores: Tensor) -> None:
        uniform = ClassCounts(np.full(5, 7))
        rng = np.random.default_rng(1)
        adjusted = gcl_adjust(scores, uniform, GclConfig(), rng, train=True)
        np.testing.assert_array_equal(adjusted.data, scores.data)

    def test_fixed_noise(self, scores: Tensor, counts: ClassCounts) -> None:
        adjusted = gcl_adjust(scores, counts, GclConfig(alpha=2.0), None, True, noise=np.ones(5))
        np.testing.assert_allclose(adjusted.data, 2.0 * (scores.data - counts.log_gap))

    def test_eval_uses_expected_noise(self) -> None:
        magnitude = noise_magnitude((2, 3), GclConfig(), None, train=False)
        np.testing.assert_array_equal(magnitude, np.full((2, 3), HALF_NORMAL_MEAN))

    def test_disabled_noise_uses_expected_noise(self) -> None:
        magnitude = noise_magnitude((2,), GclConfig(noise_enabled=False), None, train=True)
        np.testing.assert_array_equal(magnitude, np.full(2, HALF_NORMAL_MEAN))

    def test_train_draw_is_non_negative_and_seeded(self) -> None:
        a = noise_magnitude((50,), GclConfig(), np.random.default_rng(3), True)
        b = noise_magnitude((50,), GclConfig(), np.random.default_rng(3), True)
        assert (a >= 0).all()
        np.testing.assert_array_equal(a, b)

    def test_train_needs_rng(self) -> None:
        with pytest.raises(ContractError):
            noise_magnitude((2,), GclConfig(), None, True)

    def test_class_mismatch(self, scores: Tensor) -> None:
        with pytest.raises(ShapeError):
            gcl_adjust(scores, ClassCounts(np.array([1, 2])), GclConfig(), None, False)

    def test_tail_classes_pushed_down(self, counts: ClassCounts) -> None:
        flat = Tensor(np.zeros((1, 5)))
        adjusted = gcl_adjust(flat, counts, GclConfig(), None, False)
        assert np.all(np.diff(adjusted.data[0]) < 0)


class TestAgcl:
    """Test the asymmetric loss."""

    def test_matches_closed_form(self, labels: np.ndarray) -> None:
        v = np.random.default_rng(2).normal(size=(4, 5))
        p = np.exp(v) / np.exp(v).sum(axis=1, keepdims=True)
        cfg = GclConfig(lambda_plus=1.0, lambda_minus=2.0)
        expected = []
        for row, y in enumerate(labels):
            pos = (1 - p[row, y]) * np.log(p[row, y])
            neg = sum(p[row, i] ** 2 * np.log(1 - p[row, i]) for i in range(5) if i != y)
            expected.append(-(pos + neg))
        np.testing.assert_allclose(agcl_loss(Tensor(v), labels, cfg).item(), np.mean(expected))

    def test_literal_variant_uses_log_p(self, labels: np.ndarray) -> None:
        v = np.random.default_rng(2).normal(size=(4, 5))
        p = np.exp(v) / np.exp(v).sum(axis=1, keepdims=True)
        cfg = GclConfig(lambda_minus=1.0, formula_variant="paper_literal")
        expected = []
        for row, y in enumerate(labels):
            neg = sum(p[row, i] * np.log(p[row, i]) for i in range(5) if i != y)
            expected.append(-(np.log(p[row, y]) + neg))
        np.testing.assert_allclose(agcl_loss(Tensor(v), labels, cfg).item(), np.mean(expected))

    def test_zero_focusing_without_negatives_is_ce(self, scores: Tensor, labels: np.ndarray) -> None:
        """With lambda+ = 0 and an overwhelming lambda-, only the CE term survives."""
        cfg = GclConfig(lambda_plus=0.0, lambda_minus=1000.0)
        np.testing.assert_allclose(
            agcl_loss(scores, labels, cfg).item(), cross_entropy(scores, labels).item(), rtol=1e-5
        )

    @pytest.mark.parametrize("variant", ["asl_corrected", "paper_literal"])
    def test_gradient(self, scores: Tensor, labels: np.ndarray, counts: ClassCounts, variant: str) -> None:
        cfg = GclConfig(lambda_plus=1.0, formula_variant=variant)  # type: ignore[arg-type]
        noise = np.abs(np.random.default_rng(4).normal(size=(4, 5)))
        error = grad_check(lambda s: classification_loss(s, labels, counts, cfg, None, True, noise), [scores])
        assert error < TOL

    def test_bad_label(self, scores: Tensor) -> None:
        with pytest.raises(ContractError):
            agcl_loss(scores, [0, 1, 2, 9], GclConfig())


class TestClassificationLoss:
    """Test the loss-kind switch."""

    def test_ce_ignores_counts(self, scores: Tensor, labels: np.ndarray, counts: ClassCounts) -> None:
        value = classification_loss(scores, labels, counts, GclConfig(kind="ce"), None, True)
        assert value.item() == cross_entropy(scores, labels).item()

    def test_gcl_is_ce_of_adjusted(self, scores: Tensor, labels: np.ndarray, counts: ClassCounts) -> None:
        cfg = GclConfig(kind="gcl")
        noise = np.full((4, 5), 0.5)
        adjusted = gcl_adjust(scores, counts, cfg, None, True, noise)
        value = classification_loss(scores, labels, counts, cfg, None, True, noise)
        assert value.item() == pytest.approx(cross_entropy(adjusted, labels).item())

    def test_cross_entropy_gradient(self, scores: Tensor, labels: np.ndarray) -> None:
        assert grad_check(lambda s: cross_entropy(s, labels), [scores]) < TOL


class TestKeyLoss:
    """Test the query-key loss."""

    def test_aligned_keys_give_zero(self) -> None:
        keys = Tensor([[2.0, 0.0], [5.0, 0.0]])
        assert key_loss([1.0, 0.0], keys).item() == pytest.approx(0.0)

    def test_orthogonal_keys_give_one(self) -> None:
        assert key_loss([1.0, 0.0], Tensor([[0.0, 3.0]])).item() == pytest.approx(1.0)

    def test_gradient_reaches_keys(self) -> None:
        keys = parameter(np.random.default_rng(5).normal(size=(3, 2, 4)))
        query = np.random.default_rng(6).normal(size=(3, 4))
        assert grad_check(lambda k: key_loss(query, k), [keys]) < TOL

    def test_zero_query(self) -> None:
        with pytest.raises(DegenerateError):
            key_loss([0.0, 0.0], Tensor([[1.0, 0.0]]))

    def test_zero_key(self) -> None:
        with pytest.raises(DegenerateError):
            key_loss([1.0, 0.0], Tensor([[0.0, 0.0]]))

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            key_loss([1.0, 0.0, 0.0], Tensor([[1.0, 0.0]]))


class TestSchedule:
    """Test the instance-batch weight."""

    def test_endpoints(self) -> None:
        assert beta_schedule(ScheduleState(0.5, 40, 0), "instance") == 0.5
        assert beta_schedule(ScheduleState(0.5, 40, 40), "instance") == 0.0
        assert beta_schedule(ScheduleState(0.5, 40, 20), "instance") == 0.25

    def test_balanced_is_one(self) -> None:
        assert beta_schedule(ScheduleState(0.5, 40, 13), "balanced") == 1.0

    def test_epoch_range(self) -> None:
        with pytest.raises(ContractError):
            ScheduleState(0.5, 10, 11)

    def test_unknown_kind(self) -> None:
        with pytest.raises(ContractError):
            beta_schedule(ScheduleState(), "mixed")  # type: ignore[arg-type]


class TestPhase2Loss:
    """Test the composite phase-2 loss."""

    def test_decomposes(self, scores: Tensor, labels: np.ndarray, counts: ClassCounts) -> None:
        keys = Tensor(np.random.default_rng(7).normal(size=(4, 2, 5)))
        query = np.random.default_rng(8).normal(size=(4, 5))
        noise = np.full((4, 5), 0.3)
        cfg = GclConfig()
        total = phase2_loss(scores, labels, query, keys, 0.35, counts, cfg, None, True, noise).item()
        parts = 0.35 * classification_loss(scores, labels, counts, cfg, None, True, noise).item() + key_loss(query, keys).item()
        assert abs(total - parts) < 1e-12

    def test_gradient(self, scores: Tensor, labels: np.ndarray, counts: ClassCounts) -> None:
        keys = parameter(np.random.default_rng(7).normal(size=(4, 2, 5)))
        query = np.random.default_rng(8).normal(size=(4, 5))
        noise = np.full((4, 5), 0.3)

        def loss(s: Tensor, k: Tensor) -> Tensor:
            return phase2_loss(s, labels, query, k, 0.5, counts, GclConfig(), None, True, noise)

        assert grad_check(loss, [scores, keys]) < TOL


class TestMse:
    """Test the scorer loss."""

    def test_scalar(self) -> None:
        assert mse_loss(0.75, 1.0).item() == pytest.approx(0.0625)

    def test_gradient(self) -> None:
        w = parameter([0.2, 0.9, 0.4])
        assert grad_check(lambda x: mse_loss(x, [1.0, 0.0, 1.0]), [w]) < 1e-6


class TestWorkedValues:
    """Test hand-computed loss values."""

    def test_adjust_two_classes(self) -> None:
        adjusted = gcl_adjust(Tensor([[0.5, 0.5]]), ClassCounts(np.array([100, 10])), GclConfig(), None, True, noise=1.0)
        np.testing.assert_allclose(adjusted.data, [[0.5, -1.802585]], atol=1e-6)

    def test_eval_adjust_is_deterministic(self, scores: Tensor, counts: ClassCounts) -> None:
        a = gcl_adjust(scores, counts, GclConfig(), np.random.default_rng(0), train=False)
        b = gcl_adjust(scores, counts, GclConfig(), np.random.default_rng(1), train=False)
        np.testing.assert_array_equal(a.data, b.data)

    def test_agcl_without_focusing(self) -> None:
        v = Tensor(np.log([[0.7, 0.3]]))
        cfg = GclConfig(lambda_plus=0.0, lambda_minus=0.0)
        assert agcl_loss(v, [0], cfg).item() == pytest.approx(0.71335, abs=1e-5)

    @pytest.mark.parametrize("variant", ["asl_corrected", "paper_literal"])
    def test_agcl_perfect_prediction(self, variant: str) -> None:
        v = Tensor([[40.0, 0.0, 0.0]])
        cfg = GclConfig(formula_variant=variant)  # type: ignore[arg-type]
        assert agcl_loss(v, [0], cfg).item() == pytest.approx(0.0, abs=1e-12)

    def test_key_loss_half(self) -> None:
        keys = Tensor([[1.0, 0.0], [0.0, 1.0]])
        assert key_loss([1.0, 0.0], keys).item() == pytest.approx(0.5)

    def test_phase2_beta_zero_is_key_loss(self, scores: Tensor, labels: np.ndarray, counts: ClassCounts) -> None:
        keys = Tensor(np.random.default_rng(7).normal(size=(4, 2, 5)))
        query = np.random.default_rng(8).normal(size=(4, 5))
        total = phase2_loss(scores, labels, query, keys, 0.0, counts, GclConfig(), None, False)
        assert total.item() == pytest.approx(key_loss(query, keys).item(), abs=1e-12)

    def test_phase2_orthogonal_keys_perfect_prediction(self) -> None:
        scores = Tensor([[60.0, 0.0]])
        keys = Tensor([[[0.0, 1.0]]])
        counts = ClassCounts(np.array([5, 5]))
        total = phase2_loss(scores, [0], [[1.0, 0.0]], keys, 0.5, counts, GclConfig(), None, False)
        assert total.item() == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize(
        ("predicted", "target", "expected"), [(1.0, 1.0, 0.0), (0.0, 1.0, 1.0), (0.3, 0.0, 0.09)]
    )
    def test_mse(self, predicted: float, target: float, expected: float) -> None:
        assert mse_loss(predicted, target).item() == pytest.approx(expected)
