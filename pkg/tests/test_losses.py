import math

import numpy as np
import pytest

from kgdiff import autodiff as ad
from kgdiff.losses import bce_loss, kl_loss

from gradcheck import check


def test_bce_at_zero_logits_is_log_two():
    y = np.array([[1.0, 0.0, 0.0, 1.0]])
    assert bce_loss(np.zeros((1, 4)), y).item() == pytest.approx(math.log(2), rel=1e-15)


def test_bce_saturates_without_overflow():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    assert bce_loss(np.where(y == 1, 30.0, -30.0), y).item() < 1e-9
    assert np.isfinite(bce_loss(np.where(y == 1, -800.0, 800.0), y).item())


def test_bce_label_smoothing_moves_targets_inward():
    y = np.array([1.0, 0.0])
    assert bce_loss(np.array([30.0, -30.0]), y, smoothing=0.2).item() > 1.0


def test_bce_gradient():
    rng = np.random.default_rng(0)
    y = (rng.random((3, 6)) < 0.3).astype(float)
    assert check(lambda x: bce_loss(x, y), [rng.standard_normal((3, 6)) * 3]) < 1e-4


def test_bce_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        bce_loss(np.zeros(3), np.zeros(4))


def test_kl_of_identical_scores_is_zero():
    x = np.random.default_rng(0).standard_normal((4, 7))
    assert kl_loss(x, x).item() == 0.0
    assert kl_loss(x, x + 3.0).item() == pytest.approx(0.0, abs=1e-15)  # shift-invariant softmax


def test_kl_point_mass_against_uniform():
    assert kl_loss(np.array([30.0, -30.0]), np.zeros(2)).item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("kind", ["softmax", "sigmoid"])
def test_kl_is_non_negative_and_positive_off_the_diagonal(kind):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a, b = rng.standard_normal((1, 5)) * 3, rng.standard_normal((1, 5)) * 3
        assert kl_loss(a, b, kind).item() > 0.0
    assert kl_loss(a, a, kind).item() == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("kind", ["softmax", "sigmoid"])
def test_kl_gradient(kind):
    rng = np.random.default_rng(2)
    target = rng.standard_normal((3, 5))
    assert check(lambda x: kl_loss(target, x, kind), [rng.standard_normal((3, 5))]) < 1e-4


def test_kl_sends_no_gradient_to_the_target():
    target = ad.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    guess = ad.Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
    kl_loss(target, guess).backward()
    assert target.grad is None and guess.grad is not None


def test_kl_rejects_unknown_kind():
    with pytest.raises(ValueError):
        kl_loss(np.zeros(2), np.zeros(2), "js")
