import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adashare import autodiff as ad
from adashare.autodiff import Tensor, finite_diff_check
from adashare.objectives import (
    LossWeights,
    cosine_loss,
    cross_entropy,
    sharing_loss,
    sharing_weights,
    sparsity_loss,
    task_loss,
    total_loss,
)
from adashare.policy import PolicyLogits


def logits_for(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return PolicyLogits(np.log(alpha) - np.log1p(-alpha))


def sharing_oracle(alpha):
    L, K = alpha.shape
    total = 0.0
    for k1, k2 in itertools.combinations(range(K), 2):
        for l in range(1, L + 1):
            total += (L - l) / L * abs(alpha[l - 1, k1] - alpha[l - 1, k2])
    return total


# task losses


def test_cross_entropy_uniform_is_log_c():
    loss = cross_entropy(Tensor(np.zeros((5, 4))), np.array([0, 1, 2, 3, 0]))
    assert loss.item() == pytest.approx(np.log(4))


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(6), y]))
    assert cross_entropy(Tensor(z), y).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("target", [np.array([0, 3]), np.array([-1, 0]), np.array([0.5, 1.0])])
def test_cross_entropy_rejects_bad_indices(target):
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), target)


def test_l1_zero_at_target():
    y = np.random.default_rng(1).standard_normal((4, 3))
    assert task_loss("l1", Tensor(y), y).item() == 0.0


def test_cosine_scale_invariant_and_extremes():
    y = np.random.default_rng(2).standard_normal((5, 3))
    assert cosine_loss(Tensor(2 * y), y).item() == pytest.approx(0.0, abs=1e-12)
    assert cosine_loss(Tensor(-y), y).item() == pytest.approx(2.0)


def test_cosine_rejects_zero_vectors():
    y = np.ones((2, 3))
    y[1] = 0
    with pytest.raises(ValueError):
        cosine_loss(Tensor(np.ones((2, 3))), y)


def test_unknown_loss_kind():
    with pytest.raises(ValueError):
        task_loss("hinge", Tensor(np.zeros((1, 1))), np.zeros((1, 1)))


@pytest.mark.parametrize("kind,target", [
    ("cross_entropy", np.array([0, 2, 1, 1])),
    ("l1", np.random.default_rng(3).standard_normal((4, 3))),
    ("cosine", np.random.default_rng(4).standard_normal((4, 3))),
])
def test_task_loss_gradients(kind, target):
    pred = Tensor(np.random.default_rng(5).standard_normal((4, 3)) + 0.2, requires_grad=True)
    assert finite_diff_check(lambda: task_loss(kind, pred, target), [pred]) < 1e-6


# sparsity


def test_sparsity_at_one_is_zero():
    assert sparsity_loss(logits_for(np.full((3, 2), 1 - 1e-16))).item() == pytest.approx(0.0, abs=1e-12)


def test_sparsity_half_plug_in():
    assert sparsity_loss(PolicyLogits.zeros(2, 2)).item() == pytest.approx(4 * np.log(0.5))


def test_sparsity_step_lowers_every_alpha():
    raw = Tensor(np.random.default_rng(6).standard_normal((4, 3)), requires_grad=True)
    before = 1 / (1 + np.exp(-raw.data))
    ad.backward(sparsity_loss(raw))
    assert (raw.grad > 0).all()
    after = 1 / (1 + np.exp(-(raw.data - 0.1 * raw.grad)))
    assert (after < before).all()


def test_sparsity_gradient_on_raw_logits():
    raw = Tensor(np.random.default_rng(7).standard_normal((3, 3)), requires_grad=True)
    assert finite_diff_check(lambda: sparsity_loss(raw), [raw]) < 1e-6


# sharing


def test_sharing_weights_top_block_zero():
    np.testing.assert_allclose(sharing_weights(4), [0.75, 0.5, 0.25, 0.0])


def test_sharing_identical_columns_zero():
    assert sharing_loss(logits_for(np.tile([[0.2], [0.9], [0.4]], (1, 3)))).item() == 0.0


def test_sharing_plug_in_two_blocks():
    d = 0.3
    alpha = np.array([[0.4, 0.4 + d], [0.5, 0.5]])
    assert sharing_loss(logits_for(alpha)).item() == pytest.approx(0.5 * d, abs=1e-12)


def test_sharing_ignores_top_block():
    alpha = np.array([[0.5, 0.5], [0.5, 0.5], [0.01, 0.99]])
    assert sharing_loss(logits_for(alpha)).item() == pytest.approx(0.0, abs=1e-12)


def test_sharing_single_task_zero():
    assert sharing_loss(PolicyLogits.zeros(4, 1)).item() == 0.0


alpha_arrays = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 4)),
                      elements=st.floats(0.01, 0.99))


@settings(max_examples=60, deadline=None)
@given(alpha_arrays, st.randoms(use_true_random=False))
def test_sharing_matches_oracle_and_permutation(alpha, rnd):
    got = sharing_loss(logits_for(alpha)).item()
    assert got == pytest.approx(sharing_oracle(alpha), rel=1e-9, abs=1e-12)
    perm = list(range(alpha.shape[1]))
    rnd.shuffle(perm)
    assert sharing_loss(logits_for(alpha[:, perm])).item() == pytest.approx(got, rel=1e-9, abs=1e-12)


def test_sharing_shift_invariant_on_alpha():
    alpha = np.array([[0.2, 0.5, 0.3], [0.1, 0.15, 0.4]])
    assert sharing_oracle(alpha + 0.3) == pytest.approx(sharing_oracle(alpha))
    assert sharing_loss(logits_for(alpha + 0.3)).item() == pytest.approx(sharing_loss(logits_for(alpha)).item())


# total


def test_total_without_regularizers_is_weighted_sum():
    losses = [Tensor(1.5), Tensor(0.25)]
    w = LossWeights((1.0, 20.0))
    assert total_loss(losses, PolicyLogits.zeros(3, 2), w).item() == pytest.approx(1.5 + 5.0)


def test_total_linear_in_task_weights():
    l = Tensor(0.7)
    assert total_loss([l, l], None, LossWeights((1.0, 20.0))).item() == pytest.approx(21 * 0.7)


def test_total_accepts_large_task_weight_config():
    w = LossWeights((1.0, 20.0), sparsity=0.05, sharing=0.05)
    lg = PolicyLogits(np.random.default_rng(0).standard_normal((4, 2)))
    got = total_loss([Tensor(0.3), Tensor(0.1)], lg, w).item()
    expect = 0.3 + 2.0 + 0.05 * sparsity_loss(lg).item() + 0.05 * sharing_loss(lg).item()
    assert got == pytest.approx(expect)


@pytest.mark.parametrize("kw", [{"task_weights": (0.0,)}, {"task_weights": (1.0,), "sparsity": -1.0}])
def test_loss_weights_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_total_requires_one_loss_per_task():
    with pytest.raises(ValueError):
        total_loss([Tensor(1.0)], None, LossWeights((1.0, 1.0)))
