import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adashare import autodiff as ad
from adashare.autodiff import Tensor, finite_diff_check
from adashare.policy import (
    AnnealSchedule,
    DecisionMatrix,
    GumbelDraw,
    PolicyLogits,
    argmax_decision,
    curriculum_mask,
    draw_gumbel,
    execute_probability,
    gumbel_from_uniform,
    hard_decision,
    policy_from_csv,
    policy_to_csv,
    random_policy,
    sample_policies,
    soft_decision,
    soft_decision_tensor,
    temperature,
)


def logits_for(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return PolicyLogits(np.log(alpha) - np.log1p(-alpha))


def zero_draw(L, K):
    return GumbelDraw(np.zeros((L, K, 2)))


# execute probability


def test_execute_probability_at_zero():
    assert execute_probability(PolicyLogits.zeros(2, 2), 0, 1) == 0.5


def test_execute_probability_large_logit():
    raw = np.zeros((1, 1))
    raw[0, 0] = 10.0
    assert execute_probability(PolicyLogits(raw), 0, 0) == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-12)
    assert execute_probability(PolicyLogits(raw), 0, 0) == pytest.approx(0.9999546, abs=1e-7)


@settings(max_examples=50)
@given(st.floats(-30, 30))
def test_logistic_symmetry(x):
    a = PolicyLogits(np.array([[x, -x]])).alpha()
    assert a[0, 0] == pytest.approx(1.0 - a[0, 1], abs=1e-12)
    assert 0.0 < a[0, 0] < 1.0


def test_execute_probability_out_of_range():
    with pytest.raises(IndexError):
        execute_probability(PolicyLogits.zeros(2, 2), 2, 0)


def test_policy_param_count_grows_by_block_count():
    lg = PolicyLogits.zeros(8, 2)
    assert lg.n_params == 16
    assert lg.with_task_added().n_params == 24


# gumbel noise


def test_gumbel_plug_in_values():
    assert gumbel_from_uniform(np.array([math.exp(-1)]))[0] == pytest.approx(0.0, abs=1e-15)
    assert gumbel_from_uniform(np.array([math.exp(-math.e)]))[0] == pytest.approx(-1.0)


def test_gumbel_mean_is_euler_mascheroni():
    g = draw_gumbel(1000, 500, seed=11).noise
    assert g.size == 10**6
    assert abs(g.mean() - 0.5772156649) < 0.01


def test_gumbel_reproducible_and_finite():
    a, b = draw_gumbel(4, 3, 5), draw_gumbel(4, 3, 5)
    assert a.noise.tobytes() == b.noise.tobytes()
    assert np.isfinite(a.noise).all()


# soft decisions


def test_soft_decision_zero_noise_unit_tau_equals_pi():
    alpha = np.array([[0.2, 0.7], [0.5, 0.9]])
    v = soft_decision(logits_for(alpha), zero_draw(2, 2), 1.0).v
    np.testing.assert_allclose(v[..., 1], alpha, atol=1e-12)


@pytest.mark.parametrize("tau", [0.1, 1.0, 5.0])
def test_soft_decision_normalized(tau):
    rng = np.random.default_rng(2)
    lg = PolicyLogits(rng.standard_normal((6, 3)) * 3)
    v = soft_decision(lg, draw_gumbel(6, 3, 9), tau).v
    np.testing.assert_allclose(v.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("tau", [0.05, 1.0, 7.0])
def test_soft_decision_equal_noise_half(tau):
    noise = np.full((1, 1, 2), 0.37)
    v = soft_decision(PolicyLogits.zeros(1, 1), GumbelDraw(noise), tau).v
    np.testing.assert_allclose(v[0, 0], [0.5, 0.5], atol=1e-15)


def test_soft_decision_low_tau_is_one_hot():
    v = soft_decision(logits_for([[0.7]]), zero_draw(1, 1), 0.01).v
    assert v[0, 0, 1] == pytest.approx(1.0, abs=1e-6)
    assert v[0, 0, 0] == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_soft_decision_rejects_nonpositive_tau(tau):
    with pytest.raises(ValueError):
        soft_decision(PolicyLogits.zeros(1, 1), zero_draw(1, 1), tau)


def test_soft_argmax_matches_hard_for_any_tau():
    rng = np.random.default_rng(4)
    lg = PolicyLogits(rng.standard_normal((8, 4)))
    draw = draw_gumbel(8, 4, 21)
    hard = hard_decision(lg, draw).u
    for tau in (0.1, 0.5, 1.0, 5.0, 50.0):
        v = soft_decision(lg, draw, tau).v
        np.testing.assert_array_equal((v[..., 1] >= v[..., 0]).astype(int), hard)


def test_soft_decision_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    raw = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    noise = draw_gumbel(3, 2, 1).noise
    w = rng.standard_normal((3, 2, 2))
    err = finite_diff_check(lambda: ad.tsum(soft_decision_tensor(raw, noise, 1.0) * w), [raw])
    assert err < 1e-5


# hard decisions


def test_hard_decision_plug_in():
    lg = logits_for([[0.7]])
    assert hard_decision(lg, zero_draw(1, 1)).u[0, 0] == 1
    noise = np.array([[[5.0, 0.0]]])
    assert hard_decision(lg, GumbelDraw(noise)).u[0, 0] == 0


def test_hard_decision_tie_selects():
    assert hard_decision(PolicyLogits.zeros(2, 2), zero_draw(2, 2)).u.sum() == 4


def test_gumbel_max_frequency():
    lg = logits_for(np.full((100, 1000), 0.7))
    u = hard_decision(lg, draw_gumbel(100, 1000, 3)).u
    assert abs(u.mean() - 0.7) < 0.01


# annealing and curriculum


def test_temperature_schedule_points():
    s = AnnealSchedule(5.0, 0.5, 100)
    assert temperature(s, 0) == 5.0
    assert temperature(s, 100) == 0.5
    assert temperature(s, 50) == pytest.approx(2.75)


@pytest.mark.parametrize("t", [-1, 101])
def test_temperature_out_of_range(t):
    with pytest.raises(ValueError):
        temperature(AnnealSchedule(5.0, 0.5, 100), t)


def test_curriculum_opens_from_output_end():
    assert curriculum_mask(1, 16).open_blocks == {15}  # 0-based: the last block
    assert curriculum_mask(3, 16).open_blocks == {13, 14, 15}
    assert curriculum_mask(16, 16).open_blocks == set(range(16))
    assert curriculum_mask(40, 16).open_blocks == set(range(16))
    assert curriculum_mask(0, 16).open_blocks == frozenset()


# sampling and random baselines


def test_saturated_policy_samples_equal_argmax():
    rng = np.random.default_rng(0)
    lg = PolicyLogits(np.where(rng.random((6, 3)) > 0.5, 40.0, -40.0))
    samples = sample_policies(lg, 8, seed=5)
    assert all(s == argmax_decision(lg) for s in samples)


def test_sample_policies_deterministic():
    lg = PolicyLogits(np.random.default_rng(1).standard_normal((4, 2)))
    a = sample_policies(lg, 5, 10)
    b = sample_policies(lg, 5, 10)
    assert [x.to_list() for x in a] == [x.to_list() for x in b]


def test_sample_policies_half_rate():
    samples = sample_policies(PolicyLogits.zeros(8, 4), 8, seed=0)
    rate = np.mean([s.u.mean() for s in samples])
    assert abs(rate - 0.5) <= 0.2


def test_random_policy_no_skips_is_all_ones():
    ref = DecisionMatrix.ones(4, 3)
    for seed in range(5):
        for mode in ("match_total", "match_per_task"):
            assert random_policy(mode, ref, seed).u.sum() == 12


def test_random_policy_matches_column_sums():
    ref = DecisionMatrix(np.array([[1, 0], [0, 0], [1, 1], [1, 0]]))
    for seed in range(20):
        out = random_policy("match_per_task", ref, seed)
        np.testing.assert_array_equal(out.u.sum(axis=0), ref.u.sum(axis=0))
        assert out.provenance == "random_baseline"


def test_random_policy_match_total_uniform():
    ref = DecisionMatrix(np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0], [1, 1, 1]]))
    skips = (ref.u == 0).sum()
    freq = np.mean([1 - random_policy("match_total", ref, s).u for s in range(1000)], axis=0)
    assert np.all(np.abs(freq - skips / ref.u.size) < 0.05)


def test_random_policy_unknown_mode():
    with pytest.raises(ValueError):
        random_policy("shuffle", DecisionMatrix.ones(2, 2), 0)


def test_decision_matrix_validates_entries():
    with pytest.raises(ValueError):
        DecisionMatrix(np.array([[0, 2]]))


# CSV export


def test_policy_csv_round_trip():
    lg = PolicyLogits(np.random.default_rng(3).standard_normal((3, 2)) * 5)
    text = policy_to_csv(lg, ["seg", "depth"])
    lines = text.splitlines()
    assert lines[0] == "block,task,logit,alpha"
    assert [ln.split(",")[:2] for ln in lines[1:3]] == [["0", "seg"], ["0", "depth"]]
    back, names = policy_from_csv(text)
    assert names == ["seg", "depth"]
    assert back.raw.tobytes() == lg.raw.tobytes()
    assert policy_to_csv(back, names) == text


def test_policy_csv_rejects_bad_header():
    with pytest.raises(ValueError):
        policy_from_csv("a,b\n1,2\n")
