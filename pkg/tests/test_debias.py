import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popdyn.debias import (
    DebiasPolicy,
    FalsePositiveIndex,
    apply_policy,
    dscale_alpha,
    fpc_correct,
    fpc_vector,
    rank_popular,
    rank_random,
    scale_scores,
)
from popdyn.mf import ModelParams, rank_topk


def fpc_direct(theta, ks):
    den = 1.0
    for k in ks:
        den *= 1.0 - theta / math.log2(1 + k)
    return 1.0 - (1.0 - theta) / den


def test_rank_random_permutation_and_determinism():
    cands = np.arange(5)
    out = rank_random(cands, 5, np.random.default_rng(1))
    assert sorted(out.tolist()) == list(range(5))
    assert rank_random(cands, 3, np.random.default_rng(9)).tolist() == rank_random(cands, 3, np.random.default_rng(9)).tolist()
    with pytest.raises(ValueError):
        rank_random(cands, 6, np.random.default_rng(0))


def test_rank_random_top1_uniform():
    rng = np.random.default_rng(0)
    m, n = 8, 100_000
    counts = np.bincount([rank_random(np.arange(m), 3, rng)[0] for _ in range(n)], minlength=m)
    p = 1 / m
    assert np.all(np.abs(counts / n - p) <= 3 * math.sqrt(p * (1 - p) / n))


def test_rank_popular():
    a, b, c = 0, 1, 2
    counts = np.array([5, 9, 1])
    assert rank_popular(counts, [a, b, c], 2).tolist() == [b, a]
    counts[c] += 1
    assert rank_popular(counts, [a, b, c], 3).tolist() == [b, a, c]
    assert rank_popular(np.zeros(6), np.arange(6), 3).tolist() == [0, 1, 2]


def test_scale_scores_examples():
    assert scale_scores([0.8], [16], 0.5)[0] == pytest.approx(0.2)
    np.testing.assert_array_equal(scale_scores([0.3, 0.7], [4, 9], 0.0), [0.3, 0.7])
    assert scale_scores([0.6], [0], 2.0)[0] == 0.6
    with pytest.raises(ValueError):
        scale_scores([0.5], [1], -0.1)


def test_scale_matches_formula_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        s, c, a = rng.random(), rng.integers(1, 500), rng.uniform(0, 2)
        assert scale_scores([s], [c], a)[0] == pytest.approx(s / c**a, abs=1e-12)


def test_scale_order_properties():
    out = scale_scores([0.4, 0.6], [7, 7], 0.8)
    assert out[1] > out[0]
    out = scale_scores([0.5, 0.5], [3, 30], 0.2)
    assert out[0] > out[1]


def test_dscale_alpha_schedule():
    assert dscale_alpha(0, 0.01) == 0
    assert dscale_alpha(10, 0.01) == pytest.approx(0.1)
    assert dscale_alpha(500, 0.0) == 0


@pytest.mark.parametrize(
    "theta, ks, expected",
    [(0.5, [], 0.5), (0.5, [1], 0.0), (0.5, [3], 1 / 3), (0.0, [1, 2, 3], 0.0), (1.0, [1, 5], 1.0), (1.0, [4], 1.0)],
)
def test_fpc_examples(theta, ks, expected):
    assert fpc_correct(theta, ks) == pytest.approx(expected, abs=1e-12)


def test_fpc_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        theta = rng.random()
        ks = rng.integers(2, 21, rng.integers(0, 5)).tolist()
        direct = min(max(fpc_direct(theta, ks), 0.0), 1.0)
        assert fpc_correct(theta, ks) == pytest.approx(direct, abs=1e-12)


def test_fpc_rejects_bad_input():
    with pytest.raises(ValueError):
        fpc_correct(1.2, [1])
    with pytest.raises(ValueError):
        fpc_correct(0.5, [0])


def test_fpc_posterior_variant():
    theta, ks = 0.4, [2, 3]
    keep = theta * np.prod([1 - 1 / math.log2(1 + k) for k in ks])
    assert fpc_correct(theta, ks, posterior=True) == pytest.approx(keep / (keep + 1 - theta))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.001, 0.999), st.integers(1, 30), st.integers(0, 6))
def test_fpc_monotone_in_exposure_count(theta, k, f):
    assert fpc_correct(theta, [k] * (f + 1)) <= fpc_correct(theta, [k] * f) + 1e-15


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.lists(st.integers(1, 30), max_size=5))
def test_fpc_monotone_in_theta(a, b, ks):
    lo, hi = min(a, b), max(a, b)
    assert fpc_correct(lo, ks) <= fpc_correct(hi, ks) + 1e-12


def test_false_positive_index_reset_on_click():
    fp = FalsePositiveIndex(2)
    fp.record(0, [4, 5], [1, 2], [False, False])
    fp.record(0, [4], [3], [False])
    assert fp.positions(0, 4) == [1, 3]
    fp.record(0, [4], [2], [True])
    assert fp.positions(0, 4) == []
    fp.record(0, [4], [1], [False])
    assert fp.positions(0, 4) == []
    assert fp.positions(0, 5) == [2]


@pytest.fixture
def model():
    return ModelParams.init(3, 12, 4, np.random.default_rng(3), scale=1.0)


def test_policy_none_is_rank_topk(model):
    cands = np.arange(12)
    out = apply_policy(DebiasPolicy(), model, 1, cands, np.zeros(12), FalsePositiveIndex(3), 5, 4)
    assert out.tolist() == rank_topk(model, 1, cands, 4).tolist()


def test_fpc_without_history_is_none(model):
    cands = np.arange(12)
    a = apply_policy(DebiasPolicy("fpc"), model, 0, cands, np.arange(12), FalsePositiveIndex(3), 5, 5)
    b = apply_policy(DebiasPolicy(), model, 0, cands, np.arange(12), FalsePositiveIndex(3), 5, 5)
    assert a.tolist() == b.tolist()


def test_dscale_at_first_retrain_is_none(model):
    cands = np.arange(12)
    counts = np.arange(12) * 3
    a = apply_policy(DebiasPolicy("dscale", delta=0.5), model, 2, cands, counts, None, 0, 6)
    b = apply_policy(DebiasPolicy(), model, 2, cands, counts, None, 0, 6)
    assert a.tolist() == b.tolist()


def test_fpc_demotes_rejected_item(model):
    cands = np.arange(12)
    top = rank_topk(model, 0, cands, 1)[0]
    fp = FalsePositiveIndex(3)
    fp.record(0, [top], [1], [False])
    out = apply_policy(DebiasPolicy("fpc"), model, 0, cands, np.zeros(12), fp, 0, 3)
    assert top not in out.tolist()


@pytest.mark.parametrize("kind", ["none", "scale", "dscale", "fpc", "fpc_dscale"])
def test_policy_output_is_valid_k_subset(model, kind):
    rng = np.random.default_rng(0)
    fp = FalsePositiveIndex(3)
    fp.record(1, [0, 3, 7], [1, 4, 9], [False, False, False])
    policy = DebiasPolicy(kind, alpha=0.4, delta=0.05)
    cands = np.sort(rng.choice(12, 8, replace=False))
    counts = rng.integers(0, 40, 12)
    out = apply_policy(policy, model, 1, cands, counts, fp, 7, 5)
    assert len(set(out.tolist())) == 5 and set(out.tolist()) <= set(cands.tolist())
    assert out.tolist() == apply_policy(policy, model, 1, cands, counts, fp, 7, 5).tolist()


def test_policy_validation():
    with pytest.raises(ValueError):
        DebiasPolicy("scale", alpha=-1)
    with pytest.raises(ValueError):
        DebiasPolicy("dscale", delta=-0.1)
    with pytest.raises(ValueError):
        DebiasPolicy("bogus")
    assert DebiasPolicy("fpc_dscale", delta=0.01).alpha_at(20) == pytest.approx(0.2)
    assert DebiasPolicy("scale", alpha=0.3).alpha_at(20) == 0.3


@pytest.mark.parametrize("posterior", [False, True])
def test_fpc_vector_matches_scalar(posterior):
    rng = np.random.default_rng(11)
    for _ in range(300):
        m = 30
        th = rng.random(m)
        th[rng.random(m) < 0.1] = 1.0
        th[rng.random(m) < 0.05] = 0.0
        fp = {int(i): rng.integers(1, 11, size=rng.integers(0, 5)).tolist() for i in rng.choice(m, 10, replace=False)}
        ref = th.copy()
        for i, ks in fp.items():
            ref[i] = fpc_correct(th[i], ks, posterior)
        np.testing.assert_allclose(fpc_vector(th, fp, posterior), ref, rtol=0, atol=1e-15)
