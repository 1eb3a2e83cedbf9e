import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseseg import autodiff as ad
from sparseseg.config import kept_count
from sparseseg.errors import ConfigError, ContractError, ParameterError
from sparseseg.gradcheck import check_function, rel_error
from sparseseg.layers import module_rng
from sparseseg.stp import (FrozenSelection, ScoreNet, StpConfig, _surrogate_keep, apply_stp,
                           estimate_scores, gumbel_from_uniform, inclusion_frequencies, sample_gumbel,
                           soft_topk_mask, straight_through_keep, topk_mask)
from sparseseg.tokens import CLS_POSITION, TokenSequence

EULER_GAMMA = 0.5772156649015329


def scorer(dim=8, seed=0):
    return ScoreNet(module_rng(seed, "score"), dim, np.float64)


def sequence(b, n, dim, seed=0, cls=False):
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(b, n + cls, dim))
    pos = np.tile(np.arange(n), (b, 1))
    if cls:
        pos = np.concatenate([np.full((b, 1), CLS_POSITION), pos], axis=1)
    return TokenSequence(ad.Tensor(tokens, requires_grad=True), pos, has_cls=cls)


# -- kept count ---------------------------------------------------------------

@pytest.mark.parametrize("n,r,k", [(64, 0.75, 16), (1728, 0.9, 173), (173, 0.9, 17), (17, 0.9, 2),
                                   (64, 0.5, 32), (5, 0.9, 1), (3, 0.5, 2), (64, 0.0, 64)])
def test_kept_count_nearest_integer(n, r, k):
    assert kept_count(n, r) == k


# -- scores -------------------------------------------------------------------

def test_scores_in_open_unit_interval():
    s = estimate_scores(sequence(2, 10, 8).tokens, scorer()).data
    assert s.shape == (2, 10)
    assert np.all((s > 0) & (s < 1))


def test_scores_permutation_equivariant():
    z = sequence(1, 7, 8, seed=1).tokens
    perm = np.random.default_rng(2).permutation(7)
    net = scorer()
    s = estimate_scores(z, net).data
    sp = estimate_scores(ad.Tensor(z.data[:, perm]), net).data
    np.testing.assert_allclose(sp, s[:, perm], rtol=1e-12)


def test_single_token_score_depends_only_on_itself():
    net = scorer()
    z = np.random.default_rng(3).normal(size=(1, 1, 8))
    s1 = estimate_scores(ad.Tensor(z), net).data
    hidden = ad.gelu(net.local(ad.Tensor(z))).data
    joint = np.concatenate([z, hidden], axis=-1)
    manual = 1 / (1 + np.exp(-net.fc2(ad.gelu(net.fc1(ad.Tensor(joint)))).data[..., 0]))
    np.testing.assert_allclose(s1, manual, rtol=1e-12)


# -- gumbel -------------------------------------------------------------------

def test_gumbel_at_inverse_e_is_zero():
    assert gumbel_from_uniform(np.array(1 / math.e)) == pytest.approx(0.0, abs=1e-15)


def test_gumbel_mean_is_euler_gamma():
    g = sample_gumbel(1_000_000, np.random.default_rng(0))
    assert abs(g.mean() - EULER_GAMMA) < 0.01


def test_gumbel_deterministic_per_seed():
    a = sample_gumbel(50, np.random.default_rng(9))
    b = sample_gumbel(50, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))


# -- masks --------------------------------------------------------------------

def test_keep_everything():
    hard, _ = soft_topk_mask(np.array([0.3, 0.2, 0.9, 0.1]), 4, 1.0, training=False)
    np.testing.assert_array_equal(hard, 1.0)


def test_inference_topk_example():
    hard, soft = soft_topk_mask(np.array([0.9, 0.1, 0.5, 0.7]), 2, 1.0, training=False)
    np.testing.assert_array_equal(hard, [1, 0, 0, 1])
    assert soft.data.sum() == pytest.approx(1.0)


def test_ties_go_to_lower_index():
    np.testing.assert_array_equal(topk_mask(np.array([0.5, 0.5, 0.5, 0.2]), 2), [1, 1, 0, 0])


@pytest.mark.parametrize("k", [0, 5])
def test_k_out_of_range(k):
    with pytest.raises(ParameterError):
        soft_topk_mask(np.full(4, 0.5), k, 1.0, training=False)


def test_inference_rejects_noise():
    with pytest.raises(ContractError):
        soft_topk_mask(np.full(4, 0.5), 2, 1.0, gumbel=np.ones(4), training=False)


def test_large_temperature_gives_uniform_soft_mask_and_same_hard_mask():
    s = np.array([0.95, 0.02, 0.4, 0.6, 0.33])
    hard1, _ = soft_topk_mask(s, 3, 1.0, training=False)
    hard2, soft = soft_topk_mask(s, 3, 1e6, training=False)
    np.testing.assert_array_equal(hard1, hard2)
    assert np.abs(soft.data - 0.2).max() < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.data())
def test_mask_contracts(n, data):
    k = data.draw(st.integers(1, n))
    seed = data.draw(st.integers(0, 2 ** 32 - 1))
    tau = data.draw(st.sampled_from([0.01, 0.1, 1.0, 10.0]))
    rng = np.random.default_rng(seed)
    s = np.clip(rng.uniform(0, 1, size=(3, n)), 1e-6, 1.0)
    hard, soft = soft_topk_mask(s, k, tau, sample_gumbel((3, n), rng), training=True)
    assert set(np.unique(hard)) <= {0.0, 1.0}
    np.testing.assert_array_equal(hard.sum(axis=1), k)
    np.testing.assert_allclose(soft.data.sum(axis=1), 1.0, atol=1e-6)
    # shifting every log-score by a constant leaves the selection unchanged
    base, _ = soft_topk_mask(s, k, tau, training=False)
    shifted, _ = soft_topk_mask(s * 0.5, k, tau, training=False)
    np.testing.assert_array_equal(shifted, base)


def test_equal_scores_give_symmetric_inclusion():
    freqs = inclusion_frequencies(np.full(6, 0.5), 2, 100_000, np.random.default_rng(0))
    assert np.abs(freqs - 1 / 3).max() < 0.01


def test_inclusion_is_monotone_in_score():
    s = np.array([0.05, 0.2, 0.35, 0.5, 0.7, 0.9])
    freqs = inclusion_frequencies(s, 2, 100_000, np.random.default_rng(1))
    assert np.all(np.diff(freqs) >= 0)
    np.testing.assert_allclose(freqs.sum(), 2.0)


# -- straight-through keep ----------------------------------------------------

def _toy(seed=0, n=6, dim=4, k=3):
    rng = np.random.default_rng(seed)
    z = ad.Tensor(rng.normal(size=(1, n, dim)), requires_grad=True)
    logit_src = ad.Tensor(rng.normal(size=(1, n)), requires_grad=True)
    g = sample_gumbel((1, n), rng)
    probe = ad.Tensor(rng.normal(size=(1, k, dim)))
    return z, logit_src, g, probe, k


def _scores(src):
    return ad.clamp(ad.sigmoid(src), 1e-6, 1.0)


def test_straight_through_forward_is_a_plain_gather():
    z, src, g, _, k = _toy()
    hard, soft = soft_topk_mask(_scores(src), k, 1.0, g)
    idx = np.sort(np.argsort(-hard, axis=1, kind="stable")[:, :k], axis=1)
    out = straight_through_keep(z, hard, soft, idx)
    np.testing.assert_array_equal(out.data, ad.gather_tokens(z, idx).data)


def test_straight_through_gradient_matches_surrogate_and_reaches_pruned_scores():
    z, src, g, probe, k = _toy(seed=4)

    def st_loss():
        hard, soft = soft_topk_mask(_scores(src), k, 1.0, g)
        idx = np.sort(np.argsort(-hard, axis=1, kind="stable")[:, :k], axis=1)
        return (straight_through_keep(z, hard, soft, idx) * probe).sum(), hard, soft, idx

    loss, hard, soft, idx = st_loss()
    loss.backward()
    analytic = [z.grad.copy(), src.grad.copy()]
    pruned = np.flatnonzero(hard[0] == 0)
    assert np.all(np.abs(analytic[1][0, pruned]) > 0)

    frozen = FrozenSelection(idx, 1.0 - np.take_along_axis(soft.data, idx, axis=1))

    def surrogate():
        _, soft_s = soft_topk_mask(_scores(src), k, 1.0, g)
        return (_surrogate_keep(z, soft_s, frozen) * probe).sum()

    assert abs(surrogate().item() - loss.item()) < 1e-12
    errs = check_function(surrogate, [z, src], analytic=analytic)
    assert max(errs) < 1e-4


# -- apply_stp ----------------------------------------------------------------

def test_r_zero_keeps_everything_in_order():
    z = sequence(2, 9, 8, cls=True)
    out, rec = apply_stp(z, StpConfig(r=0.0), scorer(), training=False)
    np.testing.assert_array_equal(out.tokens.data, z.tokens.data)
    np.testing.assert_array_equal(out.positions, z.positions)
    assert rec.pruned_indices.shape == (2, 0)


def test_apply_stp_partition_and_cls():
    z = sequence(3, 64, 8, cls=True, seed=5)
    out, rec = apply_stp(z, StpConfig(r=0.75), scorer(), rng=np.random.default_rng(0), training=True)
    assert rec.k == 16 and out.count == 17
    np.testing.assert_array_equal(out.positions[:, 0], CLS_POSITION)
    np.testing.assert_array_equal(out.tokens.data[:, 0], z.tokens.data[:, 0])
    for b in range(3):
        both = np.concatenate([rec.kept_indices[b], rec.pruned_indices[b]])
        np.testing.assert_array_equal(np.sort(both), np.arange(64))
        assert np.all(np.diff(rec.kept_indices[b]) > 0)
    # pruned tokens are stored raw
    body = z.tokens.data[:, 1:]
    np.testing.assert_array_equal(rec.pruned_tokens.data, np.take_along_axis(body, rec.pruned_indices[..., None], 1))
    np.testing.assert_array_equal(rec.hard_mask.sum(axis=1), 16)


def test_apply_stp_large_chain_value():
    z = sequence(1, 1728, 8, seed=6)
    out, rec = apply_stp(z, StpConfig(r=0.9), scorer(), training=False)
    assert rec.k == 173 and out.count == 173


def test_apply_stp_deterministic_without_perturbation():
    z = sequence(2, 30, 8, seed=7)
    cfg = StpConfig(r=0.5, perturb=False)
    a = apply_stp(z, cfg, scorer(), rng=np.random.default_rng(1), training=True)[1]
    b = apply_stp(z, cfg, scorer(), rng=np.random.default_rng(2), training=True)[1]
    np.testing.assert_array_equal(a.kept_indices, b.kept_indices)
    assert a.gumbel is None


def test_apply_stp_rejects_zero_kept():
    with pytest.raises(ConfigError):
        apply_stp(sequence(1, 4, 8), StpConfig(r=0.9), scorer(), training=False)


def test_training_without_rng_is_a_contract_error():
    with pytest.raises(ContractError):
        apply_stp(sequence(1, 8, 8), StpConfig(r=0.5), scorer(), training=True)


def test_score_gradient_flows_from_kept_tokens_only_via_soft_mask():
    z = sequence(1, 6, 8, seed=8)
    net = scorer()
    out, rec = apply_stp(z, StpConfig(r=0.5), net, training=True, noise=np.zeros((1, 6)))
    out.tokens.sum().backward()
    assert net.fc2.weight.grad is not None and np.any(net.fc2.weight.grad != 0)
    assert rel_error(rec.soft_mask.data.sum(), 1.0) < 1e-12
