"""Soft-topK token pruning.

A light score network rates every non-[CLS] token. Training perturbs the
log-scores with Gumbel noise, keeps the top-K tokens (hard mask, forward pass)
and routes gradients through the tempered softmax of the same perturbed
log-scores (soft mask, backward pass). Inference uses the raw scores, so it is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import kept_count
from .errors import ConfigError, ContractError, ParameterError
from .layers import Linear, Module
from .tokens import TokenSequence


@dataclass
class StpConfig:
    r: float = 0.5
    tau: float = 1.0
    eps: float = 1e-6
    perturb: bool = True


@dataclass
class PruneRecord:
    """What one pruning module did to one batch.

    Local indices refer to rows of the module's non-[CLS] input; positions are
    original-grid indices.
    """

    stp_index: int
    block: int
    kept_indices: np.ndarray
    pruned_indices: np.ndarray
    kept_positions: np.ndarray
    pruned_positions: np.ndarray
    pruned_tokens: Tensor
    scores: Tensor
    hard_mask: np.ndarray
    soft_mask: Tensor
    gumbel: np.ndarray | None = None

    @property
    def k(self):
        return self.kept_indices.shape[1]

    @property
    def n(self):
        return self.hard_mask.shape[1]


@dataclass
class FrozenSelection:
    """Selection replayed by the finite-difference surrogate.

    The multiplier becomes ``soft + offset`` with ``offset = hard - soft`` taken
    at the reference point, so the surrogate is smooth, matches the
    straight-through forward value there, and shares its gradient.
    """

    kept_indices: np.ndarray
    offset: np.ndarray = field(repr=False)

    @classmethod
    def from_record(cls, record):
        soft_kept = np.take_along_axis(record.soft_mask.data, record.kept_indices, axis=1)
        return cls(record.kept_indices.copy(), 1.0 - soft_kept)


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng):
    """I.i.d. standard Gumbel draws; ``u`` is kept strictly inside (0, 1)."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return gumbel_from_uniform(u)


def topk_mask(values, k):
    """Hard mask of the ``k`` largest entries along the last axis; ties go to the lower index."""
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"K={k} outside [1, {n}]")
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(values.shape, dtype=values.dtype)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def soft_topk_mask(scores, k, tau, gumbel=None, training=True):
    """Hard top-K mask and its Gumbel-softmax relaxation over perturbed log-scores.

    ``scores`` must already be clamped to ``[eps, 1]``. Returns ``(M, M_soft)``
    where ``M`` is a numpy 0/1 array with exactly ``k`` ones per row and
    ``M_soft`` a Tensor summing to one per row.
    """
    scores = ad.as_tensor(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"K={k} outside [1, {n}]")
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    logits = ad.log(scores)
    if gumbel is not None:
        if not training and np.any(gumbel != 0):
            raise ContractError("inference must not perturb scores with Gumbel noise")
        logits = logits + np.asarray(gumbel, dtype=scores.dtype)
    hard = topk_mask(logits.data, k)
    soft = ad.softmax(logits, axis=-1, temperature=tau)
    return hard, soft


def straight_through_keep(tokens, hard, soft, kept_indices):
    """Kept tokens scaled by ``soft + stop_gradient(hard - soft)``.

    The forward value is the gathered tokens times the hard mask (exactly 1),
    so it is bitwise equal to a plain gather. The backward pass sends
    ``sum_c g * z`` into the soft mask and ``g`` into the tokens.
    """
    kept = ad.gather_tokens(tokens, kept_indices)
    soft_kept = ad.gather_tokens(soft, kept_indices)
    hard_kept = np.take_along_axis(hard, kept_indices, axis=1)[..., None].astype(kept.dtype)
    if np.any(hard_kept != 1):
        raise ContractError("kept indices must be marked by the hard mask")

    def backward(g):
        return g * hard_kept, (g * kept.data).sum(axis=-1)

    return ad.make_node(kept.data * hard_kept, (kept, soft_kept), backward, "straight_through")


def _surrogate_keep(tokens, soft, frozen):
    kept = ad.gather_tokens(tokens, frozen.kept_indices)
    mult = ad.gather_tokens(soft, frozen.kept_indices) + frozen.offset.astype(kept.dtype)
    return kept * ad.expand_axis(mult, -1, kept.shape[-1])


class ScoreNet(Module):
    """``sigmoid(MLP2([z, mean_tokens(MLP1(z))]))``: local token plus pooled global feature."""

    def __init__(self, rng, dim, dtype):
        hidden = max(1, dim // 4)
        self.local = Linear(rng, dim, dim, dtype)
        self.fc1 = Linear(rng, 2 * dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, 1, dtype)

    def __call__(self, z):
        b, n, c = z.shape
        pooled = ad.mean_pool(ad.gelu(self.local(z)), axis=1)
        joint = ad.concat([z, ad.expand_axis(pooled, 1, n)], axis=-1)
        return ad.sigmoid(self.fc2(ad.gelu(self.fc1(joint))).reshape(b, n))


def estimate_scores(z, net):
    """Per-token keep scores in (0, 1) for a ``[B, n, C]`` tensor or a CLS-free sequence."""
    tokens = z.tokens if isinstance(z, TokenSequence) else z
    if tokens.shape[1] < 1:
        raise ContractError("score estimation needs at least one token")
    return net(tokens)


class STP(Module):
    """One pruning module, inserted after encoder block ``block`` (1-based)."""

    def __init__(self, rng, dim, dtype, index, block, cfg):
        self.index = index
        self.block = block
        self.cfg = cfg
        self.scorer = ScoreNet(rng, dim, dtype)

    def __call__(self, z, rng=None, training=False, noise=None, frozen=None, ratio=None):
        return apply_stp(z, self.cfg, self.scorer, rng, training, noise=noise, frozen=frozen,
                         ratio=ratio, index=self.index, block=self.block)


def apply_stp(z, cfg, scorer, rng=None, training=False, noise=None, frozen=None, ratio=None,
              index=1, block=0):
    """Score, (optionally) perturb, select the top-K and split ``z`` into kept/pruned tokens.

    [CLS] (if present) is never scored and always kept at row 0. Kept tokens
    keep their relative input order. ``noise`` overrides sampled Gumbel noise;
    ``frozen`` replays a fixed selection through the smooth surrogate.
    """
    body, pos = z.body()
    b, n, _ = body.shape
    r = cfg.r if ratio is None else ratio
    k = kept_count(n, r)
    if k < 1:
        raise ConfigError(f"pruning ratio {r} keeps {k} of {n} tokens")

    scores = estimate_scores(body, scorer)
    clamped = ad.clamp(scores, cfg.eps, 1.0)
    gumbel = None
    if training and cfg.perturb:
        if noise is not None:
            gumbel = np.asarray(noise, dtype=np.float64)
        else:
            if rng is None:
                raise ContractError("training-mode perturbation needs an rng")
            gumbel = sample_gumbel((b, n), rng)
    hard, soft = soft_topk_mask(clamped, k, cfg.tau, gumbel, training)

    if frozen is not None:
        kept_idx = frozen.kept_indices
        hard = np.zeros_like(hard)
        np.put_along_axis(hard, kept_idx, 1.0, axis=1)
    else:
        kept_idx = np.sort(np.argsort(-hard, axis=1, kind="stable")[:, :k], axis=1)
    pruned_idx = np.sort(np.argsort(hard, axis=1, kind="stable")[:, :n - k], axis=1)

    if frozen is not None:
        kept_tokens = _surrogate_keep(body, soft, frozen)
    else:
        kept_tokens = straight_through_keep(body, hard, soft, kept_idx)
    kept_pos = np.take_along_axis(pos, kept_idx, axis=1)
    pruned_pos = np.take_along_axis(pos, pruned_idx, axis=1)

    if z.has_cls:
        out = TokenSequence(ad.concat([z.tokens[:, :1], kept_tokens], axis=1),
                            np.concatenate([z.positions[:, :1], kept_pos], axis=1), has_cls=True)
    else:
        out = TokenSequence(kept_tokens, kept_pos)
    record = PruneRecord(
        stp_index=index,
        block=block,
        kept_indices=kept_idx,
        pruned_indices=pruned_idx,
        kept_positions=kept_pos,
        pruned_positions=pruned_pos,
        pruned_tokens=ad.gather_tokens(body, pruned_idx),
        scores=scores,
        hard_mask=hard,
        soft_mask=soft,
        gumbel=gumbel,
    )
    return out, record


def inclusion_frequencies(scores, k, trials, rng, tau=1.0, chunk=20000):
    """Monte-Carlo marginal P(token i kept) under training-mode sampling."""
    s = np.asarray(scores, dtype=np.float64)
    counts = np.zeros_like(s)
    done = 0
    with ad.no_grad():
        while done < trials:
            m = min(chunk, trials - done)
            batch = np.broadcast_to(s, (m, s.size))
            hard, _ = soft_topk_mask(batch, k, tau, sample_gumbel((m, s.size), rng), training=True)
            counts += hard.sum(axis=0)
            done += m
    return counts / trials
