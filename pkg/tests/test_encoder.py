import numpy as np
import pytest

from sparseseg import autodiff as ad
from sparseseg.config import from_dict, token_chain
from sparseseg.encoder import Encoder, PatchEmbed, patchify, transformer_block
from sparseseg.errors import ConfigError, ContractError
from sparseseg.gradcheck import check_function
from sparseseg.layers import TransformerBlock, module_rng
from sparseseg.tokens import CLS_POSITION, TokenSequence, drop_cls


def cfg_for(**encoder):
    enc = {"dim": 16, "heads": 2, "depth": 4, "stp_after": [], "extents": [16, 16, 16]}
    enc.update(encoder)
    return from_dict({"encoder": enc, "precision": "f64"})


@pytest.mark.parametrize("extents,n", [((16, 16, 16), 8), ((96, 96, 96), 1728), ((32, 16, 8), 8)])
def test_token_count(extents, n):
    assert cfg_for(extents=list(extents)).encoder.num_tokens == n


def test_patch_embed_sequence_length_and_positions():
    cfg = cfg_for()
    embed = PatchEmbed(module_rng(0, "embed"), cfg.encoder, np.float64)
    z = embed(np.zeros((16, 16, 16, 1)))
    assert z.tokens.shape == (1, 9, 16) and z.has_cls
    np.testing.assert_array_equal(z.positions[0], [CLS_POSITION, *range(8)])


def test_zero_volume_gives_position_embeddings():
    cfg = cfg_for()
    embed = PatchEmbed(module_rng(0, "embed"), cfg.encoder, np.float64)
    z = embed(np.zeros((16, 16, 16, 1)))
    np.testing.assert_array_equal(z.tokens.data[0, 1:], embed.pos.data)


def test_patchify_row_major_order():
    vol = np.zeros((16, 16, 16, 1))
    vol[8:, 0:8, 8:, 0] = 1.0  # grid cell (1, 0, 1) -> linear index 1*4 + 0*2 + 1 = 5
    patches = patchify(vol, 8)
    assert np.flatnonzero(patches[0].sum(axis=1)).tolist() == [5]


def test_indivisible_extents():
    with pytest.raises(ConfigError):
        patchify(np.zeros((15, 16, 16, 1)), 8)
    with pytest.raises(ConfigError):
        cfg_for(extents=[20, 16, 16])


def test_block_shape_and_permutation_equivariance():
    block = TransformerBlock(module_rng(0, "b"), 16, 2, np.float64)
    x = np.random.default_rng(0).normal(size=(2, 7, 16))
    perm = np.random.default_rng(1).permutation(7)
    y = block(ad.Tensor(x)).data
    assert y.shape == x.shape
    np.testing.assert_allclose(block(ad.Tensor(x[:, perm])).data, y[:, perm], rtol=1e-12, atol=1e-12)


def test_single_token_attention_weight_is_one():
    block = TransformerBlock(module_rng(0, "b"), 16, 2, np.float64)
    _, weights = block.attention(ad.Tensor(np.random.default_rng(2).normal(size=(1, 1, 16))))
    np.testing.assert_array_equal(weights.data, 1.0)


def test_transformer_block_keeps_positions():
    block = TransformerBlock(module_rng(0, "b"), 16, 2, np.float64)
    z = TokenSequence(ad.Tensor(np.ones((1, 3, 16))), np.array([[-1, 4, 2]]), has_cls=True)
    out = transformer_block(z, block)
    np.testing.assert_array_equal(out.positions, z.positions)
    assert out.has_cls


def test_no_stp_encoder():
    cfg = cfg_for()
    enc = Encoder(cfg, 0, np.float64)
    z, records = enc(np.zeros((16, 16, 16, 1)))
    assert records == [] and z.count == 9


@pytest.mark.parametrize("extents,r,chain", [((32, 32, 32), 0.5, [64, 32, 16, 8]),
                                              ((96, 96, 96), 0.9, [1728, 173, 17, 2])])
def test_encoder_token_chain(extents, r, chain):
    cfg = from_dict({"encoder": {"extents": list(extents), "r": r, "dim": 8, "heads": 2}})
    assert token_chain(cfg.encoder.num_tokens, r, 3) == chain
    if extents[0] > 32:
        return  # the 96^3 forward is covered by the acceptance suite
    enc = Encoder(cfg, 0, np.float32)
    vol = np.random.default_rng(0).normal(size=(1, *extents, 1)).astype(np.float32)
    z, records = enc(vol)
    assert [rec.n for rec in records] == chain[:-1]
    assert [rec.k for rec in records] == chain[1:]
    assert z.count == chain[-1] + 1
    positions = np.concatenate([rec.pruned_positions[0] for rec in records] + [drop_cls(z).positions[0]])
    np.testing.assert_array_equal(np.sort(positions), np.arange(chain[0]))


@pytest.mark.parametrize("stp_after", [[0], [4], [2, 2], [3, 1]])
def test_invalid_insertion_points(stp_after):
    with pytest.raises(ConfigError):
        cfg_for(stp_after=stp_after)


def test_r_zero_encoder_matches_stp_free_encoder():
    vol = np.random.default_rng(3).normal(size=(1, 32, 32, 32, 1)).astype(np.float32)
    base = {"extents": [32, 32, 32], "dim": 16, "heads": 2, "depth": 6, "perturb": False}
    with_stp = Encoder(from_dict({"encoder": {**base, "stp_after": [1, 3, 5], "r": 0.0}}), 0, np.float32)
    without = Encoder(from_dict({"encoder": {**base, "stp_after": []}}), 0, np.float32)
    a, _ = with_stp(vol, training=True, rng=np.random.default_rng(0))
    b, _ = without(vol)
    np.testing.assert_allclose(a.tokens.data, b.tokens.data, atol=1e-6, rtol=0)


def test_drop_cls():
    z = TokenSequence(ad.Tensor(np.arange(12.0).reshape(1, 3, 4), requires_grad=True),
                      np.array([[-1, 5, 2]]), has_cls=True)
    out = drop_cls(z)
    assert out.count == 2 and not out.has_cls
    np.testing.assert_array_equal(out.positions, [[5, 2]])
    out.tokens.sum().backward()
    np.testing.assert_array_equal(z.tokens.grad[0, 0], 0.0)
    np.testing.assert_array_equal(z.tokens.grad[0, 1:], 1.0)
    with pytest.raises(ContractError):
        drop_cls(out)


def test_drop_cls_gradcheck():
    x = ad.Tensor(np.random.default_rng(4).normal(size=(1, 4, 3)), requires_grad=True)
    probe = ad.Tensor(np.random.default_rng(5).normal(size=(1, 3, 3)))

    def f():
        return (drop_cls(TokenSequence(x, np.array([[-1, 0, 1, 2]]), has_cls=True)).tokens * probe).sum()

    assert max(check_function(f, [x])) < 1e-6
