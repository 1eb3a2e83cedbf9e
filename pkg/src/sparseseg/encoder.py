"""3D patch tokenization and the ViT encoder with pruning insertion points."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .layers import Linear, Module, TransformerBlock, module_rng, param
from .stp import STP, StpConfig
from .tokens import CLS_POSITION, TokenSequence


def patchify(volume, patch):
    """``[B, H, W, D, Cin]`` -> ``[B, N, P^3 * Cin]`` in row-major grid order."""
    vol = np.asarray(volume)
    if vol.ndim == 4:
        vol = vol[None]
    b, h, w, d, c = vol.shape
    if h % patch or w % patch or d % patch:
        raise ConfigError(f"volume extents {(h, w, d)} not divisible by patch size {patch}")
    gh, gw, gd = h // patch, w // patch, d // patch
    x = vol.reshape(b, gh, patch, gw, patch, gd, patch, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, gh * gw * gd, patch ** 3 * c)


class PatchEmbed(Module):
    def __init__(self, rng, cfg, dtype):
        self.patch = cfg.patch
        self.extents = tuple(cfg.extents)
        self.proj = Linear(rng, cfg.patch ** 3 * cfg.in_channels, cfg.dim, dtype)
        self.pos = param(rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.dim)), dtype)
        self.cls = param(rng.normal(0.0, 0.02, size=(cfg.dim,)), dtype)

    def __call__(self, volume):
        vol = np.asarray(volume)
        if vol.ndim == 4:
            vol = vol[None]
        if tuple(vol.shape[1:4]) != self.extents:
            raise ConfigError(f"volume extents {vol.shape[1:4]} differ from configured {self.extents}")
        patches = patchify(vol, self.patch).astype(self.pos.dtype, copy=False)
        b, n, _ = patches.shape
        tokens = self.proj(ad.Tensor(patches)) + self.pos
        cls = ad.expand_axis(ad.expand_axis(self.cls, 0, 1), 0, b)
        positions = np.concatenate([np.full((b, 1), CLS_POSITION), np.tile(np.arange(n), (b, 1))], axis=1)
        return TokenSequence(ad.concat([cls, tokens], axis=1), positions, has_cls=True)


def patch_embed(volume, embed):
    return embed(volume)


def transformer_block(z, block):
    """Apply one block; positions and the [CLS] flag pass through unchanged."""
    return TokenSequence(block(z.tokens), z.positions, z.has_cls)


class Encoder(Module):
    """Patch embedding, ``depth`` blocks, and pruning modules after the configured blocks."""

    def __init__(self, cfg, seed, dtype):
        enc = cfg.encoder
        self.cfg = enc
        self.embed = PatchEmbed(module_rng(seed, "embed"), enc, dtype)
        self.blocks = [TransformerBlock(module_rng(seed, f"block{i}"), enc.dim, enc.heads, dtype, enc.mlp_ratio)
                       for i in range(enc.depth)]
        stp_cfg = StpConfig(r=enc.r, tau=enc.tau, eps=enc.eps, perturb=enc.perturb)
        self.stps = {}
        for k, after in enumerate(enc.stp_after, start=1):
            if not 1 <= after <= enc.depth - 1:
                raise ConfigError(f"pruning module after block {after} outside [1, {enc.depth - 1}]")
            self.stps[str(after)] = STP(module_rng(seed, f"stp{k}"), enc.dim, dtype, k, after, stp_cfg)

    @property
    def num_stp(self):
        return len(self.stps)

    def __call__(self, volume, training=False, rng=None, noise=None, frozen=None, ratio=None):
        """Return the final (sparse) sequence and one PruneRecord per pruning module.

        ``noise``/``frozen`` map a pruning module's 1-based index to fixed Gumbel
        noise or a frozen selection.
        """
        noise = noise or {}
        frozen = frozen or {}
        z = self.embed(volume)
        records = []
        for i, block in enumerate(self.blocks, start=1):
            z = transformer_block(z, block)
            stp = self.stps.get(str(i))
            if stp is not None:
                z, rec = stp(z, rng=rng, training=training, noise=noise.get(stp.index),
                             frozen=frozen.get(stp.index), ratio=ratio)
                records.append(rec)
        return z, records


def encode(volume, encoder, training=False, rng=None, **kwargs):
    return encoder(volume, training=training, rng=rng, **kwargs)
