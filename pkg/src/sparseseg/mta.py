"""Multi-layer token assembly: rebuild the full token grid from sparse encoder output."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import AssemblyError, ConfigError
from .layers import Module, TransformerBlock, module_rng, param
from .tokens import TokenSequence


def sincos_pos_embed(n, dim):
    """Fixed table: row ``p``, channels ``(2j, 2j+1)`` = ``sin/cos(p * 10000^(-2j/dim))``."""
    if dim % 2:
        raise ConfigError(f"sin-cos embedding needs an even dimension, got {dim}")
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = np.arange(n)[:, None] * omega[None, :]
    table = np.empty((n, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def assemble(records, z_final, n, block_tokens=None):
    """Put every token back at its original grid position.

    Tokens pruned by module ``k`` get ``block_tokens[k-1]`` added; survivors
    from ``z_final`` (already without [CLS]) are used as-is.
    """
    if z_final.has_cls:
        raise AssemblyError("drop [CLS] before assembly")
    parts, positions, sources = [], [], []
    for rec in records:
        tokens = rec.pruned_tokens
        if block_tokens is not None:
            tokens = tokens + block_tokens[rec.stp_index - 1]
        parts.append(tokens)
        positions.append(rec.pruned_positions)
        sources.append(np.full(rec.pruned_positions.shape, rec.stp_index))
    parts.append(z_final.tokens)
    positions.append(z_final.positions)
    sources.append(np.zeros(z_final.positions.shape, dtype=int))
    pos = np.concatenate(positions, axis=1)
    src = np.concatenate(sources, axis=1)

    expected = np.arange(n)
    for b in range(pos.shape[0]):
        srt = np.sort(pos[b])
        if srt.shape[0] != n or np.any(srt != expected):
            counts = np.bincount(pos[b][(pos[b] >= 0) & (pos[b] < n)], minlength=n)
            missing = np.flatnonzero(counts == 0).tolist()
            dup = np.flatnonzero(counts > 1).tolist()
            extra = sorted(set(pos[b][(pos[b] < 0) | (pos[b] >= n)].tolist()))
            raise AssemblyError(f"sample {b}: positions do not partition [0, {n}); "
                                f"missing={missing} duplicated={dup} out_of_range={extra}")
    order = np.argsort(pos, axis=1, kind="stable")
    tokens = ad.gather_tokens(ad.concat(parts, axis=1), order)
    return TokenSequence(tokens, np.take_along_axis(pos, order, axis=1),
                         sources=np.take_along_axis(src, order, axis=1))


class MTA(Module):
    """Block tokens (one per pruning module), sin-cos table and completion blocks."""

    def __init__(self, cfg, seed, dtype):
        enc = cfg.encoder
        self.n = enc.num_tokens
        rng = module_rng(seed, "mta")
        self.block_tokens = [param(rng.normal(0.0, 0.02, size=enc.dim), dtype) for _ in enc.stp_after]
        self.blocks = [TransformerBlock(module_rng(seed, f"mta_block{i}"), enc.dim, enc.heads, dtype, enc.mlp_ratio)
                       for i in range(cfg.mta.depth)]
        self.pos_table = sincos_pos_embed(self.n, enc.dim).astype(dtype)

    def assemble(self, records, z_final):
        return assemble(records, z_final, self.n, self.block_tokens)

    def complete(self, assembled):
        if assembled.count != self.n:
            raise AssemblyError(f"completion expects {self.n} tokens, got {assembled.count}")
        x = assembled.tokens + self.pos_table
        for block in self.blocks:
            x = block(x)
        return TokenSequence(x, assembled.positions)

    def __call__(self, records, z_final):
        return self.complete(self.assemble(records, z_final))
