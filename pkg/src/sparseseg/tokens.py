from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

CLS_POSITION = -1


@dataclass
class TokenSequence:
    """Batched tokens ``[B, count, C]`` with their original-grid linear positions ``[B, count]``.

    When ``has_cls`` is set, row 0 of every sample is the [CLS] token at position -1.
    """

    tokens: Tensor
    positions: np.ndarray
    has_cls: bool = False
    # per-row provenance after assembly: 0 = survived the encoder, k = pruned by module k
    sources: np.ndarray | None = None

    @property
    def batch(self):
        return self.tokens.shape[0]

    @property
    def count(self):
        return self.tokens.shape[1]

    @property
    def dim(self):
        return self.tokens.shape[2]

    def body(self):
        """Tokens and positions without the [CLS] row."""
        if self.has_cls:
            return self.tokens[:, 1:], self.positions[:, 1:]
        return self.tokens, self.positions

    def check(self, n=None):
        if self.tokens.ndim != 3 or self.positions.shape != self.tokens.shape[:2]:
            raise ShapeError(f"tokens {self.tokens.shape} vs positions {self.positions.shape}")
        _, pos = self.body()
        if self.has_cls and np.any(self.positions[:, 0] != CLS_POSITION):
            raise ContractError("[CLS] row must carry position -1")
        srt = np.sort(pos, axis=1)
        if pos.shape[1] > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
            raise ContractError("duplicate token positions")
        if n is not None and pos.size and (pos.min() < 0 or pos.max() >= n):
            raise ContractError(f"token positions outside [0, {n})")
        return self


def drop_cls(z):
    if not z.has_cls:
        raise ContractError("drop_cls called on a sequence without [CLS]")
    return TokenSequence(z.tokens[:, 1:], z.positions[:, 1:].copy(), has_cls=False)


def gather_sequence(z, indices):
    """Select rows of a CLS-free sequence by per-sample local indices ``[B, K]``."""
    idx = np.asarray(indices)
    return TokenSequence(ad.gather_tokens(z.tokens, idx), np.take_along_axis(z.positions, idx, axis=1))
