"""Dense decoding from the completed token grid, and the segmentation loss."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError
from .layers import Linear, Module, module_rng, param

CE_WEIGHT = 1.0
DICE_WEIGHT = 1.0
DICE_SMOOTH = 1e-5
PROB_CLAMP = 1e-7


def tokens_to_volume(z, grid):
    """Reshape ``[B, N, C]`` row-major tokens to a ``[B, gh, gw, gd, C]`` feature map."""
    tokens = getattr(z, "tokens", z)
    positions = getattr(z, "positions", None)
    b, n, c = tokens.shape
    if n != math.prod(grid):
        raise ShapeError(f"{n} tokens cannot fill grid {tuple(grid)}")
    if positions is not None and np.any(positions != np.arange(n)):
        raise ShapeError("tokens must be in row-major grid order before reshaping")
    return tokens.reshape(b, *grid, c)


class Conv3d(Module):
    def __init__(self, rng, c_in, c_out, dtype, kernel=3):
        std = math.sqrt(2.0 / (kernel ** 3 * c_in))
        self.weight = param(rng.normal(0.0, std, size=(kernel, kernel, kernel, c_in, c_out)), dtype)
        self.bias = param(np.zeros(c_out), dtype)

    def __call__(self, x):
        return ad.conv3d(x, self.weight, self.bias)


class Decoder(Module):
    """UNETR-style decoder where every tap is a projection of the completed tokens.

    Stage 0 sits on the token grid; each of the ``log2(P)`` following stages
    doubles resolution (nearest x2 then 3x3x3 conv) and adds its own tap,
    nearest-upsampled from the token grid. The last stage also adds a 3x3x3
    convolution of the raw input volume.
    """

    def __init__(self, cfg, seed, dtype, zero_head=True):
        enc = cfg.encoder
        rng = module_rng(seed, "decoder")
        self.grid = enc.grid
        self.channels = cfg.decoder_channels
        self.stages = len(self.channels) - 1
        self.taps = [Linear(rng, enc.dim, ch, dtype) for ch in self.channels]
        self.ups = [Conv3d(rng, self.channels[i - 1], self.channels[i], dtype) for i in range(1, self.stages + 1)]
        self.raw = Conv3d(rng, enc.in_channels, self.channels[-1], dtype)
        self.head = Linear(rng, self.channels[-1], cfg.decoder.num_classes, dtype, zero=zero_head)

    def __call__(self, z_compl, volume):
        vol = np.asarray(volume)
        if vol.ndim == 4:
            vol = vol[None]
        feat = ad.gelu(tokens_to_volume(self.taps[0](z_compl.tokens), self.grid))
        for i in range(1, self.stages + 1):
            up = self.ups[i - 1](ad.upsample_nearest(feat, 2))
            tap = ad.upsample_nearest(tokens_to_volume(self.taps[i](z_compl.tokens), self.grid), 2 ** i)
            x = up + tap
            if i == self.stages:
                x = x + self.raw(ad.Tensor(vol.astype(self.head.weight.dtype, copy=False)))
            feat = ad.gelu(x)
        if self.stages == 0:
            feat = ad.gelu(feat + self.raw(ad.Tensor(vol.astype(self.head.weight.dtype, copy=False))))
        return self.head(feat)


def _onehot(labels, num_classes, dtype):
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        if np.any(lab != np.round(lab)):
            raise DataError("labels must be integer-valued")
        lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise DataError(f"labels outside [0, {num_classes})")
    return np.eye(num_classes, dtype=dtype)[lab]


def _as_batched(logits, labels):
    lab = np.asarray(labels)
    # unbatched [H, W, D, K] logits with [H, W, D] labels
    if logits.ndim == 4 and lab.ndim == 3:
        lab = lab[None]
        logits = logits.reshape(1, *logits.shape)
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    return logits, lab


def ce_from_probs(probs, labels):
    onehot = _onehot(labels, probs.shape[-1], probs.dtype)
    p_true = (probs * onehot).sum(axis=-1)
    return -ad.log(ad.clamp(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP)).mean()


def dice_from_probs(probs, labels, smooth=DICE_SMOOTH):
    """Soft Dice loss per sample and foreground class, averaged; 0 when there is no foreground class."""
    k = probs.shape[-1]
    b = probs.shape[0]
    if k == 1:
        return ad.Tensor(np.zeros((), dtype=probs.dtype))
    onehot = _onehot(labels, k, probs.dtype).reshape(b, -1, k)[..., 1:]
    p = probs.reshape(b, -1, k)[:, :, 1:]
    inter = (p * onehot).sum(axis=1)
    denom = p.sum(axis=1) + onehot.sum(axis=1)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def ce_loss(logits, labels):
    logits, labels = _as_batched(logits, labels)
    return ce_from_probs(ad.softmax(logits, axis=-1), labels)


def dice_loss(logits, labels, smooth=DICE_SMOOTH):
    logits, labels = _as_batched(logits, labels)
    return dice_from_probs(ad.softmax(logits, axis=-1), labels, smooth)


def total_loss(logits, labels):
    logits, labels = _as_batched(logits, labels)
    probs = ad.softmax(logits, axis=-1)
    return ce_from_probs(probs, labels) * CE_WEIGHT + dice_from_probs(probs, labels) * DICE_WEIGHT
