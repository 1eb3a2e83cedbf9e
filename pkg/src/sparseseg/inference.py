from __future__ import annotations

import itertools

import numpy as np

from .errors import ConfigError


def tile_starts(length, window, stride):
    """Window offsets along one axis; the last window is flush with the end."""
    if length < window:
        raise ConfigError(f"volume extent {length} smaller than window {window}")
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def sliding_window_infer(model, volume, overlap=0.5, return_probs=False):
    """Tile ``volume`` ``[H, W, D, Cin]`` with the model's window, average softmax over overlaps, argmax.

    Runs in inference mode (no Gumbel noise), so repeated calls agree bitwise.
    """
    vol = np.asarray(volume)
    if vol.ndim == 3:
        vol = vol[..., None]
    window = tuple(model.cfg.encoder.extents)
    patch = model.cfg.encoder.patch
    if any(w % patch for w in window):
        raise ConfigError(f"window {window} not divisible by patch {patch}")
    strides = [max(1, int(w * (1.0 - overlap))) for w in window]
    axes = [tile_starts(length, w, s) for length, w, s in zip(vol.shape[:3], window, strides)]
    num_classes = model.cfg.decoder.num_classes
    acc = np.zeros(vol.shape[:3] + (num_classes,), dtype=np.float64)
    counts = np.zeros(vol.shape[:3], dtype=np.float64)
    for x, y, z in itertools.product(*axes):
        sl = (slice(x, x + window[0]), slice(y, y + window[1]), slice(z, z + window[2]))
        probs = model.predict_probs(vol[sl][None])[0]
        acc[sl] += probs
        counts[sl] += 1.0
    probs = acc / counts[..., None]
    labels = probs.argmax(axis=-1)
    if return_probs:
        return labels, probs
    return labels
