"""Synthetic volumetric segmentation task: sparse ellipsoidal blobs in noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

FG_RANGE = (0.01, 0.10)


@dataclass
class VolumeSample:
    intensities: np.ndarray  # [H, W, D, Cin] float32 in [-1, 1]
    labels: np.ndarray  # [H, W, D] int64
    seed: int
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    @property
    def extents(self):
        return self.labels.shape


def _ellipsoid(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return dist <= 1.0


def _place_blobs(rng, extents, num_classes):
    labels = np.zeros(extents, dtype=np.int64)
    size = min(extents)
    for cls in range(1, num_classes):
        for _ in range(rng.integers(1, 4)):
            radii = rng.uniform(0.08, 0.22, size=3) * size
            center = [rng.uniform(r, e - r) for r, e in zip(radii, extents)]
            labels[_ellipsoid(extents, center, radii)] = cls
    return labels


def generate_synthetic(seed, extents=(32, 32, 32), num_classes=3, in_channels=1, noise=0.3):
    """Deterministic sample for ``seed``.

    Each foreground class gets 1-3 ellipsoids; layouts are redrawn until the
    total foreground fraction lies in [0.01, 0.10]. Intensity is the label
    level, Gaussian-smoothed, plus Gaussian noise, rescaled to [-1, 1].
    """
    rng = np.random.default_rng(seed)
    extents = tuple(int(e) for e in extents)
    labels = np.zeros(extents, dtype=np.int64)
    if num_classes > 1:
        for _ in range(200):
            labels = _place_blobs(rng, extents, num_classes)
            frac = np.count_nonzero(labels) / labels.size
            if FG_RANGE[0] + 0.005 <= frac <= FG_RANGE[1] - 0.005:
                break
        else:
            raise RuntimeError(f"could not place blobs for seed {seed}")
    signal = ndimage.gaussian_filter(labels.astype(np.float64), sigma=1.0)
    channels = []
    for _ in range(in_channels):
        img = signal + rng.normal(0.0, noise, size=extents)
        lo, hi = img.min(), img.max()
        channels.append(2.0 * (img - lo) / (hi - lo) - 1.0)
    intensities = np.stack(channels, axis=-1).astype(np.float32)
    return VolumeSample(intensities, labels, int(seed))


def make_dataset(seeds, extents, num_classes, in_channels=1):
    return [generate_synthetic(s, extents, num_classes, in_channels) for s in seeds]


def stack_batch(samples):
    return (np.stack([s.intensities for s in samples]), np.stack([s.labels for s in samples]))
