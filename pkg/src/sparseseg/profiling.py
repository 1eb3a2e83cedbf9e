"""Analytic MAC counting, throughput timing and pruning-depth maps."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .config import token_chain

# One MAC is one multiply-accumulate. Softmax, normalisation, activations,
# residual adds and the attention scale are not counted.


def linear_macs(n, c_in, c_out):
    return n * c_in * c_out


def block_macs(n, dim, mlp_ratio=4):
    """Attention projections, the two attention contractions and the MLP for ``n`` tokens."""
    return 4 * n * dim * dim + 2 * n * n * dim + 2 * n * dim * (mlp_ratio * dim)


def score_net_macs(n, dim):
    hidden = max(1, dim // 4)
    return linear_macs(n, dim, dim) + linear_macs(n, 2 * dim, hidden) + linear_macs(n, hidden, 1)


def conv_macs(voxels, c_in, c_out, kernel=3):
    return voxels * kernel ** 3 * c_in * c_out


@dataclass
class MacReport:
    block_tokens: list  # tokens entering each encoder block, [CLS] included
    block_macs: list
    embed: int
    scoring: int  # all pruning-module score networks
    encoder_total: int
    completion_total: int
    decoder_total: int
    grand_total: int = field(init=False)

    def __post_init__(self):
        self.grand_total = self.encoder_total + self.completion_total + self.decoder_total

    def to_dict(self):
        return asdict(self)


def count_macs(cfg, ratio=None):
    """Closed-form per-image MAC counts for ``cfg`` (optionally at another pruning ratio)."""
    enc = cfg.encoder
    r = enc.r if ratio is None else ratio
    n_full = enc.num_tokens
    dim = enc.dim
    chain = token_chain(n_full, r, len(enc.stp_after))

    embed = linear_macs(n_full, enc.patch ** 3 * enc.in_channels, dim)
    tokens, macs = [], []
    scoring = 0
    stage = 0
    for i in range(1, enc.depth + 1):
        n = chain[stage] + 1
        tokens.append(n)
        macs.append(block_macs(n, dim, enc.mlp_ratio))
        if i in enc.stp_after:
            scoring += score_net_macs(chain[stage], dim)
            stage += 1
    encoder_total = embed + sum(macs) + scoring

    completion = cfg.mta.depth * block_macs(n_full, dim, enc.mlp_ratio)

    channels = cfg.decoder_channels
    voxels = math.prod(enc.extents)
    decoder = sum(linear_macs(n_full, dim, ch) for ch in channels)
    for i in range(1, len(channels)):
        decoder += conv_macs(n_full * 8 ** i, channels[i - 1], channels[i])
    decoder += conv_macs(voxels, enc.in_channels, channels[-1])
    decoder += linear_macs(voxels, channels[-1], cfg.decoder.num_classes)

    return MacReport(tokens, macs, embed, scoring, encoder_total, completion, decoder)


def instrumented_macs(model, volume=None):
    """Count MACs by running one inference-mode forward with the autodiff tally switched on.

    Returns ``{"encoder": int, "total": int}``; an independent check on :func:`count_macs`.
    """
    enc = model.cfg.encoder
    if volume is None:
        volume = np.zeros((1, *enc.extents, enc.in_channels), dtype=model.dtype)
    with ad.no_grad():
        with ad.mac_counter() as tally:
            model.encode(volume, training=False)
        encoder = tally["matmul"] + tally["conv3d"]
        with ad.mac_counter() as tally:
            model.forward(volume, training=False)
        total = tally["matmul"] + tally["conv3d"]
    return {"encoder": encoder, "total": total}


def _median_seconds(fn, warmup, iters):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def measure_throughput(model, extents=None, warmup=1, iters=5, seed=0):
    """Images per second at batch size 1 in inference mode, encoder-only and end-to-end.

    Each figure is the median over ``iters`` timed calls after ``warmup`` calls,
    with BLAS pinned to one thread.
    """
    if warmup < 1:
        raise ValueError("warmup must be at least 1")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    enc = model.cfg.encoder
    extents = tuple(enc.extents if extents is None else extents)
    rng = np.random.default_rng(seed)
    volume = rng.uniform(-1.0, 1.0, size=(1, *extents, enc.in_channels)).astype(model.dtype)

    def run_encoder():
        model.encode(volume, training=False)

    def run_full():
        model.forward(volume, training=False)

    with threadpool_limits(limits=1), ad.no_grad():
        enc_s = _median_seconds(run_encoder, warmup, iters)
        full_s = _median_seconds(run_full, warmup, iters)
    return {"encoder_imgs_per_s": 1.0 / enc_s, "full_imgs_per_s": 1.0 / full_s,
            "encoder_seconds": enc_s, "full_seconds": full_s, "iters": iters, "warmup": warmup}


# -- pruning-depth maps ---------------------------------------------------------

@dataclass
class DepthMap:
    """Per-patch index of the pruning module that removed it; ``sentinel`` marks survivors."""

    values: np.ndarray  # [gh, gw, gd] int
    extents: tuple
    num_stp: int
    sentinel: int
    stp_blocks: tuple = ()

    def histogram(self):
        counts = {k: int(np.count_nonzero(self.values == k)) for k in range(1, self.num_stp + 1)}
        counts["survived"] = int(np.count_nonzero(self.values == self.sentinel))
        return counts


def depth_map(model, volume):
    """Encode one volume in inference mode and record where each patch was pruned."""
    enc = model.cfg.encoder
    vol = np.asarray(volume)
    if vol.ndim == 5:
        if vol.shape[0] != 1:
            raise ValueError("depth_map takes a single volume")
        vol = vol[0]
    with ad.no_grad():
        _, records = model.encode(vol[None], training=False)
    values = np.full(enc.num_tokens, enc.depth, dtype=np.int64)
    for rec in records:
        values[rec.pruned_positions[0]] = rec.stp_index
    return DepthMap(values.reshape(enc.grid), tuple(enc.extents), len(records), enc.depth,
                    tuple(enc.stp_after))


def write_depth_map(dmap, path):
    path = Path(path)
    gh, gw, gd = dmap.values.shape
    lines = [
        "# pruning depth map, row-major over (x, y, z) patches",
        "extents " + " ".join(str(e) for e in dmap.extents),
        f"grid {gh} {gw} {gd}",
        f"stp_count {dmap.num_stp}",
        f"sentinel {dmap.sentinel}",
        "stp_blocks " + " ".join(str(b) for b in dmap.stp_blocks),
    ]
    for row in dmap.values.reshape(gh * gw, gd):
        lines.append(" ".join(str(int(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_depth_map(path):
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key.lstrip("-").isdigit():
            rows.append([int(v) for v in line.split()])
        else:
            header[key] = [int(v) for v in rest]
    grid = tuple(header["grid"])
    return DepthMap(np.array(rows, dtype=np.int64).reshape(grid), tuple(header["extents"]),
                    header["stp_count"][0], header["sentinel"][0], tuple(header.get("stp_blocks", ())))


def depth_shades(dmap):
    """Grey level per patch: 255 for the earliest possible pruning, 0 for survivors (darker = later)."""
    depth = np.zeros(dmap.values.shape, dtype=np.float64)
    blocks = dmap.stp_blocks or tuple(range(1, dmap.num_stp + 1))
    for k, block in enumerate(blocks, start=1):
        depth[dmap.values == k] = block
    depth[dmap.values == dmap.sentinel] = dmap.sentinel
    return np.round(255.0 * (1.0 - depth / dmap.sentinel)).astype(np.uint8)


def write_depth_pgm(dmap, path, scale=8):
    """Binary PGM montage of the depth slices side by side, each patch drawn ``scale`` pixels wide."""
    shades = depth_shades(dmap)
    gh, gw, gd = shades.shape
    tiles = [np.kron(shades[:, :, z], np.ones((scale, scale), dtype=np.uint8)) for z in range(gd)]
    gap = np.full((gh * scale, 2), 255, dtype=np.uint8)
    parts = []
    for z, tile in enumerate(tiles):
        if z:
            parts.append(gap)
        parts.append(tile)
    image = np.concatenate(parts, axis=1)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
    return path


def export_depth_map(model, volume, out_path, pgm=True):
    """Write the text depth map (and a ``.pgm`` rendering next to it); returns the DepthMap."""
    dmap = depth_map(model, volume)
    out_path = Path(out_path)
    write_depth_map(dmap, out_path)
    if pgm:
        write_depth_pgm(dmap, out_path.with_suffix(".pgm"))
    return dmap
