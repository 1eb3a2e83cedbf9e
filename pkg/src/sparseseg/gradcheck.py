"""Central-difference gradient checks (run in float64)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import from_dict, token_chain
from .model import SCDModel
from .stp import FrozenSelection, sample_gumbel

STEP = 1e-5
REL_TOL = 1e-4
# coordinates whose analytic and numeric derivatives are both below this are compared absolutely
ABS_FLOOR = 1e-6


def rel_error(analytic, numeric, floor=ABS_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, tensor, h=STEP, coords=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``tensor`` (all, or ``coords``)."""
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = []
    with ad.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().item())
            flat[i] = orig - h
            fm = float(f().item())
            flat[i] = orig
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def directional_derivative(f, tensors, directions, h=STEP):
    with ad.no_grad():
        saved = [t.data.copy() for t in tensors]
        for t, d, s in zip(tensors, directions, saved):
            t.data = s + h * d
        fp = float(f().item())
        for t, d, s in zip(tensors, directions, saved):
            t.data = s - h * d
        fm = float(f().item())
        for t, s in zip(tensors, saved):
            t.data = s
    return (fp - fm) / (2 * h)


def check_function(f, inputs, h=STEP, coords_per_tensor=None, rng=None, analytic=None):
    """Max relative error between backprop and central differences for each input tensor.

    ``analytic`` (optional) supplies precomputed gradients keyed by position,
    e.g. from a straight-through graph checked against a smooth surrogate ``f``.
    """
    rng = rng or np.random.default_rng(0)
    if analytic is None:
        for t in inputs:
            t.grad = None
        f().backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    errors = []
    for t, g in zip(inputs, analytic):
        if coords_per_tensor is None or coords_per_tensor >= t.size:
            coords = list(range(t.size))
        else:
            coords = sorted(rng.choice(t.size, size=coords_per_tensor, replace=False).tolist())
        num = numeric_grad(f, t, h, coords)
        ana = g.reshape(-1)[coords]
        errors.append(float(rel_error(ana, num).max()) if coords else 0.0)
    return errors


def pipeline_config(**encoder):
    """Small float64 configuration used by the full-pipeline check."""
    enc = {"extents": [16, 16, 16], "patch": 8, "dim": 16, "heads": 2, "depth": 4,
           "stp_after": [2], "r": 0.5, "tau": 1.0}
    enc.update(encoder)
    return from_dict({"encoder": enc, "mta": {"depth": 1}, "decoder": {"channels": [8, 8, 4, 4], "num_classes": 2},
                      "precision": "f64", "seed": 7})


def check_pipeline(cfg=None, coords_per_tensor=3, seed=0, h=STEP):
    """Full-graph check of decode(complete(assemble(encode(x)))) with frozen Gumbel noise.

    The analytic gradient comes from the straight-through graph; the numeric one
    from the smooth surrogate that replays the same selection with multiplier
    ``soft + (hard - soft)|ref``. Per tensor, ``coords_per_tensor`` random
    coordinates plus one random direction are compared.
    Returns ``{param_name: max_rel_error}``; raises if any tensor gets an all-zero gradient.
    """
    cfg = cfg or pipeline_config()
    rng = np.random.default_rng(seed)
    # a zero head would zero every upstream gradient and make the check vacuous
    model = SCDModel(cfg, zero_head=False)
    b = 2
    vol = rng.normal(size=(b, *cfg.encoder.extents, cfg.encoder.in_channels))
    lab = rng.integers(0, cfg.decoder.num_classes, size=(b, *cfg.encoder.extents))
    chain = token_chain(cfg.encoder.num_tokens, cfg.encoder.r, model.encoder.num_stp)
    noise = {k: sample_gumbel((b, chain[k - 1]), rng) for k in range(1, model.encoder.num_stp + 1)}

    loss, result = model.loss(vol, lab, training=True, noise=noise)
    loss.backward()
    named = list(model.named_parameters())
    analytic = [p.grad.copy() for _, p in named]
    dead = [name for (name, _), g in zip(named, analytic) if not np.any(g)]
    if dead:
        raise AssertionError(f"parameters without gradient signal: {dead}")
    frozen = {rec.stp_index: FrozenSelection.from_record(rec) for rec in result.records}

    def surrogate():
        return model.loss(vol, lab, training=True, noise=noise, frozen=frozen)[0]

    with ad.no_grad():
        ref = float(surrogate().item())
    if abs(ref - float(loss.item())) > 1e-10 * max(1.0, abs(ref)):
        raise AssertionError(f"surrogate value {ref} differs from straight-through value {loss.item()}")

    tensors = [p for _, p in named]
    coord_errs = check_function(surrogate, tensors, h, coords_per_tensor, rng, analytic=analytic)
    out = {}
    for (name, p), g, ce in zip(named, analytic, coord_errs):
        d = rng.normal(size=p.shape)
        num = directional_derivative(surrogate, [p], [d], h)
        ana = float((g * d).sum())
        out[name] = max(ce, float(rel_error(ana, num)))
    return out


def check_ops(seed=0):
    """Per-op checks on random small f64 shapes; returns ``{op: max_rel_error}``."""
    rng = np.random.default_rng(seed)

    def T(*shape, positive=False):
        a = rng.normal(size=shape)
        if positive:
            a = np.abs(a) + 0.5
        return ad.Tensor(a, requires_grad=True)

    results = {}

    def run(name, op, inputs):
        with ad.no_grad():
            probe = ad.Tensor(rng.normal(size=op().shape))

        def f():
            return (op() * probe).sum()

        results[name] = max(check_function(f, inputs, rng=rng))

    x, y = T(2, 3, 5), T(2, 3, 5)
    p = T(2, 3, 5, positive=True)
    a, b = T(2, 3, 4), T(4, 5)
    gain, shift = T(5), T(5)
    vol, kern, bias = T(1, 4, 4, 4, 2), T(3, 3, 3, 2, 3), T(3)
    run("matmul", lambda: a @ b, [a, b])
    run("softmax", lambda: ad.softmax(x, -1, 0.7), [x])
    run("gelu", lambda: ad.gelu(x), [x])
    run("sigmoid", lambda: ad.sigmoid(x), [x])
    run("log", lambda: ad.log(p), [p])
    run("layernorm", lambda: ad.layernorm(x, gain, shift, 1e-5), [x, gain, shift])
    run("mul", lambda: x * y, [x, y])
    run("div", lambda: x / p, [x, p])
    run("concat", lambda: ad.concat([x, y], axis=1), [x, y])
    run("gather", lambda: ad.gather_tokens(x, np.array([[2, 0], [1, 2]])), [x])
    run("mean_pool", lambda: ad.mean_pool(x, 1), [x])
    run("conv3d", lambda: ad.conv3d(vol, kern, bias), [vol, kern, bias])
    run("upsample", lambda: ad.upsample_nearest(vol, 2), [vol])
    return results
