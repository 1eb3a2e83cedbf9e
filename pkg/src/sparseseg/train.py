"""Training loop, optimizers and held-out evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import make_dataset, stack_batch
from .errors import TrainingDiverged
from .inference import sliding_window_infer
from .metrics import evaluate
from .model import SCDModel

log = logging.getLogger(__name__)

_NO_DECAY_SUFFIXES = ("bias", "gain", "pos", "cls")


class AdamW:
    """Adam with decoupled weight decay and a per-parameter lr multiplier."""

    def __init__(self, named_params, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8, lr_scale=None):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.lr_scale = lr_scale or {}
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.lr * self.lr_scale.get(name, 1.0)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2 and not name.endswith(_NO_DECAY_SUFFIXES):
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, named_params, lr, lr_scale=None, **_):
        self.params = list(named_params)
        self.lr = lr
        self.lr_scale = lr_scale or {}

    def step(self):
        for name, p in self.params:
            if p.grad is not None:
                p.data = (p.data - self.lr * self.lr_scale.get(name, 1.0) * p.grad).astype(p.dtype, copy=False)


def layer_lr_scales(model, decay):
    top = model.cfg.encoder.depth + 1
    return {name: decay ** (top - model.layer_id(name)) for name, _ in model.named_parameters()}


def make_optimizer(model, tcfg, trainable=None):
    named = [(n, p) for n, p in model.named_parameters() if trainable is None or trainable(n)]
    scales = layer_lr_scales(model, tcfg.layer_decay)
    if tcfg.optimizer == "sgd":
        return SGD(named, tcfg.lr, lr_scale=scales)
    return AdamW(named, tcfg.lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay, lr_scale=scales)


def score_statistics(records, eps=1e-6):
    stats = {}
    for rec in records:
        s = rec.scores.data
        stats[f"stp{rec.stp_index}"] = {
            "min": float(np.nanmin(s)) if s.size else None,
            "mean": float(np.nanmean(s)) if s.size else None,
            "max": float(np.nanmax(s)) if s.size else None,
            "nan_fraction": float(np.isnan(s).mean()) if s.size else 0.0,
            "clamped_fraction": float((s <= eps).mean()) if s.size else 0.0,
        }
    return stats


def data_seeds(cfg):
    """Disjoint training/validation sample seeds derived from the run seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    seeds = rng.choice(2 ** 31, size=cfg.train.num_train + cfg.train.num_val, replace=False)
    return [int(s) for s in seeds[:cfg.train.num_train]], [int(s) for s in seeds[cfg.train.num_train:]]


@dataclass
class TrainResult:
    model: SCDModel
    losses: list
    report: object = None
    checkpoint: Path | None = None
    epoch_losses: list = field(default_factory=list)


def train(cfg, out_dir=None, metrics_path=None, freeze=False, evaluate_val=True, on_step=None):
    """Optimise the full pipeline on the synthetic task with the segmentation loss only.

    Gumbel perturbation follows ``cfg.encoder.perturb`` (training mode). Emits
    one JSON line per step to ``metrics_path`` and a final line with the
    held-out DSC per class. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    model = SCDModel(cfg)
    tcfg = cfg.train
    enc = cfg.encoder
    train_seeds, val_seeds = data_seeds(cfg)
    train_set = make_dataset(train_seeds, enc.extents, cfg.decoder.num_classes, enc.in_channels)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    opt = make_optimizer(model, tcfg, trainable=(lambda n: False) if freeze else None)

    sink = open(metrics_path, "w") if metrics_path else None
    losses, epoch_losses = [], []
    step = 0
    try:
        for epoch in range(tcfg.epochs):
            ratio = 0.0 if epoch < tcfg.warmup_epochs else None
            order = shuffle_rng.permutation(len(train_set))
            this_epoch = []
            for start in range(0, len(order), tcfg.batch_size):
                batch = [train_set[i] for i in order[start:start + tcfg.batch_size]]
                vol, lab = stack_batch(batch)
                model.zero_grad()
                loss, result = model.loss(vol, lab, training=True, rng=noise_rng, ratio=ratio)
                value = float(loss.item())
                if not math.isfinite(value):
                    diag = {"step": step, "epoch": epoch, "scores": score_statistics(result.records, enc.eps)}
                    raise TrainingDiverged(f"non-finite loss {value} at step {step}: {json.dumps(diag)}", diag)
                loss.backward()
                opt.step()
                losses.append(value)
                this_epoch.append(value)
                if sink:
                    sink.write(json.dumps({"step": step, "epoch": epoch, "loss": value}) + "\n")
                if on_step:
                    on_step(step, value)
                step += 1
            epoch_losses.append(math.fsum(this_epoch) / max(1, len(this_epoch)))
            log.debug("epoch %d loss %.4f", epoch, epoch_losses[-1])

        report = None
        if evaluate_val and val_seeds:
            report = evaluate_model(model, val_seeds, losses)
            if sink:
                sink.write(json.dumps({"step": step, "loss": losses[-1] if losses else None,
                                       "dsc": report.to_dict()["dsc"],
                                       "mean_dsc": report.to_dict()["mean_dsc"]}) + "\n")
    finally:
        if sink:
            sink.close()

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out / "model.ckpt", model.state_dict(), cfg.to_dict())
    return TrainResult(model, losses, report, ckpt, epoch_losses)


def evaluate_model(model, seeds, loss_curve=()):
    cfg = model.cfg
    samples = make_dataset(seeds, cfg.encoder.extents, cfg.decoder.num_classes, cfg.encoder.in_channels)
    preds = [sliding_window_infer(model, s.intensities, cfg.infer.overlap) for s in samples]
    return evaluate(preds, [s.labels for s in samples], cfg.decoder.num_classes, loss_curve=loss_curve)
