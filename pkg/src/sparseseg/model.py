"""End-to-end wiring: sparse encoding, token completion, dense decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .decoder import Decoder, total_loss
from .encoder import Encoder
from .mta import MTA
from .tokens import drop_cls


@dataclass
class ForwardResult:
    logits: ad.Tensor
    records: list
    z_final: object
    z_compl: object


class SCDModel:
    def __init__(self, cfg, seed=None, zero_head=True):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        self.dtype = cfg.dtype
        self.encoder = Encoder(cfg, seed, self.dtype)
        self.mta = MTA(cfg, seed, self.dtype)
        self.decoder = Decoder(cfg, seed, self.dtype, zero_head=zero_head)

    # -- parameters -------------------------------------------------------
    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.mta.named_parameters("mta.")
        yield from self.decoder.named_parameters("decoder.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def layer_id(self, name):
        """Depth index for layer-wise lr decay: embedding 0, block i -> i, everything after -> depth + 1."""
        depth = self.cfg.encoder.depth
        parts = name.split(".")
        if parts[1] == "embed":
            return 0
        if parts[1] == "blocks":
            return int(parts[2]) + 1
        if parts[1] == "stps":
            return int(parts[2])
        return depth + 1

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    # -- forward ----------------------------------------------------------
    def encode(self, volume, training=False, rng=None, **kwargs):
        return self.encoder(volume, training=training, rng=rng, **kwargs)

    def forward(self, volume, training=False, rng=None, noise=None, frozen=None, ratio=None):
        vol = np.asarray(volume)
        if vol.ndim == 4:
            vol = vol[None]
        z, records = self.encoder(vol, training=training, rng=rng, noise=noise, frozen=frozen, ratio=ratio)
        z_final = drop_cls(z)
        z_compl = self.mta(records, z_final)
        logits = self.decoder(z_compl, vol)
        return ForwardResult(logits, records, z_final, z_compl)

    __call__ = forward

    def loss(self, volume, labels, **kwargs):
        result = self.forward(volume, **kwargs)
        return total_loss(result.logits, labels), result

    def predict_probs(self, volume):
        """Softmax probabilities in inference mode (no Gumbel noise, no graph)."""
        with ad.no_grad():
            logits = self.forward(volume, training=False).logits
            return ad.softmax(logits, axis=-1).data
