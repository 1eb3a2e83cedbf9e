"""Parameter containers shared by the encoder, pruning, completion and decoder stages."""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def module_rng(seed, name):
    """Independent generator per named module, so adding a module never shifts another's init."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def param(array, dtype):
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Module:
    """Anything that owns named parameter tensors (directly or via child modules)."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype, zero=False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(d_out), dtype)

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim, dtype, eps=1e-5):
        self.gain = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x):
        return ad.layernorm(x, self.gain, self.bias, self.eps)


class TransformerBlock(Module):
    """Pre-norm block: ``z + MSA(LN(z))`` followed by ``+ MLP(LN(.))``."""

    def __init__(self, rng, dim, heads, dtype, mlp_ratio=4):
        self.heads = heads
        self.norm1 = LayerNorm(dim, dtype)
        self.query = Linear(rng, dim, dim, dtype)
        self.key = Linear(rng, dim, dim, dtype)
        self.value = Linear(rng, dim, dim, dtype)
        self.out = Linear(rng, dim, dim, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim, dtype)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim, dtype)

    def attention(self, x):
        b, n, c = x.shape
        d = c // self.heads

        def split(t):
            return t.reshape(b, n, self.heads, d).transpose(0, 2, 1, 3)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        weights = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d)), axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.out(ctx), weights

    def __call__(self, x):
        attn, _ = self.attention(self.norm1(x))
        x = x + attn
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))
