"""Multi-head self-attention shared by the text encoder and the scale transformer."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Linear, Module, RandomStream, Tensor


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: RandomStream, dtype=np.float32):
        if width % heads:
            raise ValueError(f"heads ({heads}) must divide width ({width})")
        r_qkv, r_proj = rng.split(2)
        self.heads = heads
        self.qkv = Linear(width, 3 * width, r_qkv, dtype=dtype)
        self.proj = Linear(width, width, r_proj, dtype=dtype)

    def __call__(self, x: Tensor, allow: np.ndarray, return_weights: bool = False):
        """``allow[i, j]`` says whether query i may attend to key j."""
        n, length, width = x.shape
        dh = width // self.heads
        qkv = self.qkv(x).reshape(n, length, 3, self.heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        weights = nx.softmax(logits, axis=-1, mask=allow)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(n, length, width)
        out = self.proj(out)
        if return_weights:
            return out, weights.data
        return out
