"""Text-conditioned next-scale prediction transformer.

Sequence layout: position 0 is the condition token (an affine map of the
RMS-normalized caption embedding); then one slot per token of every scale, in scale order.
The slots of scale k carry the approximation built from scales < k,
downsampled to scale k's grid, and their outputs predict the tokens of scale
k. Attention is block-causal across scales, so all tokens of one scale are
predicted in parallel from the committed coarser scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import SelfAttention
from .numerics import Linear, Module, RandomStream, Tensor
from .tokenizer import (
    DEFAULT_SCHEDULE,
    MultiScaleTokens,
    ScheduleError,
    scale_contribution,
    scale_inputs,
    validate_schedule,
)


# -- mask -----------------------------------------------------------------

@dataclass
class BlockCausalMask:
    labels: np.ndarray  # 0 for the condition token, k for slots of scale k (1-based)
    allow: np.ndarray


def scale_labels(schedule) -> np.ndarray:
    return np.concatenate([[0]] + [np.full(h * w, k + 1) for k, (h, w) in enumerate(schedule)])


def build_mask(schedule) -> BlockCausalMask:
    labels = scale_labels(validate_schedule(schedule))
    return BlockCausalMask(labels, labels[None, :] <= labels[:, None])


# -- guidance and condition dropout --------------------------------------

@dataclass
class GuidanceConfig:
    t: float = 1.0
    noise_seed: int = 0
    space: str = "embedding"

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.t}")
        if self.space not in ("embedding", "logits"):
            raise ValueError(f"unknown guidance space {self.space!r}")

    def noise(self, dim: int, dtype=np.float32) -> np.ndarray:
        return nx.seeded_rng(self.noise_seed).normal((dim,), 1.0, dtype)


def cfg_embed(e_c: np.ndarray, t: float, e_n: np.ndarray) -> np.ndarray:
    """Push the condition away from the noise embedding: (1+t)*e_c - t*e_n."""
    e_c, e_n = np.asarray(e_c), np.asarray(e_n)
    if e_c.shape[-1] != e_n.shape[-1]:
        raise ValueError(f"cfg_embed: dims {e_c.shape} vs {e_n.shape}")
    return (1.0 + t) * e_c - t * e_n


def condition_dropout(e_c: np.ndarray, rate: float, rng: RandomStream) -> tuple[np.ndarray, np.ndarray]:
    """Replace each row of ``e_c`` by fresh standard-normal noise with
    probability ``rate``. Returns (embeddings, replaced-mask)."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    e_c = np.asarray(e_c)
    batch = e_c.reshape(-1, e_c.shape[-1])
    drop = rng.uniform((batch.shape[0],)) < rate
    noise = rng.normal(batch.shape, 1.0, e_c.dtype)
    out = np.where(drop[:, None], noise, batch).reshape(e_c.shape)
    return out, drop if e_c.ndim > 1 else drop[0]


# -- sampling filters ----------------------------------------------------

@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    top_p: float = 1.0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        if self.temperature == 0:
            self.greedy = True


def filtered_probs(logits: np.ndarray, temperature: float = 1.0, top_k: int = 0,
                   top_p: float = 1.0) -> np.ndarray:
    """Softmax of tempered logits with top-k / nucleus truncation (0 / 1.0 = off)."""
    z = logits.astype(np.float64) / temperature
    v = z.shape[-1]
    if 0 < top_k < v:
        kth = np.sort(z, axis=-1)[..., v - top_k][..., None]
        z = np.where(z < kth, -np.inf, z)
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    if top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        before = np.cumsum(sorted_p, axis=-1) - sorted_p
        keep_sorted = before < top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        p = np.where(keep, p, 0.0)
        p /= p.sum(axis=-1, keepdims=True)
    return p


def draw(logits: np.ndarray, sampler: SamplerConfig, rng: RandomStream) -> np.ndarray:
    """Categorical draws for every row of ``logits`` (..., V), in row-major order."""
    if sampler.greedy:
        return np.argmax(logits, axis=-1)
    p = filtered_probs(logits, sampler.temperature, sampler.top_k, sampler.top_p)
    flat = p.reshape(-1, p.shape[-1])
    cdf = np.cumsum(flat, axis=-1)
    u = rng.uniform((flat.shape[0], 1)) * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=-1)
    idx = np.minimum(idx, flat.shape[-1] - 1)
    return idx.reshape(p.shape[:-1])


# -- model ----------------------------------------------------------------

@dataclass
class TransformerConfig:
    vocab_size: int = 32
    channels: int = 16
    text_dim: int = 64
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    schedule: tuple = DEFAULT_SCHEDULE
    cond_norm: bool = True
    init_seed: int = 2

    def __post_init__(self):
        self.schedule = validate_schedule(self.schedule)
        if self.width % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.width})")


class AdaLNBlock(Module):
    """Attention + MLP, each wrapped in a layer norm whose scale/shift/gate come
    from the condition embedding."""

    def __init__(self, cfg: TransformerConfig, rng: RandomStream, dtype):
        r_attn, r_fc1, r_fc2, r_ada = rng.split(4)
        d = cfg.width
        self.attn = SelfAttention(d, cfg.heads, r_attn, dtype)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, r_fc1, dtype=dtype)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, r_fc2, dtype=dtype)
        # zero-initialized: every block starts as the identity, and the
        # projection only grows along condition directions seen in training
        self.ada = Linear(cfg.text_dim, 6 * d, r_ada, std=0.0, dtype=dtype)

    def __call__(self, x: Tensor, cond: Tensor, allow: np.ndarray) -> Tensor:
        n, _, d = x.shape
        mod = self.ada(cond).reshape(n, 1, 6, d)
        scale1, shift1, gate1 = mod[:, :, 0], mod[:, :, 1], mod[:, :, 2]
        scale2, shift2, gate2 = mod[:, :, 3], mod[:, :, 4], mod[:, :, 5]
        h = nx.layernorm_core(x) * (scale1 + 1.0) + shift1
        x = x + self.attn(h, allow) * gate1
        h = nx.layernorm_core(x) * (scale2 + 1.0) + shift2
        return x + self.fc2(nx.gelu(self.fc1(h))) * gate2


@dataclass
class TeacherForcedOutput:
    logits: Tensor
    nll: Tensor          # summed over positions, averaged over the batch
    per_scale_nll: np.ndarray


class ScaleTransformer(Module):
    """p(r | c) = prod_k p(r_k | r_<k, e_c) with block-causal attention.

    ``codebook``/``phi`` belong to the frozen tokenizer and turn committed
    token maps into the inputs of the next scale; they are held outside the
    parameter tree so they are never trained or saved here.
    """

    def __init__(self, cfg: TransformerConfig, codebook, phi=None, dtype=np.float32):
        self.cfg = cfg
        if cfg.vocab_size != np.shape(codebook)[0] or cfg.channels != np.shape(codebook)[1]:
            raise ValueError(f"codebook shape {np.shape(codebook)} != ({cfg.vocab_size}, {cfg.channels})")
        self._quant = (Tensor(np.asarray(getattr(codebook, "data", codebook), dtype=dtype)), phi)
        rng = RandomStream(cfg.init_seed)
        r_word, r_cond, r_pos, r_lvl, r_head, r_hada, *r_blocks = rng.split(6 + cfg.depth)
        d = cfg.width
        n_pos = 1 + sum(h * w for h, w in cfg.schedule)
        self.word_embed = Linear(cfg.channels, d, r_word, dtype=dtype)
        self.cond_proj = Linear(cfg.text_dim, d, r_cond, std=0.02, dtype=dtype)
        self.pos_embed = nx.param(r_pos.normal((n_pos, d), 0.02, dtype), dtype)
        self.level_embed = nx.param(r_lvl.normal((len(cfg.schedule) + 1, d), 0.02, dtype), dtype)
        self.blocks = [AdaLNBlock(cfg, r, dtype) for r in r_blocks]
        self.head_ada = Linear(cfg.text_dim, 2 * d, r_hada, std=0.02, dtype=dtype)
        self.head = Linear(d, cfg.vocab_size, r_head, std=0.02, dtype=dtype)
        self.mask = build_mask(cfg.schedule)
        self._bounds = np.cumsum([0] + [h * w for h, w in cfg.schedule])

    @property
    def schedule(self):
        return self.cfg.schedule

    @property
    def codebook(self) -> Tensor:
        return self._quant[0]

    @property
    def phi(self):
        return self._quant[1]

    def to(self, dtype):
        super().to(dtype)
        self._quant = (Tensor(self._quant[0].data.astype(dtype)), self._quant[1])
        return self

    def scale_slice(self, k: int) -> slice:
        """Columns of scale k in the flattened (scale-major) token layout."""
        return slice(int(self._bounds[k]), int(self._bounds[k + 1]))

    # ---------------------------------------------------------------------
    def logits(self, inputs: list[np.ndarray], e_c) -> Tensor:
        """Logits for every slot of scales 1..len(inputs).

        ``inputs[k]`` is the (N, C, h_k, w_k) input feature of scale k; only
        the first len(inputs) scales are run (the rest do not exist yet).
        """
        e_c = Tensor(np.asarray(getattr(e_c, "data", e_c), dtype=self.pos_embed.dtype))
        if e_c.ndim != 2 or e_c.shape[1] != self.cfg.text_dim:
            raise nx.ShapeError(f"condition shape {e_c.shape} != (N, {self.cfg.text_dim})")
        n_scales = len(inputs)
        if not 1 <= n_scales <= len(self.schedule):
            raise ScheduleError(f"{n_scales} scale inputs for a {len(self.schedule)}-scale schedule")
        if self.cfg.cond_norm:
            # RMS-normalize the condition: guided embeddings (1+t)e_c - t e_n
            # then keep the scale the model saw in training
            v = e_c.data
            e_c = Tensor(v / np.sqrt((v * v).mean(axis=1, keepdims=True) + 1e-6))
        n = e_c.shape[0]
        parts = [self.cond_proj(e_c).reshape(n, 1, self.cfg.width)]
        for k, feat in enumerate(inputs):
            if feat.shape[0] != n or tuple(feat.shape[1:]) != (self.cfg.channels, *self.schedule[k]):
                raise nx.ShapeError(f"scale {k} input {feat.shape} does not match schedule")
            seq = Tensor(np.asarray(feat, dtype=self.pos_embed.dtype).reshape(n, self.cfg.channels, -1)
                         .transpose(0, 2, 1))
            parts.append(self.word_embed(seq))
        length = 1 + int(self._bounds[n_scales])
        x = nx.concat(parts, axis=1)
        x = x + self.pos_embed[:length] + nx.embedding(self.level_embed, self.mask.labels[:length])
        allow = self.mask.allow[:length, :length]
        for block in self.blocks:
            x = block(x, e_c, allow)
        mod = self.head_ada(e_c).reshape(n, 1, 2, self.cfg.width)
        h = nx.layernorm_core(x[:, 1:]) * (mod[:, :, 0] + 1.0) + mod[:, :, 1]
        return self.head(h)

    def teacher_inputs(self, tokens: MultiScaleTokens) -> list[np.ndarray]:
        return scale_inputs(tokens, self.schedule, self.codebook, self.phi)

    def forward_teacher_forced(self, tokens: MultiScaleTokens, e_c) -> TeacherForcedOutput:
        """All scales in one pass on ground-truth prefixes; NLL is the summed
        per-image negative log-likelihood, averaged over the batch."""
        tokens.check(self.schedule, self.cfg.vocab_size)
        logits = self.logits(self.teacher_inputs(tokens), e_c)
        targets = tokens.flat()
        n = targets.shape[0]
        nll = nx.cross_entropy(logits, targets, reduction="sum") * (1.0 / n)
        per_scale = np.array([
            nx.cross_entropy(Tensor(logits.data[:, self.scale_slice(k)]), targets[:, self.scale_slice(k)],
                             reduction="sum").item() / n
            for k in range(len(self.schedule))
        ])
        return TeacherForcedOutput(logits, nll, per_scale)

    def sequential_nll(self, tokens: MultiScaleTokens, e_c) -> np.ndarray:
        """Per-scale NLL with the model re-run on each growing prefix."""
        inputs = self.teacher_inputs(tokens)
        targets = tokens.flat()
        n = targets.shape[0]
        out = []
        with nx.no_grad():
            for k in range(len(self.schedule)):
                lg = self.logits(inputs[: k + 1], e_c)
                sl = self.scale_slice(k)
                out.append(nx.cross_entropy(lg[:, sl], targets[:, sl], reduction="sum").item() / n)
        return np.array(out)

    # ---------------------------------------------------------------------
    def sample(self, e_c, guidance: GuidanceConfig | None = None,
               sampler: SamplerConfig | None = None, seed: int = 0) -> MultiScaleTokens:
        """Generate K token maps, one whole scale per step."""
        guidance = guidance or GuidanceConfig(t=0.0)
        sampler = sampler or SamplerConfig()
        e_c = np.atleast_2d(np.asarray(e_c, dtype=self.pos_embed.dtype))
        n = e_c.shape[0]
        e_n = np.broadcast_to(guidance.noise(self.cfg.text_dim, e_c.dtype), e_c.shape)
        if guidance.space == "embedding":
            conds = [cfg_embed(e_c, guidance.t, e_n)]
        else:
            conds = [e_c, e_n]
        rng = nx.seeded_rng(seed)
        final_hw = self.schedule[-1]
        f_hat = Tensor(np.zeros((n, self.cfg.channels, *final_hw), dtype=e_c.dtype))
        inputs = [np.zeros((n, self.cfg.channels, *self.schedule[0]), dtype=e_c.dtype)]
        maps = []
        with nx.no_grad():
            for k, hw in enumerate(self.schedule):
                lg = [self.logits(inputs, c).data[:, self.scale_slice(k)] for c in conds]
                lg = lg[0] if len(lg) == 1 else (1.0 + guidance.t) * lg[0] - guidance.t * lg[1]
                idx = draw(lg, sampler, rng).reshape(n, *hw)
                maps.append(idx)
                if k + 1 < len(self.schedule):
                    f_hat = f_hat + scale_contribution(idx, self.codebook, self.phi, k, final_hw)
                    inputs.append(nx.interpolate(f_hat, self.schedule[k + 1], "area").data)
        return MultiScaleTokens(maps)
