"""Two-stage training: tokenizer first, then the conditional scale transformer
on frozen tokenizer outputs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..numerics import AdamW, Tensor, seeded_rng
from ..text_encoder import TextEncoder
from ..tokenizer import MultiScaleTokens, MultiScaleVQ, TokenizerConfig, codebook_health, num_tokens
from ..var_transformer import ScaleTransformer, TransformerConfig, condition_dropout
from .config import TrainConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


@dataclass
class TrainResult:
    model: object
    text: TextEncoder | None = None
    metrics: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _optimizer(params: list[Tensor], cfg: TrainConfig) -> AdamW:
    # norms, biases and embeddings-as-vectors are not decayed
    mask = [p.ndim >= 2 for p in params]
    return AdamW(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                 weight_decay=cfg.weight_decay, decay_mask=mask)


def write_metrics(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- stage 1 --------------------------------------------------------------

def reconstruction_mse(model: MultiScaleVQ, images: np.ndarray, chunk: int = 64) -> float:
    total = 0.0
    for i in range(0, len(images), chunk):
        batch = images[i:i + chunk]
        recon = model.decode(model.encode(batch))
        total += float(((recon - batch) ** 2).sum())
    return total / images.size


def train_tokenizer(cfg: TrainConfig, images: np.ndarray, model_cfg: TokenizerConfig | None = None,
                    eval_size: int = 256) -> TrainResult:
    """Optimize reconstruction + codebook + commitment (+ edge) loss."""
    model = MultiScaleVQ(model_cfg or TokenizerConfig(init_seed=cfg.seed))
    r_batch, r_dead = seeded_rng(cfg.seed).split(2)
    opt = _optimizer(model.parameters(), cfg)
    held = images[:eval_size]
    initial_mse = reconstruction_mse(model, held)
    rows = []
    for step in range(cfg.steps):
        idx = r_batch.integers(0, len(images), cfg.batch_size)
        out = model.forward(images[idx])
        loss = out.loss.item()
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        model.zero_grad()
        out.loss.backward()
        opt.step()
        model.after_step(step, out.tokens, out.targets, r_dead)
        perplexity = codebook_health(out.tokens, model.vocab_size).perplexity
        rows.append({"step": step, "loss": loss, "mse": out.mse, "perplexity": perplexity})
        if step % 200 == 0:
            log.info("tokenizer step %d loss %.5f mse %.5f ppl %.2f", step, loss, out.mse, perplexity)
    final_mse = reconstruction_mse(model, held)
    summary = {"initial_mse": initial_mse, "final_mse": final_mse,
               "mse_ratio": final_mse / initial_mse if initial_mse else float("nan")}
    return TrainResult(model, None, rows, summary)


# -- stage 2 --------------------------------------------------------------

def encode_dataset(tokenizer: MultiScaleVQ, images: np.ndarray, chunk: int = 128) -> MultiScaleTokens:
    parts = [tokenizer.encode(images[i:i + chunk]).maps for i in range(0, len(images), chunk)]
    return MultiScaleTokens([np.concatenate([p[k] for p in parts]) for k in range(len(parts[0]))])


def caption_embeddings(text: TextEncoder, captions: list[str]) -> np.ndarray:
    cache: dict[str, np.ndarray] = {}
    for c in captions:
        if c not in cache:
            cache[c] = text.encode_text(c)
    return np.stack([cache[c] for c in captions])


def uniform_nll(schedule, vocab_size: int) -> float:
    return num_tokens(schedule) * math.log(vocab_size)


def _take(tokens: MultiScaleTokens, idx) -> MultiScaleTokens:
    return MultiScaleTokens([m[idx] for m in tokens.maps])


def train_transformer(cfg: TrainConfig, tokenizer: MultiScaleVQ, images: np.ndarray, captions: list[str],
                      model_cfg: TransformerConfig | None = None, text: TextEncoder | None = None,
                      eval_size: int = 256) -> TrainResult:
    """Maximize the likelihood of token maps given caption embeddings.

    The tokenizer is only read (encode + codebook lookups), never updated.
    """
    text = text or TextEncoder()
    model_cfg = model_cfg or TransformerConfig(
        vocab_size=tokenizer.vocab_size, channels=tokenizer.cfg.channels,
        text_dim=text.dim, schedule=tokenizer.schedule, init_seed=cfg.seed)
    if tuple(model_cfg.schedule) != tuple(tokenizer.schedule):
        raise ValueError(f"schedule mismatch: {model_cfg.schedule} vs tokenizer {tokenizer.schedule}")
    var = ScaleTransformer(model_cfg, tokenizer.codebook.data, tokenizer.phi)
    tokens = encode_dataset(tokenizer, images)
    inputs = var.teacher_inputs(tokens)
    targets = tokens.flat()
    embeds = caption_embeddings(text, captions)
    r_batch, r_drop = seeded_rng(cfg.seed).split(2)
    opt = _optimizer(var.parameters(), cfg)
    baseline = uniform_nll(var.schedule, model_cfg.vocab_size)

    def eval_nll() -> float:
        with nx.no_grad():
            sl = slice(0, eval_size)
            out = var.logits([x[sl] for x in inputs], embeds[sl])
            return nx.cross_entropy(out, targets[sl], reduction="sum").item() / len(targets[sl])

    initial = eval_nll()
    rows = []
    for step in range(cfg.steps):
        idx = r_batch.integers(0, len(images), cfg.batch_size)
        e_c, _ = condition_dropout(embeds[idx], cfg.cond_dropout, r_drop)
        logits = var.logits([x[idx] for x in inputs], e_c)
        nll = nx.cross_entropy(logits, targets[idx], reduction="sum") * (1.0 / cfg.batch_size)
        value = nll.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        var.zero_grad()
        nll.backward()
        opt.step()
        rows.append({"step": step, "loss": value, "nll": value})
        if step % 200 == 0:
            log.info("transformer step %d nll %.3f (uniform %.3f)", step, value, baseline)
    final = eval_nll()
    summary = {"uniform_nll": baseline, "initial_nll": initial, "final_nll": final,
               "nll_ratio": final / baseline}
    return TrainResult(var, text, rows, summary)
