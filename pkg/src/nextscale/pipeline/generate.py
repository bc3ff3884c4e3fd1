"""Caption -> tokens -> image, plus the colour-controllability probe."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..text_encoder import TextEncoder
from ..tokenizer import MultiScaleTokens, MultiScaleVQ, codebook_health
from ..var_transformer import GuidanceConfig, SamplerConfig, ScaleTransformer
from .checkpoint import save_checkpoint
from .data import BACKGROUNDS, COLOR_NAMES, COLORS, SHAPES, write_ppm, write_png
from .models import tokens_checkpoint

CENTER = slice(12, 20)
_PALETTE = {**COLORS, **BACKGROUNDS}


def noise_seed_for(seed: int) -> int:
    """Guidance noise seed derived from the sampling seed (independent stream)."""
    return int(np.random.SeedSequence([seed, 0x5EED]).generate_state(1, np.uint64)[0])


def sample_tokens(caption: str, tokenizer: MultiScaleVQ, var: ScaleTransformer, text: TextEncoder,
                  t: float, seed: int, sampler: SamplerConfig | None = None,
                  space: str = "embedding") -> MultiScaleTokens:
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    e_c = text.encode_text(caption)
    guidance = GuidanceConfig(t=t, noise_seed=noise_seed_for(seed), space=space)
    return var.sample(e_c, guidance, sampler, seed)


def tokens_to_image(tokenizer: MultiScaleVQ, tokens: MultiScaleTokens) -> np.ndarray:
    """Decoded images as (N, H, W, 3), clamped to [0, 1]."""
    return np.clip(tokenizer.decode(tokens), 0.0, 1.0).transpose(0, 2, 3, 1)


def sample_to_image(caption: str, tokenizer: MultiScaleVQ, var: ScaleTransformer, text: TextEncoder,
                    t: float, seed: int, out, sampler: SamplerConfig | None = None,
                    png: bool = False) -> tuple[np.ndarray, MultiScaleTokens]:
    """Write ``out`` (PPM) and ``out`` + ``.tokens`` (token-map container)."""
    tokens = sample_tokens(caption, tokenizer, var, text, t, seed, sampler)
    image = tokens_to_image(tokenizer, tokens)[0]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, image)
    if png:
        write_png(out.with_suffix(".png"), image)
    save_checkpoint(tokens_checkpoint(tokens, var.schedule), out.with_name(out.name + ".tokens"))
    return image, tokens


def dominant_color(image: np.ndarray) -> str:
    """Palette entry nearest to the mean colour of the central 8x8 patch."""
    mean = image[CENTER, CENTER].reshape(-1, 3).mean(axis=0)
    names = list(_PALETTE)
    dists = [float(((mean - np.array(_PALETTE[k])) ** 2).sum()) for k in names]
    return names[int(np.argmin(dists))]


@dataclass
class ProbeResult:
    caption: str
    color: str
    hits: int
    total: int

    @property
    def rate(self) -> float:
        return self.hits / self.total


def controllability_probe(tokenizer: MultiScaleVQ, var: ScaleTransformer, text: TextEncoder,
                          n_samples: int = 50, t: float = 1.0, background: str = "black",
                          seed0: int = 0) -> list[ProbeResult]:
    """For each (colour, shape) caption, count samples whose centre is that colour."""
    out = []
    for color in COLOR_NAMES:
        for shape in SHAPES:
            caption = f"a {color} {shape} on a {background} background"
            hits = 0
            for i in range(n_samples):
                tokens = sample_tokens(caption, tokenizer, var, text, t, seed0 + i)
                hits += dominant_color(tokens_to_image(tokenizer, tokens)[0]) == color
            out.append(ProbeResult(caption, color, hits, n_samples))
    return out


def evaluate(tokenizer: MultiScaleVQ, var: ScaleTransformer, text: TextEncoder, images: np.ndarray,
             captions: list[str], n_probe: int = 50, t: float = 1.0) -> dict:
    from .train import caption_embeddings, encode_dataset, reconstruction_mse, uniform_nll

    tokens = encode_dataset(tokenizer, images)
    embeds = caption_embeddings(text, captions)
    nll = 0.0
    with nx.no_grad():
        for i in range(0, len(images), 128):
            sl = slice(i, i + 128)
            part = MultiScaleTokens([m[sl] for m in tokens.maps])
            nll += var.forward_teacher_forced(part, embeds[sl]).nll.item() * len(part.maps[0])
    probe = controllability_probe(tokenizer, var, text, n_probe, t) if n_probe else []
    return {
        "reconstruction_mse": reconstruction_mse(tokenizer, images),
        "codebook_perplexity": codebook_health(tokens, tokenizer.vocab_size).perplexity,
        "nll": nll / len(images),
        "uniform_nll": uniform_nll(var.schedule, var.cfg.vocab_size),
        "controllability": {p.caption: p.rate for p in probe},
    }
