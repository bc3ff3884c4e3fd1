"""Packing models and token maps into checkpoint containers and back."""
from __future__ import annotations

import dataclasses

import numpy as np

from ..text_encoder import TextEncoder, TextEncoderConfig
from ..tokenizer import MultiScaleTokens, MultiScaleVQ, ScheduleError, TokenizerConfig
from ..var_transformer import ScaleTransformer, TransformerConfig
from .checkpoint import TAG_TOKENIZER, TAG_TOKENS, TAG_TRANSFORMER, Checkpoint


def _config_records(cfg, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name == "schedule":
            continue
        val = getattr(cfg, f.name)
        if isinstance(val, bool) or isinstance(val, (int, np.integer)):
            out[f"{prefix}{f.name}"] = np.array(int(val), dtype=np.int32)
        elif isinstance(val, float):
            out[f"{prefix}{f.name}"] = np.array(val, dtype=np.float32)
    return out


def _config_from(cls, records: dict[str, np.ndarray], prefix: str, **extra):
    kwargs = dict(extra)
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key not in records:
            continue
        v = records[key]
        kwargs[f.name] = v.item() if v.dtype.kind == "f" else int(v)
        if f.type in ("bool", bool):
            kwargs[f.name] = bool(kwargs[f.name])
    return cls(**kwargs)


def tokenizer_checkpoint(model: MultiScaleVQ) -> Checkpoint:
    records = _config_records(model.cfg, "cfg.")
    records.update({f"param.{k}": v for k, v in model.state_dict().items()})
    return Checkpoint(TAG_TOKENIZER, tuple(model.schedule), records)


def tokenizer_from_checkpoint(ckpt: Checkpoint) -> MultiScaleVQ:
    if ckpt.module_tag != TAG_TOKENIZER:
        raise ValueError(f"checkpoint tag {ckpt.module_tag} is not a tokenizer")
    cfg = _config_from(TokenizerConfig, ckpt.records, "cfg.", schedule=ckpt.schedule)
    model = MultiScaleVQ(cfg)
    model.load_state_dict(ckpt.subset("param."))
    return model


def transformer_checkpoint(var: ScaleTransformer, text: TextEncoder) -> Checkpoint:
    records = _config_records(var.cfg, "cfg.var.")
    records.update(_config_records(text.cfg, "cfg.text."))
    records.update({f"var.{k}": v for k, v in var.state_dict().items()})
    records.update({f"text.{k}": v for k, v in text.state_dict().items()})
    return Checkpoint(TAG_TRANSFORMER, tuple(var.schedule), records)


def transformer_from_checkpoint(ckpt: Checkpoint, tokenizer: MultiScaleVQ) -> tuple[ScaleTransformer, TextEncoder]:
    if ckpt.module_tag != TAG_TRANSFORMER:
        raise ValueError(f"checkpoint tag {ckpt.module_tag} is not a transformer")
    if tuple(ckpt.schedule) != tuple(tokenizer.schedule):
        raise ScheduleError(f"transformer schedule {ckpt.schedule} != tokenizer schedule {tokenizer.schedule}")
    vcfg = _config_from(TransformerConfig, ckpt.records, "cfg.var.", schedule=ckpt.schedule)
    tcfg = _config_from(TextEncoderConfig, ckpt.records, "cfg.text.")
    var = ScaleTransformer(vcfg, tokenizer.codebook.data, tokenizer.phi)
    var.load_state_dict(ckpt.subset("var."))
    text = TextEncoder(tcfg)
    text.load_state_dict(ckpt.subset("text."))
    return var, text


def tokens_checkpoint(tokens: MultiScaleTokens, schedule) -> Checkpoint:
    records = {f"scale.{k}": np.asarray(m, dtype=np.int32) for k, m in enumerate(tokens.maps)}
    return Checkpoint(TAG_TOKENS, tuple(schedule), records)


def tokens_from_checkpoint(ckpt: Checkpoint) -> MultiScaleTokens:
    if ckpt.module_tag != TAG_TOKENS:
        raise ValueError(f"checkpoint tag {ckpt.module_tag} is not a token dump")
    maps = [ckpt.records[f"scale.{k}"].astype(np.int64) for k in range(len(ckpt.schedule))]
    return MultiScaleTokens(maps)
