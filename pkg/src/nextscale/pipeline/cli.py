"""Command-line entry point: ``nextscale <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ..text_encoder import TextEncoder, position_scores
from ..tokenizer import TokenizerConfig
from ..var_transformer import SamplerConfig, TransformerConfig
from . import checkpoint as ck
from . import reference
from .config import TrainConfig, build_configs, default_seed, load_config_file
from .data import generate_dataset, load_dataset
from .generate import evaluate, sample_to_image
from .models import (
    tokenizer_checkpoint,
    tokenizer_from_checkpoint,
    transformer_checkpoint,
    transformer_from_checkpoint,
)
from .train import train_tokenizer, train_transformer, write_metrics

log = logging.getLogger("nextscale")

_OVERRIDES = [f for f in dataclasses.fields(TrainConfig) if f.name != "stage"]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    for f in _OVERRIDES:
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument("--" + f.name.replace("_", "-"), type=kind, default=None)


def _configs(args, stage: str, *model_classes):
    raw = load_config_file(args.config)
    raw["stage"] = stage
    for f in _OVERRIDES:
        val = getattr(args, f.name)
        if val is not None:
            raw[f.name] = str(val)
    train_cfg, model_kwargs = build_configs(raw, *model_classes)
    for kw in model_kwargs:
        kw.setdefault("init_seed", train_cfg.seed)
    return train_cfg, model_kwargs


def _write_outputs(out: Path, ckpt: ck.Checkpoint, rows, summary) -> None:
    ck.save_checkpoint(ckpt, out)
    write_metrics(out.with_name(out.name + ".metrics.csv"), rows)
    out.with_name(out.name + ".summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_gen_data(args) -> None:
    samples = generate_dataset(args.n, args.seed, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train_tokenizer(args) -> None:
    cfg, (tok_kw,) = _configs(args, "tokenizer", TokenizerConfig)
    images, _ = load_dataset(args.data)
    result = train_tokenizer(cfg, images, TokenizerConfig(**tok_kw))
    _write_outputs(Path(args.out), tokenizer_checkpoint(result.model), result.metrics, result.summary)
    log.info("tokenizer summary: %s", result.summary)


def cmd_train_var(args) -> None:
    tokenizer = tokenizer_from_checkpoint(ck.load_checkpoint(args.tokenizer, ck.TAG_TOKENIZER))
    cfg, (var_kw,) = _configs(args, "transformer", TransformerConfig)
    var_kw.setdefault("vocab_size", tokenizer.vocab_size)
    var_kw.setdefault("channels", tokenizer.cfg.channels)
    var_kw.setdefault("schedule", tokenizer.schedule)
    images, captions = load_dataset(args.data)
    result = train_transformer(cfg, tokenizer, images, captions, TransformerConfig(**var_kw))
    _write_outputs(Path(args.out), transformer_checkpoint(result.model, result.text),
                   result.metrics, result.summary)
    log.info("transformer summary: %s", result.summary)


def _load_models(args):
    tokenizer = tokenizer_from_checkpoint(ck.load_checkpoint(args.tokenizer, ck.TAG_TOKENIZER))
    var, text = transformer_from_checkpoint(ck.load_checkpoint(args.var, ck.TAG_TRANSFORMER), tokenizer)
    return tokenizer, var, text


def cmd_sample(args) -> None:
    tokenizer, var, text = _load_models(args)
    sampler = SamplerConfig(args.temperature, args.top_k, args.top_p)
    sample_to_image(args.caption, tokenizer, var, text, args.t, args.seed, args.out, sampler, png=args.png)
    log.info("wrote %s", args.out)


def cmd_analyze_positions(args) -> None:
    if args.var:
        tokenizer = tokenizer_from_checkpoint(ck.load_checkpoint(args.tokenizer, ck.TAG_TOKENIZER))
        _, text = transformer_from_checkpoint(ck.load_checkpoint(args.var, ck.TAG_TRANSFORMER), tokenizer)
    else:
        text = TextEncoder()
    report = position_scores(text, args.len)
    report.to_csv(args.out)
    log.info("wrote %d layers x %d positions to %s", report.num_layers, report.num_positions, args.out)


def cmd_eval(args) -> None:
    tokenizer, var, text = _load_models(args)
    images, captions = load_dataset(args.data)
    report = evaluate(tokenizer, var, text, images, captions, n_probe=args.probe_samples, t=args.t)
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    log.info("eval: %s", report)


def cmd_reference_run(args) -> None:
    summary = reference.run(args.out, seed=args.seed, steps=args.steps, probe_samples=args.probe_samples)
    print(json.dumps({k: summary[k] for k in ("stage1", "stage2", "train_seconds", "probe")}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nextscale", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the captioned shapes dataset")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-tokenizer", help="stage 1: multi-scale VQ autoencoder")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-var", help="stage 2: conditional next-scale transformer")
    p.add_argument("--config")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_train_var)

    p = sub.add_parser("sample", help="generate one image from a caption")
    p.add_argument("--caption", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--var", required=True)
    p.add_argument("--t", type=float, default=1.0, help="guidance weight")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--png", action="store_true", help="also write a PNG next to the PPM")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze-positions", help="per-layer token position scores as CSV")
    p.add_argument("--len", type=int, default=77)
    p.add_argument("--tokenizer", help="with --var: analyze the text encoder stored there")
    p.add_argument("--var")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_positions)

    p = sub.add_parser("eval", help="reconstruction, likelihood and controllability metrics")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--var", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--probe-samples", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reference-run", help="both stages with default configs plus the probe")
    p.add_argument("--out", default="reference_run")
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--steps", type=int, default=reference.STEPS)
    p.add_argument("--probe-samples", type=int, default=reference.PROBE_SAMPLES)
    p.set_defaults(func=cmd_reference_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "analyze-positions" and bool(args.var) != bool(args.tokenizer):
        print("analyze-positions: --var and --tokenizer go together", file=sys.stderr)
        return 2
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
