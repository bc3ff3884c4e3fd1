"""The desk-scale reference run: both training stages on the shapes dataset
with default configs, plus the controllability probe, written to one folder.

Layout of ``out_dir``::

    tokenizer.varc            stage 1 checkpoint (+ .metrics.csv)
    transformer.varc          stage 2 checkpoint (+ .metrics.csv)
    summary.json              thresholds, measured ratios, timings, probe rates
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .config import TrainConfig
from .data import generate_samples
from .generate import controllability_probe
from .models import tokenizer_checkpoint, tokenizer_from_checkpoint, transformer_checkpoint, \
    transformer_from_checkpoint
from .train import train_tokenizer, train_transformer, write_metrics

log = logging.getLogger(__name__)

DATASET_SIZE = 1024
STEPS = 2000
MSE_RATIO_MAX = 0.25
NLL_RATIO_MAX = 0.70
PROBE_RATE_MIN = 0.80
PROBE_SAMPLES = 50
TIME_BUDGET_S = 30 * 60


def dataset(seed: int = 0) -> tuple[np.ndarray, list[str]]:
    samples = generate_samples(DATASET_SIZE, seed)
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).astype(np.float32)
    return np.ascontiguousarray(images), [s.caption for s in samples]


def run(out_dir, seed: int = 0, steps: int = STEPS, probe_samples: int = PROBE_SAMPLES) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, captions = dataset(seed)

    t0 = time.perf_counter()
    stage1 = train_tokenizer(TrainConfig(stage="tokenizer", steps=steps, seed=seed), images)
    t1 = time.perf_counter()
    stage2 = train_transformer(TrainConfig(stage="transformer", steps=steps, seed=seed),
                               stage1.model, images, captions)
    t2 = time.perf_counter()

    ck.save_checkpoint(tokenizer_checkpoint(stage1.model), out / "tokenizer.varc")
    write_metrics(out / "tokenizer.varc.metrics.csv", stage1.metrics)
    ck.save_checkpoint(transformer_checkpoint(stage2.model, stage2.text), out / "transformer.varc")
    write_metrics(out / "transformer.varc.metrics.csv", stage2.metrics)

    probe = controllability_probe(stage1.model, stage2.model, stage2.text, probe_samples, t=1.0) \
        if probe_samples else []
    summary = {
        "seed": seed,
        "steps": steps,
        "dataset_size": DATASET_SIZE,
        "thresholds": {"mse_ratio_max": MSE_RATIO_MAX, "nll_ratio_max": NLL_RATIO_MAX,
                       "probe_rate_min": PROBE_RATE_MIN, "time_budget_s": TIME_BUDGET_S},
        "stage1": stage1.summary,
        "stage2": stage2.summary,
        "train_seconds": {"stage1": t1 - t0, "stage2": t2 - t1, "total": t2 - t0},
        "probe": {p.caption: p.rate for p in probe},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("reference run: %s", summary)
    return summary


def load(out_dir):
    """Summary and models of a finished reference run."""
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text())
    tokenizer = tokenizer_from_checkpoint(ck.load_checkpoint(out / "tokenizer.varc", ck.TAG_TOKENIZER))
    var, text = transformer_from_checkpoint(
        ck.load_checkpoint(out / "transformer.varc", ck.TAG_TRANSFORMER), tokenizer)
    return summary, tokenizer, var, text
