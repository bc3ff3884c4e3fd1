"""Caption tokenization, a small causal transformer text encoder, precomputed
embedding files, and the per-layer token-position attention analysis."""
from __future__ import annotations

import csv
import io
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import SelfAttention
from .numerics import LayerNorm, Linear, Module, RandomStream, Tensor

SOT, EOT, UNK = "<sot>", "<eot>", "<unk>"

_WORDS = """
a an the of on in at with and or to from by for over under near behind above below
red green blue yellow black white orange purple pink brown gray grey gold silver
square circle triangle shape box ball ring dot star
background foreground picture photo image drawing painting
small large big tiny bright dark light colorful plain
cat dog bird fish horse tree flower house tower mountain river sky sea sun moon
boat sailboat train car balloon field road city forest beach snow water
is are has have it its this that there one two three many some
flying passing sitting standing running morning sunset night day
""".split()
_PUNCT = list(".,!?;:'\"-()")

VOCAB: tuple[str, ...] = (SOT, EOT, UNK, *dict.fromkeys(_WORDS), *_PUNCT)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
SOT_ID, EOT_ID, UNK_ID = WORD_TO_ID[SOT], WORD_TO_ID[EOT], WORD_TO_ID[UNK]
MAX_LEN = 77

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str, max_len: int = MAX_LEN) -> list[int]:
    """Lower-cased word/punctuation ids wrapped in start and end markers.

    Long captions are cut so the result has at most ``max_len`` ids; the end
    marker is always kept.
    """
    if max_len < 2:
        raise ValueError("max_len must leave room for start and end markers")
    words = _TOKEN_RE.findall(text.lower())
    ids = [WORD_TO_ID.get(w, UNK_ID) for w in words][: max_len - 2]
    return [SOT_ID, *ids, EOT_ID]


def detokenize(ids) -> str:
    return " ".join(VOCAB[i] for i in ids if i not in (SOT_ID, EOT_ID))


@dataclass
class TextEncoderConfig:
    width: int = 64
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 4
    max_len: int = MAX_LEN
    vocab_size: int = len(VOCAB)
    init_seed: int = 1


@dataclass
class TextEmbedding:
    vector: np.ndarray
    source: str = "toy-encoder"


class _Block(Module):
    def __init__(self, cfg: TextEncoderConfig, rng: RandomStream, dtype):
        r_attn, r_fc1, r_fc2 = rng.split(3)
        self.ln1 = LayerNorm(cfg.width, dtype)
        self.attn = SelfAttention(cfg.width, cfg.heads, r_attn, dtype)
        self.ln2 = LayerNorm(cfg.width, dtype)
        self.fc1 = Linear(cfg.width, cfg.mlp_ratio * cfg.width, r_fc1, dtype=dtype)
        self.fc2 = Linear(cfg.mlp_ratio * cfg.width, cfg.width, r_fc2, dtype=dtype)

    def __call__(self, x: Tensor, allow: np.ndarray):
        a, weights = self.attn(self.ln1(x), allow, return_weights=True)
        x = x + a
        x = x + self.fc2(nx.gelu(self.fc1(self.ln2(x))))
        return x, weights


class TextEncoder(Module):
    """Token + learned position embeddings, pre-norm causal blocks, and the
    final hidden state at the end-of-text position as the caption embedding."""

    def __init__(self, cfg: TextEncoderConfig | None = None, dtype=np.float32):
        self.cfg = cfg = cfg or TextEncoderConfig()
        rng = RandomStream(cfg.init_seed)
        r_tok, r_pos, *r_blocks = rng.split(2 + cfg.layers)
        self.token_embed = nx.param(r_tok.normal((cfg.vocab_size, cfg.width), 0.5, dtype), dtype)
        self.pos_embed = nx.param(r_pos.normal((cfg.max_len, cfg.width), 0.1, dtype), dtype)
        self.blocks = [_Block(cfg, r, dtype) for r in r_blocks]
        self.ln_final = LayerNorm(cfg.width, dtype)

    @property
    def dim(self) -> int:
        return self.cfg.width

    def _run(self, x: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        length = x.shape[1]
        allow = np.tril(np.ones((length, length), dtype=bool))
        maps = []
        for block in self.blocks:
            x, w = block(x, allow)
            maps.append(w)
        return self.ln_final(x), maps

    def encode(self, tokens) -> TextEmbedding:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("encode: empty token sequence")
        if tokens.size > self.cfg.max_len:
            raise ValueError(f"encode: {tokens.size} tokens exceed max_len {self.cfg.max_len}")
        with nx.no_grad():
            x = nx.embedding(self.token_embed, tokens[None]) + self.pos_embed[: tokens.size]
            h, _ = self._run(x)
        return TextEmbedding(h.data[0, -1].copy(), "toy-encoder")

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode(tokenize(text, self.cfg.max_len)).vector

    def attention_maps(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-layer attention weights (heads, n, n) for an embedded sequence (n, width)."""
        with nx.no_grad():
            _, maps = self._run(Tensor(np.asarray(x, dtype=self.token_embed.dtype)[None]))
        return [m[0] for m in maps]


# -- position analysis ----------------------------------------------------

@dataclass
class PositionScoreReport:
    """scores[l, j]: attention from the final query to key position j in
    layer l, averaged over heads."""

    scores: np.ndarray
    method: str = "final-query attention, head-averaged, identical inputs"

    @property
    def num_layers(self) -> int:
        return self.scores.shape[0]

    @property
    def num_positions(self) -> int:
        return self.scores.shape[1]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# {self.method}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "position", "score"])
        for layer, row in enumerate(self.scores):
            for pos, s in enumerate(row):
                w.writerow([layer, pos, repr(float(s))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "PositionScoreReport":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "PositionScoreReport":
        lines = text.splitlines()
        method = lines[0][2:] if lines and lines[0].startswith("# ") else cls.method
        rows = list(csv.DictReader(line for line in lines if not line.startswith("#")))
        n_layers = 1 + max(int(r["layer"]) for r in rows)
        n_pos = 1 + max(int(r["position"]) for r in rows)
        scores = np.zeros((n_layers, n_pos))
        for r in rows:
            scores[int(r["layer"]), int(r["position"])] = float(r["score"])
        return cls(scores, method)


def position_scores(encoder: TextEncoder, n: int, token_id: int = UNK_ID) -> PositionScoreReport:
    """Feed ``n`` copies of one token embedding (positions still added) and
    record how much the final position attends to each earlier one."""
    if not 1 <= n <= encoder.cfg.max_len:
        raise ValueError(f"probe length {n} outside [1, {encoder.cfg.max_len}]")
    encoder = encoder.clone(np.float64)
    emb = encoder.token_embed.data[token_id]
    x = np.broadcast_to(emb, (n, emb.size)) + encoder.pos_embed.data[:n]
    maps = encoder.attention_maps(x)
    scores = np.stack([m[:, -1, :].mean(axis=0) for m in maps]).astype(np.float64)
    return PositionScoreReport(scores)


# -- embedding files ------------------------------------------------------

EMBED_MAGIC = b"VCEM"
EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_RECORD_ID = struct.Struct("<Q")


class EmbeddingFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_embeddings(path, embeddings: dict[int, np.ndarray]) -> None:
    items = sorted(embeddings.items())
    dim = len(items[0][1]) if items else 0
    out = bytearray(_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, len(items), dim))
    for cid, vec in items:
        vec = np.asarray(vec, dtype="<f4").reshape(-1)
        if vec.size != dim:
            raise ValueError(f"caption {cid}: dimension {vec.size} != {dim}")
        out += _RECORD_ID.pack(cid)
        out += vec.tobytes()
    Path(path).write_bytes(bytes(out))


def load_embeddings(path) -> dict[int, TextEmbedding]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError("truncated header", len(raw))
    magic, version, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != EMBED_MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}", 0)
    if version != EMBED_VERSION:
        raise EmbeddingFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    rec = _RECORD_ID.size + 4 * dim
    out: dict[int, TextEmbedding] = {}
    for _ in range(count):
        if off + rec > len(raw):
            raise EmbeddingFormatError("truncated record", off)
        (cid,) = _RECORD_ID.unpack_from(raw, off)
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + _RECORD_ID.size).astype(np.float32)
        out[cid] = TextEmbedding(vec, "file")
        off += rec
    if off != len(raw):
        raise EmbeddingFormatError("trailing bytes after last record", off)
    return out
