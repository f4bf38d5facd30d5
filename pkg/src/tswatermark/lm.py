"""Desk-scale stand-in for the language model.

A first-order (bigram) model whose rows are built with a deliberate
entropy structure: LOW_ENTROPY contexts almost always emit one dominant
successor, HIGH_ENTROPY contexts are nearly flat, MID_ENTROPY contexts sit
in between.  Embedding rows are random unit vectors nudged toward one shared
direction per category, so a network reading only the embedding can tell
context types apart.  The model is rebuilt from its header
``(V, d, model_seed, entropy_mix, category_signal)`` and never serialized
numerically.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

PROB_FLOOR = 1e-12

LOW_ENTROPY = "LOW_ENTROPY"
MID_ENTROPY = "MID_ENTROPY"
HIGH_ENTROPY = "HIGH_ENTROPY"
CATEGORIES = (LOW_ENTROPY, MID_ENTROPY, HIGH_ENTROPY)

LOW_MAX_NATS = 1.0
HIGH_MIN_FRACTION = 0.8  # of ln V


class Origin(str, enum.Enum):
    PROMPT = "PROMPT"
    HUMAN = "HUMAN"
    UNWATERMARKED = "UNWATERMARKED"
    WATERMARKED = "WATERMARKED"
    ATTACKED = "ATTACKED"


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple
    origin: Origin = Origin.UNWATERMARKED
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        if len(toks) < 1:
            raise InputError("token sequence must be non-empty")
        if min(toks) < 0:
            raise InputError("token ids must be non-negative")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "origin", Origin(self.origin))

    def __len__(self):
        return len(self.tokens)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)

    def to_json(self) -> dict:
        rec = {"tokens": list(self.tokens), "origin": self.origin.value, "seed": self.seed}
        rec.update(self.meta)
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "TokenSeq":
        meta = {k: v for k, v in rec.items() if k not in ("tokens", "origin", "seed")}
        return cls(tuple(rec["tokens"]), Origin(rec.get("origin", "UNWATERMARKED")), rec.get("seed"), meta)


@dataclass(frozen=True, eq=False)
class SyntheticLM:
    vocab_size: int
    embed_dim: int
    model_seed: int
    entropy_mix: tuple
    embedding_matrix: np.ndarray
    context_table: np.ndarray
    categories: np.ndarray  # int codes into CATEGORIES
    category_signal: float = 0.25

    @property
    def category_map(self) -> dict:
        return {v: CATEGORIES[c] for v, c in enumerate(self.categories)}

    @cached_property
    def log_table(self) -> np.ndarray:
        tab = np.log(np.maximum(self.context_table, PROB_FLOOR))
        tab.setflags(write=False)
        return tab

    def header(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "model_seed": self.model_seed,
            "entropy_mix": list(self.entropy_mix),
            "category_signal": self.category_signal,
        }

    def check_tokens(self, tokens) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
            raise InputError(f"token id out of range [0, {self.vocab_size})")
        return arr


def row_entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def _category_counts(V, mix):
    n_low = int(round(mix[0] * V))
    n_mid = int(round(mix[1] * V))
    n_low = min(n_low, V)
    n_mid = min(n_mid, V - n_low)
    return n_low, n_mid, V - n_low - n_mid


def _low_row(rng, V, v):
    row = np.zeros(V)
    others = rng.permutation(np.delete(np.arange(V), v) if V > 4 else np.arange(V))
    dom, secondary = others[0], others[1:3]
    p_dom = rng.uniform(0.92, 0.96)
    rest = 1.0 - p_dom
    row[dom] = p_dom
    row[secondary] = rest * 0.5 * rng.dirichlet(np.ones(len(secondary)))
    tail = np.setdiff1d(np.arange(V), np.concatenate([[dom], secondary]))
    row[tail] = rest * 0.5 * rng.dirichlet(np.ones(len(tail)))
    return row


def _mid_row(rng, V, upper):
    k = max(4, int(math.isqrt(V)))
    for _ in range(200):
        row = np.zeros(V)
        support = rng.choice(V, size=k, replace=False)
        row[support] = 0.97 * rng.dirichlet(np.full(k, 3.0))
        row += 0.03 * rng.dirichlet(np.ones(V))
        h = row_entropy(row)
        if LOW_MAX_NATS < h < upper:
            return row
    raise ConfigurationError("could not draw a mid-entropy row; vocabulary too small")


def _high_row(rng, V, lower):
    for _ in range(200):
        row = rng.dirichlet(np.full(V, 5.0))
        if row_entropy(row) >= lower:
            return row
    raise ConfigurationError("could not draw a high-entropy row")


def build_model(vocab_size: int = 512, embed_dim: int = 32, model_seed: int = 0,
                entropy_mix: Sequence[float] = (0.2, 0.3, 0.5), category_signal: float = 0.25) -> SyntheticLM:
    if int(vocab_size) < 16 or int(embed_dim) < 4:
        raise ConfigurationError("need vocab_size >= 16 and embed_dim >= 4")
    mix = tuple(float(x) for x in entropy_mix)
    if len(mix) != 3 or any(x < 0 or x > 1 for x in mix):
        raise ConfigurationError(f"entropy_mix must be three fractions in [0, 1], got {entropy_mix}")
    if abs(sum(mix) - 1.0) > 1e-9:
        raise ConfigurationError(f"entropy_mix must sum to 1, got {sum(mix)}")
    if not (math.isfinite(category_signal) and category_signal >= 0):
        raise ConfigurationError("category_signal must be finite and non-negative")
    V, d = int(vocab_size), int(embed_dim)
    seed = int(model_seed) & ((1 << 64) - 1)
    rng = np.random.default_rng([seed, V, d])

    E = rng.standard_normal((V, d)) / math.sqrt(d)

    n_low, n_mid, _ = _category_counts(V, mix)
    order = rng.permutation(V)
    cats = np.full(V, 2, dtype=np.int64)
    cats[order[:n_low]] = 0
    cats[order[n_low:n_low + n_mid]] = 1

    # each category shares a random direction, as syntactic roles do in LM embeddings
    directions = rng.standard_normal((3, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    E += category_signal * directions[cats]
    E /= np.linalg.norm(E, axis=1, keepdims=True)

    high_min = HIGH_MIN_FRACTION * math.log(V)
    table = np.empty((V, V))
    for v in range(V):
        if cats[v] == 0:
            row = _low_row(rng, V, v)
        elif cats[v] == 1:
            row = _mid_row(rng, V, high_min)
        else:
            row = _high_row(rng, V, high_min)
        table[v] = row / row.sum()

    E.setflags(write=False)
    table.setflags(write=False)
    cats.setflags(write=False)
    return SyntheticLM(V, d, seed, mix, E, table, cats, float(category_signal))


def logits(model: SyntheticLM, prev: int) -> np.ndarray:
    if not 0 <= int(prev) < model.vocab_size:
        raise InputError(f"token {prev} out of range")
    return np.log(np.maximum(model.context_table[int(prev)], PROB_FLOOR))


def embed(model: SyntheticLM, token: int) -> np.ndarray:
    if not 0 <= int(token) < model.vocab_size:
        raise InputError(f"token {token} out of range")
    return model.embedding_matrix[int(token)].copy()


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


MODEL_STREAM = 0x5A17
HUMAN_STREAM = 0x4B1D


class SamplingNoise:
    """Per-sequence Gumbel streams keyed by ``gen_seed``.

    Sampling is Gumbel-max: ``argmax(logits + g)`` is an exact draw from
    ``softmax(logits)``.  Watermarked and unwatermarked rollouts that share
    a ``gen_seed`` see identical noise, so they emit the same token whenever
    their distributions allow it and re-merge after diverging.
    """

    def __init__(self, gen_seeds, stream: int = MODEL_STREAM):
        self.rngs = [np.random.default_rng([int(s) & ((1 << 64) - 1), stream]) for s in gen_seeds]

    def next(self, vocab_size: int) -> np.ndarray:
        u = np.stack([r.random(vocab_size) for r in self.rngs])
        return -np.log(-np.log(np.maximum(u, 1e-300)))


def gumbel_argmax(logits: np.ndarray, noise: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.argmax(logits / temperature + noise, axis=-1)


def sample_batch(model: SyntheticLM, last_tokens, length: int, gen_seeds, temperature: float = 1.0,
                 stream: int = MODEL_STREAM) -> np.ndarray:
    """Unwatermarked continuations for a batch; returns ``(B, length)`` ids."""
    last = model.check_tokens(last_tokens).reshape(-1)
    noise = SamplingNoise(gen_seeds, stream)
    logtab = model.log_table
    out = np.empty((len(last), length), dtype=np.int64)
    prev = last
    for t in range(length):
        prev = gumbel_argmax(logtab[prev], noise.next(model.vocab_size), temperature)
        out[:, t] = prev
    return out


def sample_unwatermarked(model: SyntheticLM, prompt: TokenSeq, length: int, gen_seed: int,
                         human: bool = False, temperature: float = 1.0) -> TokenSeq:
    if prompt is None or len(prompt.tokens) == 0:
        raise InputError("prompt must be non-empty")
    if length < 1:
        raise InputError("length must be >= 1")
    model.check_tokens(prompt.tokens)
    # human surrogates draw from their own stream, so they never replay a model sample
    stream = HUMAN_STREAM if human else MODEL_STREAM
    toks = sample_batch(model, [prompt.tokens[-1]], length, [gen_seed], temperature, stream)[0]
    return TokenSeq(tuple(toks), Origin.HUMAN if human else Origin.UNWATERMARKED, int(gen_seed))


def perplexity(oracle: SyntheticLM, seq) -> float:
    toks = oracle.check_tokens(seq.tokens if isinstance(seq, TokenSeq) else seq)
    if toks.size < 2:
        raise InputError("perplexity needs at least two tokens")
    p = oracle.context_table[toks[:-1], toks[1:]]
    return float(np.exp(-np.mean(np.log(np.maximum(p, PROB_FLOOR)))))


def make_prompts(model: SyntheticLM, count: int, length: int = 20, seed: int = 0) -> list[TokenSeq]:
    """Deterministic prompt pool: random start token, then model continuation."""
    if count < 1 or length < 1:
        raise ConfigurationError("need count >= 1 and length >= 1")
    rng = np.random.default_rng([int(seed), 0x9A0])
    starts = rng.integers(0, model.vocab_size, size=count)
    seeds = rng.integers(0, 2**63, size=count)
    body = sample_batch(model, starts, length - 1, seeds) if length > 1 else np.empty((count, 0), np.int64)
    return [TokenSeq((int(s),) + tuple(int(x) for x in b), Origin.PROMPT, int(sd))
            for s, b, sd in zip(starts, body, seeds)]


def derive_seeds(seed: int, count: int, stream: int = 0) -> list[int]:
    rng = np.random.default_rng([int(seed), int(stream), 0xD5])
    return [int(x) for x in rng.integers(0, 2**63, size=count)]


# ---- persistence ---------------------------------------------------------

def save_model_header(model: SyntheticLM, path) -> None:
    Path(path).write_text(json.dumps(model.header(), sort_keys=True, indent=2) + "\n")


def load_model_header(path) -> SyntheticLM:
    h = json.loads(Path(path).read_text())
    return build_model(h["vocab_size"], h["embed_dim"], h["model_seed"], tuple(h["entropy_mix"]),
                       h.get("category_signal", 0.25))


def write_corpus(path, seqs: Iterable[TokenSeq]) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_corpus(path) -> list[TokenSeq]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TokenSeq.from_json(json.loads(line)))
    return out
