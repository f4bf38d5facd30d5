"""Dynamic-gamma z-test detection.

The statistic is ``(greens - sum(gamma)) / sqrt(sum(gamma * (1 - gamma)))``
over scored tokens; the first token of a text has no predecessor and is
never scored.  Detection needs the token ids, the key, the gamma net and
the embedding matrix, and nothing from the language model's logits.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError
from .generators import GeneratorNet
from .lm import TokenSeq
from .partition import GAMMA_MAX, GAMMA_MIN, membership_uniform, step_seed

MIN_RELIABLE_T = 25


class LowConfidenceWarning(UserWarning):
    """Fewer scored tokens than the normal approximation comfortably supports."""


def z_score(flags, gammas) -> float:
    flags = np.asarray(flags, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if flags.shape != gammas.shape or flags.ndim != 1:
        raise InputError("flags and gammas must be 1-D with equal length")
    if flags.size < 1:
        raise InputError("need at least one scored token")
    if np.any(gammas < GAMMA_MIN - 1e-15) or np.any(gammas > GAMMA_MAX + 1e-15):
        raise InputError("gamma values must lie in [1e-3, 1 - 1e-3]")
    if flags.size < MIN_RELIABLE_T:
        warnings.warn(f"only {flags.size} scored tokens; z-score is low confidence", LowConfidenceWarning,
                      stacklevel=2)
    return float((flags.sum() - gammas.sum()) / math.sqrt(np.sum(gammas * (1.0 - gammas))))


@dataclass
class DetectionResult:
    T: int
    green_count: int
    sum_gamma: float
    sum_var: float
    z: float
    threshold: float
    verdict: bool
    flags: list = field(repr=False)
    low_confidence: bool = False
    window_offset: int | None = None

    def report(self) -> dict:
        out = {"z": self.z, "green_count": self.green_count, "T": self.T,
               "threshold": self.threshold, "verdict": self.verdict}
        if self.window_offset is not None:
            out["window_offset"] = self.window_offset
        return out


def _tokens(text) -> np.ndarray:
    return np.asarray(text.tokens if isinstance(text, TokenSeq) else text, dtype=np.int64)


def score_tokens(tokens, g_net: GeneratorNet, embedding_matrix: np.ndarray, key: int):
    """Per scored position: (gamma_t, green flag).  Length is ``len(tokens) - 1``."""
    toks = _tokens(tokens)
    V = embedding_matrix.shape[0]
    if toks.size < 2:
        raise InputError("text must contain at least two tokens")
    if toks.min() < 0 or toks.max() >= V:
        raise InputError("token id out of range")
    # whole-vocabulary evaluation matches the table generation reads from
    gam_tab = g_net.forward(embedding_matrix)[0]
    prev, nxt = toks[:-1], toks[1:]
    gammas = gam_tab[prev]
    flags = membership_uniform(step_seed(key, prev.astype(np.uint64)), nxt.astype(np.uint64)) < gammas
    return gammas, flags


def detect(text, g_net: GeneratorNet, embedding_matrix: np.ndarray, key: int,
           threshold: float = 4.0) -> DetectionResult:
    gammas, flags = score_tokens(text, g_net, embedding_matrix, key)
    T = int(flags.size)
    s_g = float(gammas.sum())
    s_v = float(np.sum(gammas * (1.0 - gammas)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowConfidenceWarning)
        z = z_score(flags, gammas)
    return DetectionResult(T, int(flags.sum()), s_g, s_v, z, float(threshold), bool(z > threshold),
                           flags.tolist(), T < MIN_RELIABLE_T)


def window_z_scores(flags, gammas, window: int) -> np.ndarray:
    """z of every stride-1 window of ``window`` scored positions."""
    f = np.concatenate([[0.0], np.cumsum(np.asarray(flags, dtype=np.float64))])
    g = np.asarray(gammas, dtype=np.float64)
    cg = np.concatenate([[0.0], np.cumsum(g)])
    cv = np.concatenate([[0.0], np.cumsum(g * (1.0 - g))])
    W = window
    return ((f[W:] - f[:-W]) - (cg[W:] - cg[:-W])) / np.sqrt(cv[W:] - cv[:-W])


def windowed_z(text, g_net, embedding_matrix, key, window: int):
    """Maximum windowed z and the scored-position offset where it occurs."""
    if window < MIN_RELIABLE_T:
        raise InputError(f"window must be >= {MIN_RELIABLE_T}")
    toks = _tokens(text)
    if toks.size < window + 1:
        raise InputError("window exceeds the number of scored tokens")
    gammas, flags = score_tokens(toks, g_net, embedding_matrix, key)
    zs = window_z_scores(flags, gammas, window)
    off = int(np.argmax(zs))
    return float(zs[off]), off


def detect_windowed(text, g_net, embedding_matrix, key, window: int, threshold: float) -> DetectionResult:
    z, off = windowed_z(text, g_net, embedding_matrix, key, window)
    gammas, flags = score_tokens(text, g_net, embedding_matrix, key)
    sl = slice(off, off + window)
    g = gammas[sl]
    return DetectionResult(window, int(flags[sl].sum()), float(g.sum()), float(np.sum(g * (1 - g))), z,
                           float(threshold), bool(z > threshold), flags[sl].tolist(), False, off)


@dataclass
class AnnotatedToken:
    token: int
    green: bool
    gamma: float
    delta: float


def annotate(text, g_net, d_net, embedding_matrix, key) -> list[AnnotatedToken]:
    """Flag, gamma and delta for every scored token (positions 2..T)."""
    toks = _tokens(text)
    gammas, flags = score_tokens(toks, g_net, embedding_matrix, key)
    deltas = d_net.forward(embedding_matrix)[0][toks[:-1]]
    return [AnnotatedToken(int(t), bool(f), float(g), float(d))
            for t, f, g, d in zip(toks[1:], flags, gammas, deltas)]


_GREEN = "\x1b[32m"
_RED = "\x1b[31m"
_RESET = "\x1b[0m"


def render_annotation(rows: list[AnnotatedToken], color: bool = True) -> str:
    if not color:
        return json.dumps([asdict(r) for r in rows])
    parts = [f"{_GREEN if r.green else _RED}{r.token}{_RESET}" for r in rows]
    return " ".join(parts)


def format_report(res: DetectionResult) -> str:
    rows = [("T", res.T), ("green_count", res.green_count), ("sum_gamma", f"{res.sum_gamma:.4f}"),
            ("z", f"{res.z:.4f}"), ("threshold", f"{res.threshold:.4f}"), ("verdict", res.verdict)]
    if res.window_offset is not None:
        rows.append(("window_offset", res.window_offset))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
