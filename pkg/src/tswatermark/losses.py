"""Detection and semantic objectives with exact gradients.

Both losses are batch means over the sequences of a :class:`RolloutTrace`.
Each loss returns the upstream gradient on the trace quantities it reads;
:func:`trace_backward` pushes that through softmax, the logit bias and the
relaxed membership to per-step ``(d gamma_t, d delta_t)``, and
:func:`parameter_gradient` folds those into the flat parameter vector of
the (gamma net, delta net) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, UsageError
from .generators import GeneratorNet
from .pipeline import RolloutTrace


@dataclass(frozen=True, eq=False)
class SentenceEmbedder:
    projection: np.ndarray  # (d_s, d)
    seed: int

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]


def make_embedder(d: int, d_s: int = 16, seed: int = 0) -> SentenceEmbedder:
    rng = np.random.default_rng([int(seed), int(d), int(d_s), 0xE8])
    P = rng.standard_normal((d_s, d)) / np.sqrt(d)
    P.setflags(write=False)
    return SentenceEmbedder(P, int(seed))


def embed_sequence(embedder: SentenceEmbedder, embeddings) -> np.ndarray:
    """Mean-pool, project, L2-normalize."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise InputError("cannot embed an empty sequence")
    q = embedder.projection @ X.mean(axis=0)
    return q / np.linalg.norm(q)


@dataclass
class LossGrad:
    value: float
    per_seq: np.ndarray
    d_pgreen: np.ndarray | None = None  # (B, T)
    d_gamma: np.ndarray | None = None   # (B, T), direct dependence only
    d_ebar: np.ndarray | None = None    # (B, T, d)


@dataclass
class LossPair:
    L_D: float
    L_S: float


def relaxed_z(p_green, gamma) -> np.ndarray:
    """Per-sequence relaxed z; arrays are ``(B, T)``."""
    var = np.sum(gamma * (1.0 - gamma), axis=-1)
    return (p_green.sum(axis=-1) - gamma.sum(axis=-1)) / np.sqrt(var)


def detection_loss(trace: RolloutTrace) -> LossGrad:
    """``L_D = -z_hat`` averaged over the batch, with its upstream gradients."""
    if trace.length < 1:
        raise InputError("trace must contain at least one step")
    g, pg = trace.gamma, trace.p_green
    S = np.sum(g * (1.0 - g), axis=1)
    if np.any(S <= 1e-9):
        raise NumericError("degenerate variance: every gamma sits at the clamp")
    N = pg.sum(axis=1) - g.sum(axis=1)
    zhat = N / np.sqrt(S)
    B = trace.batch
    rs = 1.0 / np.sqrt(S)[:, None]
    d_pg = -rs * np.ones_like(pg) / B
    # d(-zhat)/d gamma_t = 1/sqrt(S) + N (1 - 2 gamma_t) / (2 S^1.5)
    d_g = (rs + (N / (2.0 * S ** 1.5))[:, None] * (1.0 - 2.0 * g)) / B
    return LossGrad(float(-zhat.mean()), -zhat, d_pgreen=d_pg, d_gamma=d_g)


def semantic_loss(ref_tokens, trace: RolloutTrace, embedder: SentenceEmbedder, E: np.ndarray) -> LossGrad:
    """``L_S = -cos(f(ref), f(expected watermarked embeddings))``, batch mean.

    ``ref_tokens`` are the unwatermarked continuations ``(B, T)`` sharing
    prompt and sampling seed with the trace.
    """
    ref = np.atleast_2d(np.asarray(ref_tokens, dtype=np.int64))
    if ref.shape[0] != trace.batch:
        raise UsageError("reference batch does not match the rollout batch")
    B, T = trace.batch, trace.length
    P = embedder.projection
    s_ref = np.stack([embed_sequence(embedder, E[r]) for r in ref])
    m = trace.e_bar.mean(axis=1)               # (B, d)
    q = m @ P.T                                # (B, d_s)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    s_w = q / qn
    cos = np.sum(s_ref * s_w, axis=1)
    d_sw = -s_ref / B
    d_q = (d_sw - np.sum(d_sw * s_w, axis=1, keepdims=True) * s_w) / qn
    d_m = d_q @ P
    d_ebar = np.broadcast_to((d_m / T)[:, None, :], trace.e_bar.shape).copy()
    return LossGrad(float(-cos.mean()), -cos, d_ebar=d_ebar)


def trace_backward(trace: RolloutTrace, lg: LossGrad, E: np.ndarray):
    """Per-step gradients ``(d gamma_t, d delta_t)``, each ``(B, T)``."""
    ph = trace.p_hat
    d_logit = np.zeros_like(ph)
    if lg.d_pgreen is not None:
        # p_green = sum_v h_v p_v  ->  d/dl = p (h - p_green)
        d_logit += lg.d_pgreen[..., None] * ph * (trace.hard - trace.p_green[..., None])
    if lg.d_ebar is not None:
        gp = lg.d_ebar @ E.T                                   # d/dp_hat
        d_logit += ph * (gp - np.sum(ph * gp, axis=-1, keepdims=True))
    y = trace.y_soft
    d_delta = np.sum(d_logit * y, axis=-1)
    d_y = d_logit * trace.delta[..., None]
    g = trace.gamma
    dy_dg = y * (1.0 - y) / (trace.tau * (g * (1.0 - g)))[..., None]
    d_gamma = np.sum(d_y * dy_dg, axis=-1)
    if lg.d_gamma is not None:
        d_gamma = d_gamma + lg.d_gamma
    return d_gamma, d_delta


def parameter_gradient(trace: RolloutTrace, lg: LossGrad, g_net: GeneratorNet, d_net: GeneratorNet,
                       E: np.ndarray) -> np.ndarray:
    """Flat gradient over (gamma net params, delta net params)."""
    if trace.g_cache is None or trace.d_cache is None:
        raise UsageError("trace carries no generator caches")
    d_gamma, d_delta = trace_backward(trace, lg, E)
    V = E.shape[0]
    prev = trace.prev.ravel()
    up_g = np.bincount(prev, weights=d_gamma.ravel(), minlength=V)
    up_d = np.bincount(prev, weights=d_delta.ravel(), minlength=V)
    gg = g_net.backward(trace.g_cache, up_g)
    gd = d_net.backward(trace.d_cache, up_d)
    return np.concatenate([gg.flat(), gd.flat()])
