"""Watermarked generation.

Two paths share one loop shape.  The hard path (inference) adds
``delta_t`` to the logits of tokens whose hash uniform falls below
``gamma_t``.  The soft path (training) replaces the 0/1 membership by the
Gumbel-Softmax value and records everything the losses need to
backpropagate into the generators.  Sampled tokens are treated as
constants for later steps.

All batch functions take the last prompt token of each sequence and one
``gen_seed`` per sequence; sequences with equal seeds consume equal
sampling noise whether or not they are watermarked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InputError
from .generators import GeneratorNet
from .lm import Origin, SamplingNoise, SyntheticLM, TokenSeq, gumbel_argmax, softmax
from .partition import coupled_noise, independent_noise, soft_values, uniform_table


@lru_cache(maxsize=8)
def _cached_uniform_table(key: int, vocab_size: int) -> np.ndarray:
    tab = uniform_table(key, vocab_size)
    tab.setflags(write=False)
    return tab


def membership_table(key: int, vocab_size: int) -> np.ndarray:
    """Hash uniforms for every (preceding token, candidate token) pair."""
    return _cached_uniform_table(int(key), int(vocab_size))


def generator_tables(g_net: GeneratorNet, d_net: GeneratorNet | None, E: np.ndarray):
    """Evaluate the generators once per vocabulary row.

    Generation and detection both read gamma through this table, so the
    values they compare against the hash uniforms are bit-identical.
    """
    gam, g_cache = g_net.forward(E)
    if d_net is None:
        return gam, None, g_cache, None
    dl, d_cache = d_net.forward(E)
    return gam, dl, g_cache, d_cache


def bias_logits(l, membership, delta):
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise InputError("delta must be non-negative")
    l = np.asarray(l, dtype=np.float64)
    membership = np.asarray(membership, dtype=np.float64)
    if l.shape != membership.shape:
        raise InputError("logit and membership lengths differ")
    if delta.ndim:
        delta = delta[..., None]
    return l + membership * delta


@dataclass
class HardGeneration:
    tokens: np.ndarray   # (B, T)
    gammas: np.ndarray   # (B, T)
    deltas: np.ndarray   # (B, T)
    flags: np.ndarray    # (B, T) bool


def generate_batch(model: SyntheticLM, g_net, d_net, key: int, last_tokens, length: int,
                   gen_seeds, temperature: float = 1.0) -> HardGeneration:
    if length < 1:
        raise InputError("length must be >= 1")
    last = model.check_tokens(last_tokens).reshape(-1)
    E = model.embedding_matrix
    gam_tab, del_tab, _, _ = generator_tables(g_net, d_net, E)
    U = membership_table(key, model.vocab_size)
    logtab = model.log_table
    noise = SamplingNoise(gen_seeds)
    B = len(last)
    toks = np.empty((B, length), dtype=np.int64)
    gammas = np.empty((B, length))
    deltas = np.empty((B, length))
    flags = np.empty((B, length), dtype=bool)
    prev = last
    rows = np.arange(B)
    for t in range(length):
        g = gam_tab[prev]
        dl = del_tab[prev]
        green = U[prev] < g[:, None]
        nxt = gumbel_argmax(logtab[prev] + green * dl[:, None], noise.next(model.vocab_size), temperature)
        toks[:, t] = nxt
        gammas[:, t] = g
        deltas[:, t] = dl
        flags[:, t] = green[rows, nxt]
        prev = nxt
    return HardGeneration(toks, gammas, deltas, flags)


def generate_watermarked(model, g_net, d_net, key, prompt: TokenSeq, length: int, gen_seed: int,
                         temperature: float = 1.0):
    """Returns ``(TokenSeq, gammas, green flags)`` for one prompt."""
    if prompt is None or len(prompt.tokens) == 0:
        raise InputError("prompt must be non-empty")
    out = generate_batch(model, g_net, d_net, key, [prompt.tokens[-1]], length, [gen_seed], temperature)
    seq = TokenSeq(tuple(out.tokens[0]), Origin.WATERMARKED, int(gen_seed))
    return seq, out.gammas[0].tolist(), out.flags[0].tolist()


@dataclass
class RolloutTrace:
    tau: float
    prev: np.ndarray     # (B, T) preceding token per step
    tokens: np.ndarray   # (B, T) sampled token per step
    gamma: np.ndarray    # (B, T)
    delta: np.ndarray    # (B, T)
    noise: np.ndarray    # (B, T, V) frozen g0 - g1
    y_soft: np.ndarray   # (B, T, V)
    hard: np.ndarray     # (B, T, V) bool, realized green list
    p_hat: np.ndarray    # (B, T, V)
    p_green: np.ndarray  # (B, T)
    e_bar: np.ndarray    # (B, T, d) expected embeddings
    g_cache: object = field(repr=False, default=None)
    d_cache: object = field(repr=False, default=None)

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]


def soft_rollout_batch(model: SyntheticLM, g_net, d_net, key: int, last_tokens, length: int, tau: float,
                       gen_seeds, noise_seeds=None, noise: str = "coupled",
                       replay: RolloutTrace | None = None) -> RolloutTrace:
    """Differentiable rollout for a batch.

    ``noise="coupled"`` derives the Gumbel difference from the hash uniform
    (soft list -> hard list as tau -> 0); ``"independent"`` draws fresh
    Gumbel pairs from ``noise_seeds``.  With ``replay`` the sampled tokens,
    realized green lists and noise are copied from an earlier trace, which
    is what finite-difference checks need.
    """
    if tau <= 0:
        raise InputError("temperature tau must be positive")
    if length < 1:
        raise InputError("length must be >= 1")
    last = model.check_tokens(last_tokens).reshape(-1)
    B, V = len(last), model.vocab_size
    E = model.embedding_matrix
    gam_tab, del_tab, g_cache, d_cache = generator_tables(g_net, d_net, E)
    logtab = model.log_table
    if replay is None:
        U = membership_table(key, V)
        sampler = SamplingNoise(gen_seeds)
        if noise == "independent":
            if noise_seeds is None:
                raise InputError("independent noise needs noise_seeds")
            rngs = [np.random.default_rng([int(s), 0x6B]) for s in noise_seeds]
        elif noise != "coupled":
            raise InputError(f"unknown noise mode {noise!r}")

    prev_all = np.empty((B, length), dtype=np.int64)
    toks = np.empty((B, length), dtype=np.int64)
    gamma = np.empty((B, length))
    delta = np.empty((B, length))
    noise_arr = np.empty((B, length, V))
    y_soft = np.empty((B, length, V))
    hard = np.empty((B, length, V), dtype=bool)
    p_hat = np.empty((B, length, V))
    p_green = np.empty((B, length))
    e_bar = np.empty((B, length, E.shape[1]))

    prev = last
    for t in range(length):
        g = gam_tab[prev]
        dl = del_tab[prev]
        if replay is None:
            u = U[prev]
            h = u < g[:, None]
            if noise == "coupled":
                nz = coupled_noise(u)
            else:
                nz = np.stack([independent_noise(r, (V,)) for r in rngs])
        else:
            h = replay.hard[:, t]
            nz = replay.noise[:, t]
        y = soft_values(g[:, None], tau, nz)
        lhat = logtab[prev] + y * dl[:, None]
        ph = softmax(lhat)
        prev_all[:, t] = prev
        gamma[:, t] = g
        delta[:, t] = dl
        noise_arr[:, t] = nz
        y_soft[:, t] = y
        hard[:, t] = h
        p_hat[:, t] = ph
        p_green[:, t] = (ph * h).sum(axis=1)
        e_bar[:, t] = ph @ E
        nxt = replay.tokens[:, t] if replay is not None else gumbel_argmax(lhat, sampler.next(V))
        toks[:, t] = nxt
        prev = nxt
    return RolloutTrace(tau, prev_all, toks, gamma, delta, noise_arr, y_soft, hard, p_hat, p_green, e_bar,
                        g_cache, d_cache)


def soft_rollout(model, g_net, d_net, key, prompt: TokenSeq, length: int, tau: float, gen_seed: int,
                 noise_seed: int = 0, noise: str = "coupled") -> RolloutTrace:
    if prompt is None or len(prompt.tokens) == 0:
        raise InputError("prompt must be non-empty")
    return soft_rollout_batch(model, g_net, d_net, key, [prompt.tokens[-1]], length, tau, [gen_seed],
                              [noise_seed], noise)
