"""Seeded green/red vocabulary partitioning.

Hard membership is a stateless hash of ``(step seed, token id)`` so a
detector can answer "is token v green after token p?" in O(1) without
materializing the list.  The hash constants and the splitmix64 finalizer
below are normative: any implementation using them reproduces the same
lists bit for bit.

Soft membership is the two-way Gumbel-Softmax relaxation used during
training.  Its noise is supplied by the caller; :func:`coupled_noise`
derives it from the same hash uniform as the hard draw, so that the
``tau -> 0`` limit of the soft list is exactly the hard list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

MASK64 = (1 << 64) - 1
PREV_MULT = 0x9E3779B97F4A7C15
TOKEN_MULT = 0xD2B74407B1CE6E93
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

GAMMA_MIN = 1e-3
GAMMA_MAX = 1.0 - 1e-3


def clamp_gamma(gamma):
    return np.clip(gamma, GAMMA_MIN, GAMMA_MAX)


def mix64(z):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
    return z


def _as_u64(x):
    if isinstance(x, (int, np.integer)):
        return np.uint64(int(x) & MASK64)
    return np.asarray(x).astype(np.uint64)


def step_seed(key, prev):
    """Per-step partition seed from the global key and the preceding token.

    Accepts scalars or arrays of ``prev``; returns uint64 with the same shape.
    """
    key = np.uint64(int(key) & MASK64)
    prev = _as_u64(prev)
    with np.errstate(over="ignore"):
        z = key ^ ((prev + np.uint64(1)) * np.uint64(PREV_MULT))
    out = mix64(z)
    return out if np.ndim(out) else np.uint64(out)


def membership_uniform(seed, v):
    """Hash uniform ``u in [0, 1)`` for token(s) ``v`` under a step seed.

    ``seed`` and ``v`` broadcast against each other.
    """
    seed = _as_u64(seed)
    v = _as_u64(v)
    with np.errstate(over="ignore"):
        z = seed ^ ((v + np.uint64(1)) * np.uint64(TOKEN_MULT))
    return mix64(z).astype(np.float64) / 2.0**64


def hard_membership(seed, v, gamma):
    """True when token ``v`` is green for the step keyed by ``seed``."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise InputError(f"gamma must lie in (0, 1), got {gamma}")
    out = membership_uniform(seed, v) < g
    return bool(out) if np.ndim(out) == 0 else out


def uniform_table(key, vocab_size):
    """``(V, V)`` matrix whose row p holds the hash uniforms after token p."""
    seeds = step_seed(key, np.arange(vocab_size, dtype=np.uint64))
    return membership_uniform(seeds[:, None], np.arange(vocab_size, dtype=np.uint64)[None, :])


def gumbel(u):
    """Inverse-transform Gumbel(0, 1) sample from uniforms."""
    return -np.log(-np.log(u))


def coupled_noise(u):
    """Gumbel-difference ``g0 - g1`` tied to the hash uniform ``u``.

    ``g0 - g1`` is Logistic(0, 1) for independent Gumbels; using the
    logistic quantile of ``1 - u`` makes ``ln g + g0 > ln(1-g) + g1``
    hold exactly when ``u < g``, i.e. the soft draw's argmax is the hard draw.
    """
    u = np.clip(u, 2.0**-64, 1.0 - 2.0**-53)
    return np.log1p(-u) - np.log(u)


def independent_noise(rng, shape):
    """Independent Gumbel pair difference ``g0 - g1`` from a numpy Generator."""
    u = rng.random((2,) + tuple(shape))
    u = np.clip(u, 1e-300, None)
    return gumbel(u[0]) - gumbel(u[1])


@dataclass(frozen=True)
class SoftMembership:
    value: float
    g0: float
    g1: float
    tau: float


def soft_values(gamma, tau, noise_diff):
    """Vectorized relaxed membership given ``g0 - g1``.

    Equals ``exp(a)/(exp(a)+exp(b))`` with ``a=(ln g + g0)/tau`` and
    ``b=(ln(1-g) + g1)/tau``, evaluated as a stable sigmoid of ``a - b``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    x = (np.log(gamma) - np.log1p(-gamma) + noise_diff) / tau
    return _sigmoid(x)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_membership(gamma: float, tau: float, g0: float, g1: float) -> SoftMembership:
    if tau <= 0:
        raise InputError(f"temperature must be positive, got {tau}")
    if not 0.0 < gamma < 1.0:
        raise InputError(f"gamma must lie in (0, 1), got {gamma}")
    value = float(soft_values(np.array([gamma]), tau, np.array([g0 - g1]))[0])
    return SoftMembership(value=value, g0=g0, g1=g1, tau=tau)
