"""Two-layer perceptrons producing the splitting ratio and watermark logit.

Both nets map a preceding-token embedding ``e`` (length d) through
``LeakyReLU(W1 e + b1)`` and a linear read-out.  The GAMMA head squashes
with a sigmoid (then clamps to [1e-3, 1-1e-3]); the DELTA head uses
softplus so the logit stays positive.

Forward and backward accept a single embedding or a batch ``(n, d)``; the
backward of a batch returns parameter gradients summed over rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError, UsageError
from .partition import GAMMA_MAX, GAMMA_MIN

GAMMA = "GAMMA"
DELTA = "DELTA"
CHECKPOINT_FORMAT = "tswatermark-generators"
CHECKPOINT_VERSION = 1
PARAM_ORDER = "gamma.W1 (row-major h x d), gamma.b1, gamma.W2, gamma.b2, delta.W1, delta.b1, delta.W2, delta.b2"


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class Cache:
    net_version: int
    e: np.ndarray
    a: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray
    out: np.ndarray
    single: bool


@dataclass
class Grads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    de: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), [self.b2]])


class GeneratorNet:
    def __init__(self, kind, W1, b1, W2, b2, leaky_slope=0.01):
        if kind not in (GAMMA, DELTA):
            raise ConfigurationError(f"unknown generator kind {kind!r}")
        self.kind = kind
        self.W1 = np.array(W1, dtype=np.float64)
        self.b1 = np.array(b1, dtype=np.float64).reshape(-1)
        self.W2 = np.array(W2, dtype=np.float64).reshape(-1)
        self.b2 = float(b2)
        self.leaky_slope = float(leaky_slope)
        h, d = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape != (h,):
            raise ConfigurationError("inconsistent parameter shapes")
        self._version = 0

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_params(self) -> int:
        h, d = self.W1.shape
        return h * d + h + h + 1

    def copy(self) -> "GeneratorNet":
        return GeneratorNet(self.kind, self.W1, self.b1, self.W2, self.b2, self.leaky_slope)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2, [self.b2]])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise InputError(f"expected {self.n_params} parameters, got {flat.shape}")
        h, d = self.W1.shape
        i = 0
        self.W1 = flat[i:i + h * d].reshape(h, d).copy(); i += h * d
        self.b1 = flat[i:i + h].copy(); i += h
        self.W2 = flat[i:i + h].copy(); i += h
        self.b2 = float(flat[i])
        self._version += 1

    def forward(self, e):
        e = np.asarray(e, dtype=np.float64)
        single = e.ndim == 1
        E = e[None, :] if single else e
        if E.ndim != 2 or E.shape[1] != self.dim:
            raise InputError(f"embedding dimension mismatch: expected {self.dim}, got {e.shape}")
        a = E @ self.W1.T + self.b1
        hidden = np.where(a > 0, a, self.leaky_slope * a)
        raw = hidden @ self.W2 + self.b2
        if self.kind == GAMMA:
            out = np.clip(sigmoid(raw), GAMMA_MIN, GAMMA_MAX)
        else:
            out = softplus(raw)
        cache = Cache(self._version, E, a, hidden, raw, out, single)
        return (float(out[0]) if single else out), cache

    def __call__(self, e):
        return self.forward(e)[0]

    def backward(self, cache: Cache, upstream) -> Grads:
        if cache.net_version != self._version:
            raise UsageError("cache is stale: parameters changed since forward")
        up = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if up.shape[0] != cache.raw.shape[0]:
            raise InputError("upstream length does not match cached batch")
        if self.kind == GAMMA:
            s = sigmoid(cache.raw)
            inside = (s > GAMMA_MIN) & (s < GAMMA_MAX)
            draw = up * s * (1.0 - s) * inside
        else:
            draw = up * sigmoid(cache.raw)
        dW2 = draw @ cache.hidden
        db2 = float(draw.sum())
        dhidden = draw[:, None] * self.W2[None, :]
        da = dhidden * np.where(cache.a > 0, 1.0, self.leaky_slope)
        dW1 = da.T @ cache.e
        db1 = da.sum(axis=0)
        de = da @ self.W1
        return Grads(dW1, db1, dW2, db2, de[0] if cache.single else de)


def _kaiming(rng, fan_in, shape, slope):
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    return rng.standard_normal(shape) * gain / math.sqrt(fan_in)


def init_to_constant(kind: str, target: float, init_seed: int, d: int, h: int = 64,
                     leaky_slope: float = 0.01) -> GeneratorNet:
    """Kaiming-initialized net whose output starts (nearly) at ``target``."""
    if kind == GAMMA:
        if not 0.0 < target < 1.0:
            raise ConfigurationError(f"gamma target must lie in (0, 1), got {target}")
        b2 = math.log(target) - math.log1p(-target)
    elif kind == DELTA:
        if not target > 0.0:
            raise ConfigurationError(f"delta target must be positive, got {target}")
        b2 = target + math.log(-math.expm1(-target))  # ln(exp(t) - 1), overflow-safe
    else:
        raise ConfigurationError(f"unknown generator kind {kind!r}")
    rng = np.random.default_rng([int(init_seed) & ((1 << 64) - 1), 0 if kind == GAMMA else 1])
    W1 = _kaiming(rng, d, (h, d), leaky_slope)
    b1 = _kaiming(rng, d, (h,), leaky_slope)
    W2 = _kaiming(rng, h, (h,), leaky_slope) * 1e-2
    return GeneratorNet(kind, W1, b1, W2, b2, leaky_slope)


def constant_net(kind: str, value: float, d: int, h: int = 1) -> GeneratorNet:
    """Net with zero weights emitting exactly ``value`` (KGW-style constants)."""
    net = init_to_constant(kind, value, 0, d, h)
    net.W1[:] = 0.0
    net.b1[:] = 0.0
    net.W2[:] = 0.0
    return net


def pair_flat(g_net: GeneratorNet, d_net: GeneratorNet) -> np.ndarray:
    return np.concatenate([g_net.get_flat(), d_net.get_flat()])


def set_pair_flat(g_net: GeneratorNet, d_net: GeneratorNet, flat) -> None:
    n = g_net.n_params
    g_net.set_flat(flat[:n])
    d_net.set_flat(flat[n:])


# ---- checkpoint files ----------------------------------------------------

def _net_record(net: GeneratorNet) -> dict:
    return {"kind": net.kind, "d": net.dim, "h": net.hidden, "leaky_slope": net.leaky_slope,
            "params": [float(x) for x in net.get_flat()]}


def _net_from_record(rec: dict) -> GeneratorNet:
    d, h = int(rec["d"]), int(rec["h"])
    net = GeneratorNet(rec["kind"], np.zeros((h, d)), np.zeros(h), np.zeros(h), 0.0, rec["leaky_slope"])
    net.set_flat(np.asarray(rec["params"], dtype=np.float64))
    return net


def checkpoint_dict(g_net, d_net, extra: dict | None = None) -> dict:
    out = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "param_order": PARAM_ORDER,
           "gamma": _net_record(g_net), "delta": _net_record(d_net)}
    if extra:
        out.update(extra)
    return out


def save_checkpoint(path, g_net, d_net, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(g_net, d_net, extra), sort_keys=True) + "\n")


def load_checkpoint(path_or_dict):
    rec = path_or_dict if isinstance(path_or_dict, dict) else json.loads(Path(path_or_dict).read_text())
    if rec.get("format") != CHECKPOINT_FORMAT:
        raise InputError("not a generator checkpoint")
    if rec.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {rec.get('version')}")
    return _net_from_record(rec["gamma"]), _net_from_record(rec["delta"])
