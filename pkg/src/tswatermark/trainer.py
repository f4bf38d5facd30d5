"""Multi-objective training of the generator pair.

Each step rolls out a batch softly, computes batch-mean ``L_D`` and
``L_S`` and their full-parameter gradients, picks the min-norm convex
combination of the two (MGDA) or a fixed weighted sum, and applies Adam.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .errors import ConfigurationError, InputError, TrainingAborted
from .generators import DELTA, GAMMA, GeneratorNet, init_to_constant, pair_flat, set_pair_flat
from .lm import SyntheticLM, TokenSeq, derive_seeds, sample_batch
from .pipeline import generate_batch, soft_rollout_batch

log = logging.getLogger(__name__)

MGDA = "MGDA"
WEIGHTED_SUM = "WEIGHTED_SUM"


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 2
    lr: float = 1e-4
    tau: float = 0.1
    gen_length: int = 200
    checkpoint_every: int = 100
    mode: str = MGDA
    lambda_ws: float = 4e-4
    data_seed: int = 0
    noise_seed: int = 0
    init_seed: int = 0
    noise: str = "coupled"
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.tau <= 0 or self.batch_size < 1:
            raise ConfigurationError("need lr > 0, tau > 0 and batch_size >= 1")
        if self.mode not in (MGDA, WEIGHTED_SUM):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == WEIGHTED_SUM and self.lambda_ws < 0:
            raise ConfigurationError("lambda_ws must be non-negative")
        if self.checkpoint_every < 1 or self.gen_length < 1 or self.epochs < 1:
            raise ConfigurationError("checkpoint_every, gen_length and epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---- MGDA and friends ----------------------------------------------------

def mgda_lambda(g_D, g_S) -> float:
    """Weight on ``g_D`` of the min-norm point of the segment [g_S, g_D]."""
    g_D = np.asarray(g_D, dtype=np.float64)
    g_S = np.asarray(g_S, dtype=np.float64)
    if g_D.shape != g_S.shape:
        raise InputError("gradient vectors differ in length")
    dd, ds, ss = g_D @ g_D, g_D @ g_S, g_S @ g_S
    if dd == 0.0 and ss == 0.0:
        return 0.5  # already Pareto-stationary; any weight gives the zero vector
    if ds >= dd:
        return 1.0
    if ds >= ss:
        return 0.0
    return float(((g_S - g_D) @ g_S) / ((g_D - g_S) @ (g_D - g_S)))


def combine_gradients(g_D, g_S, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise InputError("lambda must lie in [0, 1]")
    return lam * np.asarray(g_D) + (1.0 - lam) * np.asarray(g_S)


def weighted_sum_grad(g_D, g_S, lambda_ws: float) -> np.ndarray:
    """Gradient of ``L_S + lambda_ws * L_D``."""
    if lambda_ws < 0:
        raise InputError("lambda_ws must be non-negative")
    return np.asarray(g_S) + lambda_ws * np.asarray(g_D)


def lambda_ws_from_moo(lam_moo: float) -> float:
    return lam_moo / (1.0 - lam_moo)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grad, state: AdamState, lr: float) -> np.ndarray:
    """Bias-corrected Adam update; mutates ``state`` and returns new params."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or np.shape(params) != grad.shape:
        raise InputError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingAborted(f"non-finite gradient at {bad.size} coordinates (first index {bad[0]})")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return np.asarray(params) - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---- validation ----------------------------------------------------------

@dataclass
class ValPoint:
    mean_z: float
    mean_cos: float


def evaluate_pair(model: SyntheticLM, g_net, d_net, key: int, prompts: list[TokenSeq], length: int,
                  gen_seeds, embedder) -> tuple[ValPoint, dict]:
    """Hard-generate, detect, and compare against unwatermarked twins."""
    last = [p.tokens[-1] for p in prompts]
    wm = generate_batch(model, g_net, d_net, key, last, length, gen_seeds)
    ref = sample_batch(model, last, length, gen_seeds)
    # the first generated token has no in-text predecessor and is unscored
    f, g = wm.flags[:, 1:], wm.gammas[:, 1:]
    z = (f.sum(1) - g.sum(1)) / np.sqrt(np.sum(g * (1 - g), axis=1))
    E = model.embedding_matrix
    cos = np.array([L.embed_sequence(embedder, E[a]) @ L.embed_sequence(embedder, E[b])
                    for a, b in zip(wm.tokens, ref)])
    return ValPoint(float(z.mean()), float(cos.mean())), {"z": z, "cos": cos, "wm": wm, "ref": ref}


@dataclass
class Checkpoint:
    step: int
    params: np.ndarray = field(repr=False)
    val: ValPoint


@dataclass
class TrainResult:
    checkpoints: list
    selected: int
    log: list
    final_params: np.ndarray = field(repr=False)
    n_gamma_params: int = 0

    @property
    def selected_checkpoint(self) -> Checkpoint:
        return self.checkpoints[self.selected]


def select_checkpoint(points: list[ValPoint]) -> int:
    """Index maximizing the mean of min-max normalized (z, cosine); earliest on ties."""
    z = np.array([p.mean_z for p in points])
    c = np.array([p.mean_cos for p in points])

    def norm(x):
        span = x.max() - x.min()
        return np.zeros_like(x) if span <= 0 else (x - x.min()) / span

    score = 0.5 * (norm(z) + norm(c))
    return int(np.flatnonzero(score == score.max())[0])


def split_prompts(prompts: list[TokenSeq], n_train: int, n_val: int, seed: int):
    if not prompts:
        raise ConfigurationError("prompt pool is empty")
    if n_train + n_val > len(prompts):
        raise ConfigurationError(f"need {n_train + n_val} prompts, have {len(prompts)}")
    order = np.random.default_rng([int(seed), 0x5B1]).permutation(len(prompts))
    return [prompts[i] for i in order[:n_train]], [prompts[i] for i in order[n_train:n_train + n_val]]


def init_pair(init_gamma: float, init_delta: float, init_seed: int, d: int, hidden: int = 64):
    return (init_to_constant(GAMMA, init_gamma, init_seed, d, hidden),
            init_to_constant(DELTA, init_delta, init_seed, d, hidden))


def train(config: TrainConfig, model: SyntheticLM, train_prompts: list[TokenSeq], val_prompts: list[TokenSeq],
          g_net: GeneratorNet, d_net: GeneratorNet, key: int, embedder, on_checkpoint=None) -> TrainResult:
    """Train ``(g_net, d_net)`` in place and return checkpoints and the log."""
    if not train_prompts or not val_prompts:
        raise ConfigurationError("empty prompt pool")
    cfg = config
    E = model.embedding_matrix
    n_g = g_net.n_params
    params = pair_flat(g_net, d_net)
    adam = AdamState.zeros(params.size)
    val_seeds = derive_seeds(cfg.data_seed, len(val_prompts), stream=1)
    steps_per_epoch = max(1, len(train_prompts) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    checkpoints, records = [], []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.data_seed, epoch, 0xE90]).permutation(len(train_prompts))
        seeds = derive_seeds(cfg.data_seed, len(train_prompts), stream=100 + epoch)
        nseeds = derive_seeds(cfg.noise_seed, len(train_prompts), stream=100 + epoch)
        for i in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            last = [train_prompts[j].tokens[-1] for j in idx]
            gs = [seeds[j] for j in idx]
            ns = [nseeds[j] for j in idx]
            trace = soft_rollout_batch(model, g_net, d_net, key, last, cfg.gen_length, cfg.tau, gs, ns, cfg.noise)
            ref = sample_batch(model, last, cfg.gen_length, gs)
            ld = L.detection_loss(trace)
            ls = L.semantic_loss(ref, trace, embedder, E)
            if not (math.isfinite(ld.value) and math.isfinite(ls.value)):
                raise TrainingAborted(f"loss diverged at step {step}: L_D={ld.value}, L_S={ls.value}")
            g_D = L.parameter_gradient(trace, ld, g_net, d_net, E)
            g_S = L.parameter_gradient(trace, ls, g_net, d_net, E)
            if cfg.mode == MGDA:
                lam = mgda_lambda(g_D, g_S)
                grad = combine_gradients(g_D, g_S, lam)
            else:
                lam = None
                grad = weighted_sum_grad(g_D, g_S, cfg.lambda_ws)
            params = adam_step(params, grad, adam, cfg.lr)
            set_pair_flat(g_net, d_net, params)
            step += 1
            rec = {"step": step, "epoch": epoch, "L_D": ld.value, "L_S": ls.value, "lambda": lam,
                   "norm_g_D": float(np.linalg.norm(g_D)), "norm_g_S": float(np.linalg.norm(g_S))}
            if step % cfg.checkpoint_every == 0 or step == total:
                vp, _ = evaluate_pair(model, g_net, d_net, key, val_prompts, cfg.gen_length, val_seeds, embedder)
                ck = Checkpoint(step, params.copy(), vp)
                checkpoints.append(ck)
                rec["val_mean_z"] = vp.mean_z
                rec["val_mean_cos"] = vp.mean_cos
                log.info("step %d: val z=%.4f cos=%.4f", step, vp.mean_z, vp.mean_cos)
                if on_checkpoint is not None:
                    on_checkpoint(ck)
            records.append(rec)
    if not checkpoints:
        raise TrainingAborted("training produced no checkpoints")
    sel = select_checkpoint([c.val for c in checkpoints])
    return TrainResult(checkpoints, sel, records, params.copy(), n_g)


def write_log(path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
