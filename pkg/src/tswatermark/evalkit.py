"""Evaluation protocol: thresholds, TPR, similarity, trade-off curves.

Thresholds are calibrated on null z-scores by the nearest-rank rule and
verdicts use strict ``z > threshold``.  Trade-off curves are fitted with a
five-parameter logistic first and fall back to a three-parameter
exponential when the logistic fit is not concave over the data range.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import norm

from .errors import FitError, InputError
from .lm import CATEGORIES, TokenSeq
from .losses import embed_sequence

FIVE_PARAM_LOGISTIC = "FIVE_PARAM_LOGISTIC"
EXPONENTIAL = "EXPONENTIAL"
CONCAVITY_TOL = 1e-9
CONCAVITY_GRID = 100


# ---- thresholds and rates ------------------------------------------------

def calibrate_threshold(null_z, fpr: float) -> float:
    """Threshold whose strict exceedance rate on ``null_z`` is at most ``fpr``."""
    z = np.sort(np.asarray(null_z, dtype=np.float64))
    if z.size == 0:
        raise InputError("null z-scores are empty")
    if not 0.0 <= fpr < 1.0:
        raise InputError("fpr must lie in [0, 1)")
    if fpr == 0.0:
        return float(z[-1] + 1e-9)
    # round away float noise such as 0.99 * 100 = 99.00000000000001
    rank = math.ceil(round((1.0 - fpr) * z.size, 9))
    return float(z[max(rank, 1) - 1])


def tpr(wm_z, threshold: float) -> float:
    z = np.asarray(wm_z, dtype=np.float64)
    if z.size == 0:
        raise InputError("watermarked z-scores are empty")
    return float(np.mean(z > threshold))


def similarity(wm, ref, embedder, model) -> float:
    """Cosine of the sentence embeddings of two token sequences."""
    a = np.asarray(wm.tokens if isinstance(wm, TokenSeq) else wm, dtype=np.int64)
    b = np.asarray(ref.tokens if isinstance(ref, TokenSeq) else ref, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        raise InputError("cannot compare empty sequences")
    E = model.embedding_matrix
    return float(np.clip(embed_sequence(embedder, E[a]) @ embed_sequence(embedder, E[b]), -1.0, 1.0))


def normal_cdf_cc(gammas, k) -> np.ndarray:
    """Normal approximation with continuity correction to P(greens <= k) under the null."""
    g = np.asarray(gammas, dtype=np.float64)
    mu, sd = g.sum(), math.sqrt(np.sum(g * (1.0 - g)))
    return norm.cdf((np.asarray(k, dtype=np.float64) + 0.5 - mu) / sd)


# ---- trade-off points ----------------------------------------------------

@dataclass
class TradeoffPoint:
    mean_z: float
    tpr: float
    similarity: float
    config_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.tpr <= 1.0:
            raise InputError("TPR must lie in [0, 1]")


def pareto_filter(points: list[TradeoffPoint]) -> list[TradeoffPoint]:
    """Points not dominated in (TPR, similarity), input order kept."""
    if not points:
        return []
    t = np.array([p.tpr for p in points])
    s = np.array([p.similarity for p in points])
    ge = (t[None, :] >= t[:, None]) & (s[None, :] >= s[:, None])
    gt = (t[None, :] > t[:, None]) | (s[None, :] > s[:, None])
    dominated = np.any(ge & gt, axis=1)
    return [p for p, d in zip(points, dominated) if not d]


# ---- curve fitting -------------------------------------------------------

@dataclass
class CurveFit:
    family: str
    params: dict
    residual_rms: float
    concave: bool

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        p = self.params
        if self.family == FIVE_PARAM_LOGISTIC:
            return five_pl(x, p["a"], p["b"], p["c"], p["d"], p["g"])
        return exponential(x, p["a"], p["b"], p["c"])


def five_pl(x, a, b, c, d, g):
    return d + (a - d) / (1.0 + (x / c) ** b) ** g


def exponential(x, a, b, c):
    return -a * np.exp(b * x) + c


def _linear_tail(basis, y):
    """Least-squares (p, q) for y ~ p * basis + q * (1 - basis) style models."""
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return coef


def _fit_5pl(x, y):
    if np.any(x <= 0):
        return None, "five-parameter logistic needs x > 0"
    if x.size < 5:
        return None, "five-parameter logistic needs at least 5 points"

    def unpack(th):
        a, b, lc, d, lg = th
        return a, b, float(np.exp(np.clip(lc, -50, 50))), d, float(np.exp(np.clip(lg, -50, 50)))

    def resid(th):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            r = five_pl(x, *unpack(th)) - y
        return np.where(np.isfinite(r), r, 1e6)

    # seed (a, d) by linear least squares for each (b, c, g) on a coarse grid
    starts = []
    for b in (-8.0, -4.0, -2.0, -1.0, 1.0, 2.0, 4.0, 8.0):
        for c in np.quantile(x, [0.1, 0.5, 0.9]):
            for g in (0.5, 1.0, 2.0):
                s = 1.0 / (1.0 + (x / c) ** b) ** g
                a, d = _linear_tail(np.column_stack([s, 1.0 - s]), y)
                th = np.array([a, b, math.log(c), d, math.log(g)])
                starts.append((float(np.sum(resid(th) ** 2)), th))
    starts.sort(key=lambda t: t[0])
    best = None
    for _, th0 in starts[:8]:
        try:
            r = least_squares(resid, th0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        except (ValueError, FloatingPointError):
            continue
        if r.status > 0 and np.all(np.isfinite(r.x)) and (best is None or r.cost < best.cost):
            best = r
    if best is None:
        return None, "five-parameter logistic did not converge"
    a, b, c, d, g = unpack(best.x)
    return {"a": a, "b": b, "c": c, "d": d, "g": g}, None


def _fit_exp(x, y):
    if x.size < 3:
        return None, "exponential needs at least 3 points"
    span = max(float(np.ptp(x)), 1e-12)

    def resid(th):
        with np.errstate(over="ignore", invalid="ignore"):
            r = exponential(x, *th) - y
        return np.where(np.isfinite(r), r, 1e6)

    best = None
    for k in (-8.0, -3.0, -1.0, -0.3, 0.3, 1.0, 3.0, 8.0):
        b = k / span
        e = np.exp(b * (x - x.min()))
        neg_a_scaled, c = _linear_tail(np.column_stack([e, np.ones_like(x)]), y)
        th0 = np.array([-neg_a_scaled * math.exp(-b * x.min()), b, c])
        try:
            r = least_squares(resid, th0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        except (ValueError, FloatingPointError):
            continue
        if r.status > 0 and np.all(np.isfinite(r.x)) and (best is None or r.cost < best.cost):
            best = r
    if best is None:
        return None, "exponential did not converge"
    a, b, c = best.x
    return {"a": float(a), "b": float(b), "c": float(c)}, None


def is_concave(fit: CurveFit, lo: float, hi: float) -> bool:
    xs = np.linspace(lo, hi, CONCAVITY_GRID)
    with np.errstate(all="ignore"):
        second = np.diff(fit(xs), 2)
    return bool(np.all(np.isfinite(second)) and np.all(second <= CONCAVITY_TOL))


def fit_curve(x, y, family: str) -> CurveFit:
    """Fit one family; raises FitError if it does not converge."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("x and y must be 1-D with equal length")
    if family == FIVE_PARAM_LOGISTIC:
        params, why = _fit_5pl(x, y)
    elif family == EXPONENTIAL:
        params, why = _fit_exp(x, y)
    else:
        raise InputError(f"unknown curve family {family!r}")
    if params is None:
        raise FitError(why, {"family": family, "n_points": int(x.size)})
    fit = CurveFit(family, params, 0.0, False)
    res = fit(x) - y
    fit.residual_rms = float(np.sqrt(np.mean(res ** 2)))
    fit.concave = is_concave(fit, float(x.min()), float(x.max()))
    return fit


def fit_tradeoff(points) -> CurveFit:
    """Logistic first; exponential when the logistic is not concave or fails.

    When both fits converge and both are concave, the lower residual wins.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError("points must be (x, y) pairs")
    x, y = pts[:, 0], pts[:, 1]
    fits, errors = {}, {}
    for fam in (FIVE_PARAM_LOGISTIC, EXPONENTIAL):
        try:
            fits[fam] = fit_curve(x, y, fam)
        except FitError as exc:
            errors[fam] = str(exc)
    if not fits:
        raise FitError("no curve family converged", errors)
    logistic = fits.get(FIVE_PARAM_LOGISTIC)
    exp_fit = fits.get(EXPONENTIAL)
    if logistic is not None and logistic.concave:
        if exp_fit is not None and exp_fit.concave and exp_fit.residual_rms < logistic.residual_rms:
            return exp_fit
        return logistic
    if exp_fit is None:
        raise FitError("logistic fit is not concave and the exponential fit failed", errors)
    return exp_fit


def curve_samples(fit: CurveFit, lo: float, hi: float, n: int = 100) -> list[tuple[float, float]]:
    xs = np.linspace(lo, hi, n)
    return [(float(a), float(b)) for a, b in zip(xs, fit(xs))]


def write_curve_csv(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in samples:
            w.writerow([repr(x), repr(y)])


# ---- learned-parameter statistics ------------------------------------------

def _category_lookup(category_map, V: int) -> np.ndarray:
    if isinstance(category_map, dict):
        missing = [v for v in range(V) if v not in category_map]
        if missing:
            raise InputError(f"category map does not cover token {missing[0]}")
        return np.array([CATEGORIES.index(category_map[v]) for v in range(V)])
    arr = np.asarray(category_map, dtype=np.int64)
    if arr.shape != (V,):
        raise InputError("category array must have one entry per token")
    return arr


def bucket_stats(texts, g_net, d_net, embedding_matrix, category_map) -> dict:
    """Mean and std (ddof 0) of gamma and delta grouped by the preceding token's category."""
    V = embedding_matrix.shape[0]
    cats = _category_lookup(category_map, V)
    gam = g_net.forward(embedding_matrix)[0]
    dl = d_net.forward(embedding_matrix)[0]
    prevs = []
    for t in texts:
        toks = np.asarray(t.tokens if isinstance(t, TokenSeq) else t, dtype=np.int64)
        if toks.size and (toks.min() < 0 or toks.max() >= V):
            raise InputError("token id not covered by the category map")
        prevs.append(toks[:-1])
    prev = np.concatenate(prevs) if prevs else np.empty(0, np.int64)
    out = {}
    for ci, name in enumerate(CATEGORIES):
        sel = prev[cats[prev] == ci]
        if sel.size == 0:
            continue
        g, d = gam[sel], dl[sel]
        out[name] = {"count": int(sel.size), "mean_gamma": float(g.mean()), "std_gamma": float(g.std()),
                     "mean_delta": float(d.mean()), "std_delta": float(d.std())}
    return out


# ---- reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    thresholds: dict
    tpr: dict
    similarity_mean: float
    similarity_std: float
    mean_z: float
    points: list = field(default_factory=list)
    fit: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def summarize(null_z, wm_z, sims, config_id: str = "") -> EvalReport:
    """Thresholds at 0% and 1% FPR and the matching TPRs for one configuration."""
    th = {"fpr_0": calibrate_threshold(null_z, 0.0), "fpr_1": calibrate_threshold(null_z, 0.01)}
    rates = {k: tpr(wm_z, v) for k, v in th.items()}
    sims = np.asarray(sims, dtype=np.float64)
    point = TradeoffPoint(float(np.mean(wm_z)), rates["fpr_1"], float(sims.mean()), config_id)
    return EvalReport(th, rates, float(sims.mean()), float(sims.std()), float(np.mean(wm_z)), [asdict(point)])
