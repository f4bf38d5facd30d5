"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line with its measured numbers; the lines
are printed together in the terminal summary (see conftest.py).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

import oracles
from tswatermark import attacks as A, cli, evalkit as EK, generators as G, lm, losses as L, pipeline as PL
from tswatermark import trainer as TR
from tswatermark.detector import detect, detect_windowed, z_score

RESULTS = {}

KEY = 42


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---- shared desk-scale setting --------------------------------------------

@pytest.fixture(scope="module")
def desk():
    m = lm.build_model(512, 32, 1)
    prompts = lm.make_prompts(m, 1300, 20, seed=0)
    tr, va = TR.split_prompts(prompts, 1200, 100, 0)
    return {"model": m, "train": tr, "val": va, "emb": L.make_embedder(32, 16, 0),
            "val_seeds": lm.derive_seeds(0, 100, stream=1)}


def _train(desk, mode, lambda_ws=4e-4):
    g, d = TR.init_pair(0.25, 1.25, 0, 32)
    # lr 1e-3: 300 steps at 1e-4 barely move the generators at this scale
    cfg = TR.TrainConfig(batch_size=8, epochs=2, lr=1e-3, tau=0.1, gen_length=200, checkpoint_every=50,
                         mode=mode, lambda_ws=lambda_ws)
    t0 = time.process_time()
    res = TR.train(cfg, desk["model"], desk["train"], desk["val"], g, d, KEY, desk["emb"])
    return res, g, d, time.process_time() - t0


@pytest.fixture(scope="module")
def mgda_run(desk):
    g0, d0 = TR.init_pair(0.25, 1.25, 0, 32)
    init, _ = TR.evaluate_pair(desk["model"], g0, d0, KEY, desk["val"], 200, desk["val_seeds"], desk["emb"])
    res, g, d, cpu = _train(desk, TR.MGDA)
    return {"init": init, "res": res, "g": g, "d": d, "cpu": cpu}


# ---- 1 ---------------------------------------------------------------------

def test_c01_gaussian_approximation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        gam = rng.uniform(0.05, 0.5, 200)
        exact = np.cumsum(oracles.poisson_binomial_pmf(gam))
        approx = EK.normal_cdf_cc(gam, np.arange(201))
        worst = max(worst, float(np.max(np.abs(exact - approx))))
    dt = time.perf_counter() - t0
    report(1, worst <= 0.02 and dt < 5.0, f"max |exact - normal| = {worst:.5f} (<= 0.02), {dt:.2f} s (< 5 s)")


# ---- 2 ---------------------------------------------------------------------

def test_c02_kgw_reduction(model512):
    rng = np.random.default_rng(2)
    worst = 0.0
    E = model512.embedding_matrix
    for _ in range(100):
        gamma = float(rng.uniform(0.05, 0.95))
        g = G.constant_net(G.GAMMA, gamma, 32)
        toks = rng.integers(0, 512, int(rng.integers(30, 300)))
        r = detect(toks, g, E, int(rng.integers(0, 2**63)))
        T = r.T
        kgw = (r.green_count - gamma * T) / math.sqrt(T * gamma * (1 - gamma))
        worst = max(worst, abs(r.z - kgw) / max(1.0, abs(kgw)))
    report(2, worst <= 1e-12, f"max relative |z - z_KGW| = {worst:.2e} over 100 cases")


# ---- 3 ---------------------------------------------------------------------

def test_c03_null_calibration():
    # V=4096 keeps the fixed-key repeated-bigram offset small (std printed below)
    m = lm.build_model(4096, 32, 1)
    g, _ = TR.init_pair(0.25, 1.25, 0, 32)
    prompts = lm.make_prompts(m, 2000, 20, seed=7)
    toks = lm.sample_batch(m, [p.tokens[-1] for p in prompts], 200, lm.derive_seeds(7, 2000, stream=9),
                           stream=lm.HUMAN_STREAM)
    z = np.array([detect(t, g, m.embedding_matrix, KEY).z for t in toks])
    th = EK.calibrate_threshold(z[:1000], 0.01)
    fpr = float(np.mean(z[1000:] > th))
    mean, var = float(z.mean()), float(z.var(ddof=1))
    off = oracles.bigram_offset_std(m.context_table, 199)
    ok = 0.002 <= fpr <= 0.025 and -0.1 <= mean <= 0.1 and 0.85 <= var <= 1.15
    report(3, ok, f"held-out FPR {fpr:.4f}, mean z {mean:+.4f}, var {var:.4f} "
                  f"(predicted key offset std {off:.3f})")


# ---- 4 ---------------------------------------------------------------------

def test_c04_gradients(model512):
    emb = L.make_embedder(32, 16, 0)
    E = model512.embedding_matrix
    last, seeds, T, h = [3, 77], [5, 6], 20, 1e-5
    # Central differences are only valid where the loss is smooth on [x - h, x + h].  A LeakyReLU
    # pre-activation closer than h to zero breaks that, so the evaluation point is the first
    # perturbation seed whose used pre-activations all keep a margin of at least 2h.
    for point_seed in range(4, 100):
        g, d = TR.init_pair(0.25, 1.25, 0, 32)
        rng = np.random.default_rng(point_seed)
        for net in (g, d):
            net.set_flat(net.get_flat() + 0.05 * rng.standard_normal(net.n_params))
        base = PL.soft_rollout_batch(model512, g, d, KEY, last, T, 0.1, seeds)
        used = E[np.unique(base.prev)]
        margin = min(float(np.abs(used @ n.W1.T + n.b1).min()) for n in (g, d))
        if margin >= 2 * h:
            break
    ref = lm.sample_batch(model512, last, T, seeds)
    a_D = L.parameter_gradient(base, L.detection_loss(base), g, d, E)
    a_S = L.parameter_gradient(base, L.semantic_loss(ref, base, emb, E), g, d, E)
    x0 = G.pair_flat(g, d)

    def both(x):
        G.set_pair_flat(g, d, x)
        tr = PL.soft_rollout_batch(model512, g, d, KEY, last, T, 0.1, seeds, replay=base)
        return np.array([L.detection_loss(tr).value, L.semantic_loss(ref, tr, emb, E).value])

    fd = np.empty((2, x0.size))
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        fd[:, i] = (both(x0 + e) - both(x0 - e)) / (2 * h)
    G.set_pair_flat(g, d, x0)
    eD = float(oracles.relative_error(a_D, fd[0]).max())
    eS = float(oracles.relative_error(a_S, fd[1]).max())
    report(4, max(eD, eS) <= 1e-4, f"point seed {point_seed} (kink margin {margin:.1e}), "
                                  f"{x0.size} parameters, max rel err L_D {eD:.2e}, L_S {eS:.2e} (<= 1e-4)")


# ---- 5 ---------------------------------------------------------------------

def test_c05_mgda_closed_form():
    rng = np.random.default_rng(5)
    worst_lam, worst_norm, worst_ip = 0.0, -np.inf, -np.inf
    for _ in range(100):
        n = int(rng.integers(10, 10_001))
        gD = rng.standard_normal(n) * rng.uniform(0.1, 10)
        gS = rng.standard_normal(n) * rng.uniform(0.1, 10) + rng.uniform(-1, 1) * gD
        lam = TR.mgda_lambda(gD, gS)
        lam_grid, best = oracles.grid_min_norm_lambda(gD, gS, 1e-4)
        gc = TR.combine_gradients(gD, gS, lam)
        worst_lam = max(worst_lam, abs(lam - lam_grid))
        worst_norm = max(worst_norm, float(np.linalg.norm(gc) - best))
        gg = gc @ gc
        worst_ip = max(worst_ip, gg - gc @ gD, gg - gc @ gS)
    ok = worst_lam <= 1e-3 and worst_norm <= 1e-9 and worst_ip <= 1e-9
    report(5, ok, f"max |lambda - grid| {worst_lam:.2e}, norm excess {worst_norm:.2e}, "
                  f"inner-product slack {worst_ip:.2e}")


# ---- 6 ---------------------------------------------------------------------

def _null_z(model, g, n=200, seed=61):
    prompts = lm.make_prompts(model, n, 20, seed=seed)
    toks = lm.sample_batch(model, [p.tokens[-1] for p in prompts], 200, lm.derive_seeds(seed, n, stream=9),
                           stream=lm.HUMAN_STREAM)
    return np.array([detect(t, g, model.embedding_matrix, KEY).z for t in toks])


def test_c06_detectability_monotone(model512):
    g = G.constant_net(G.GAMMA, 0.25, 32)
    th = EK.calibrate_threshold(_null_z(model512, g), 0.01)
    prompts = lm.make_prompts(model512, 100, 20, seed=60)
    last = [p.tokens[-1] for p in prompts]
    seeds = lm.derive_seeds(60, 100, stream=3)
    means, rates = [], []
    for delta in (0.5, 1.0, 2.0):
        out = PL.generate_batch(model512, g, G.constant_net(G.DELTA, delta, 32), KEY, last, 200, seeds)
        z = np.array([detect(t, g, model512.embedding_matrix, KEY).z for t in out.tokens])
        means.append(float(z.mean()))
        rates.append(EK.tpr(z, th))
    ok = means[0] < means[1] < means[2] and rates[2] > rates[0]
    report(6, ok, f"mean z {['%.3f' % x for x in means]}, TPR@1% {rates} for delta 0.5/1/2")


# ---- 7 and 8 ---------------------------------------------------------------

def test_c07_training_non_domination(mgda_run):
    init, res = mgda_run["init"], mgda_run["res"]
    fin = res.checkpoints[-1].val
    steps = res.checkpoints[-1].step
    dominated = (init.mean_z >= fin.mean_z and init.mean_cos >= fin.mean_cos
                 and (init.mean_z > fin.mean_z or init.mean_cos > fin.mean_cos))
    rz = (fin.mean_z - init.mean_z) / abs(init.mean_z)
    rc = (fin.mean_cos - init.mean_cos) / abs(init.mean_cos)
    ok = steps >= 300 and not dominated and max(rz, rc) >= 0.05 and mgda_run["cpu"] < 1800
    report(7, ok, f"{steps} steps, init (z {init.mean_z:.3f}, cos {init.mean_cos:.4f}) -> "
                  f"final (z {fin.mean_z:.3f}, cos {fin.mean_cos:.4f}); rel change z {rz:+.1%}, cos {rc:+.1%}; "
                  f"dominated={dominated}; {mgda_run['cpu']:.0f} s CPU")


def test_c08_entropy_adaptivity(desk, mgda_run):
    m, va = desk["model"], desk["val"]
    _, info = TR.evaluate_pair(m, mgda_run["g"], mgda_run["d"], KEY, va, 200, desk["val_seeds"], desk["emb"])
    wm = info["wm"]
    prev = np.concatenate([np.array([p.tokens[-1] for p in va])[:, None], wm.tokens[:, :-1]], axis=1)
    cat = m.categories[prev]
    low = wm.deltas[cat == lm.CATEGORIES.index("LOW_ENTROPY")]
    high = wm.deltas[cat == lm.CATEGORIES.index("HIGH_ENTROPY")]
    t = stats.ttest_ind(low, high, equal_var=False, alternative="less")
    ok = low.size + high.size >= 2000 and low.mean() < high.mean() and t.pvalue < 0.05
    report(8, ok, f"mean delta LOW {low.mean():.4f} (n={low.size}) vs HIGH {high.mean():.4f} (n={high.size}), "
                  f"Welch p = {t.pvalue:.2e}")


# ---- 9 ---------------------------------------------------------------------

def test_c09_copy_paste(model512):
    E = model512.embedding_matrix
    g, d = G.constant_net(G.GAMMA, 0.25, 32), G.constant_net(G.DELTA, 2.0, 32)
    n = 100
    prompts = lm.make_prompts(model512, n, 20, seed=90)
    wm = PL.generate_batch(model512, g, d, KEY, [p.tokens[-1] for p in prompts], 200,
                           lm.derive_seeds(90, n, stream=3)).tokens
    hp = lm.make_prompts(model512, 2 * n, 20, seed=91)
    human = lm.sample_batch(model512, [p.tokens[-1] for p in hp], 600, lm.derive_seeds(91, 2 * n, stream=9),
                            stream=lm.HUMAN_STREAM)
    wm_seqs = [lm.TokenSeq(tuple(t)) for t in wm]
    plain = np.array([detect(s, g, E, KEY).z for s in wm_seqs])
    th_full = EK.calibrate_threshold(_null_z(model512, g, 200, 92), 0.01)
    tpr_plain = EK.tpr(plain, th_full)

    ratios, verdicts = [], []
    for i, s in enumerate(wm_seqs):
        one = A.copy_paste(s, lm.TokenSeq(tuple(human[i])), 1, i)
        ratios.append(detect_windowed(one, g, E, KEY, 200, th_full).z / plain[i])
        three = A.copy_paste(s, lm.TokenSeq(tuple(human[i])), 3, i)
        verdicts.append(three)
    # windowed maxima have their own null law: calibrate W=60 on 800-token human texts
    null_w = [detect_windowed(np.concatenate([human[n + i], human[n + (i + 1) % n][:200]]), g, E, KEY, 60, 0).z
              for i in range(n)]
    th_w = EK.calibrate_threshold(null_w, 0.01)
    rate3 = float(np.mean([detect_windowed(s, g, E, KEY, 60, th_w).verdict for s in verdicts]))
    ratio = float(np.mean(ratios))
    ok = ratio >= 0.9 and tpr_plain >= 0.95 and rate3 >= 0.8
    report(9, ok, f"CP-1 mean windowed/unattacked z {ratio:.3f} (>= 0.9); unattacked TPR {tpr_plain:.2f}; "
                  f"CP-3 W=60 verdict rate {rate3:.2f} (>= 0.8) at calibrated threshold {th_w:.2f}")


# ---- 10 --------------------------------------------------------------------

def test_c10_weighted_sum_ablation(desk, mgda_run):
    mgda_pts = [(c.val.mean_z, c.val.mean_cos) for c in mgda_run["res"].checkpoints]
    dom = oracles.dominated_bruteforce(mgda_pts)
    front = [p for p, x in zip(mgda_pts, dom) if not x]
    rows, covered = [], 0
    for lam in (1e-4, 2e-4, 4e-4, 8e-4):
        res, *_ = _train(desk, TR.WEIGHTED_SUM, lam)
        p = res.checkpoints[-1].val
        hit = any(q[0] >= p.mean_z and q[1] >= p.mean_cos for q in front)
        covered += hit
        rows.append(f"{lam:g}:(z {p.mean_z:.2f}, cos {p.mean_cos:.4f}, covered={hit})")
    report(10, covered >= 2, f"{covered}/4 weighted-sum points dominated by or equal to the MGDA set; "
                             + "; ".join(rows))


# ---- 11 --------------------------------------------------------------------

def test_c11_curve_fitting():
    x = np.linspace(0, 4, 12)
    fe = EK.fit_curve(x, -2 * np.exp(0.5 * x) + 3, EK.EXPONENTIAL)
    err_e = max(abs(fe.params["a"] - 2), abs(fe.params["b"] - 0.5), abs(fe.params["c"] - 3))
    xl = np.linspace(0.5, 5, 15)
    true = dict(a=0.0, b=0.8, c=1.0, d=1.0, g=1.0)
    fl = EK.fit_tradeoff(np.column_stack([xl, EK.five_pl(xl, **true)]))
    xc = np.linspace(0.5, 3, 10)
    fc = EK.fit_tradeoff(np.column_stack([xc, xc ** 2]))
    ok = (fe.residual_rms < 1e-3 and err_e < 1e-3 and fl.family == EK.FIVE_PARAM_LOGISTIC
          and fl.residual_rms < 1e-3 and fc.family == EK.EXPONENTIAL)
    report(11, ok, f"exponential rms {fe.residual_rms:.1e} (param err {err_e:.1e}); 5PL family {fl.family} "
                   f"rms {fl.residual_rms:.1e}; convex data -> {fc.family}")


# ---- 12 --------------------------------------------------------------------

def test_c12_cli_determinism(tmp_path):
    conf = {"model": {"vocab_size": 128, "embed_dim": 8, "model_seed": 2}, "generators": {"hidden": 8},
            "prompts": {"count": 40, "length": 5}, "split": {"n_train": 24, "n_val": 8},
            "train": {"batch_size": 4, "epochs": 1, "lr": 1e-3, "gen_length": 20, "checkpoint_every": 3,
                      "max_steps": 6},
            "corpus": {"count": 12, "length": 60}, "generate": {"count": 12, "length": 60},
            "evaluate": {"count": 20, "length": 60,
                         "configs": [{"id": f"d{x}", "constant_gamma": 0.25, "constant_delta": x}
                                     for x in (0.5, 1.0, 2.0)]}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(conf))

    def workflow(d):
        d.mkdir()
        cmds = [["model", "build", "--out", d / "model.json"],
                ["corpus", "generate", "--out", d / "corpus.jsonl"],
                ["corpus", "generate", "--human", "--out", d / "human.jsonl"],
                ["train", "--out", d / "run"],
                ["generate", "--checkpoint", d / "run" / "generators.json", "--out", d / "wm.jsonl"],
                ["detect", "--checkpoint", d / "run" / "generators.json", "--in", d / "wm.jsonl",
                 "--out", d / "det.jsonl"],
                ["annotate", "--checkpoint", d / "run" / "generators.json", "--in", d / "wm.jsonl", "--json",
                 "--out", d / "ann.json"],
                ["attack", "--in", d / "wm.jsonl", "--human", d / "human.jsonl", "--k", "3", "--out", d / "cp.jsonl"],
                ["attack", "--in", d / "wm.jsonl", "--kind", "corrupt", "--out", d / "cor.jsonl"],
                ["calibrate", "--in", d / "human.jsonl", "--out", d / "cal.json"],
                ["evaluate", "--out", d / "eval.json"],
                ["curves", "--in", d / "eval.json", "--csv", d / "curve.csv", "--out", d / "fit.json"]]
        codes = [cli.main([str(x) for x in c] + ["--config", str(cfg)]) for c in cmds]
        return codes

    ca, cb = workflow(tmp_path / "a"), workflow(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    diff = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = ca == cb == [0] * len(ca) and not diff
    report(12, ok, f"{len(ca)} commands, {len(files)} output files, {len(diff)} differ {diff}")
