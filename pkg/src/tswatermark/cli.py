"""Command-line entry point.

Every subcommand reads a JSON config merged over ``DEFAULTS``; flags
override the file.  All randomness comes from named seeds in the config,
so reruns with the same config write byte-identical files.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attacks, evalkit, generators, lm, losses, pipeline, trainer
from .detector import annotate, detect, detect_windowed, format_report, render_annotation
from .errors import ConfigurationError, InputError, UsageError, WatermarkError

log = logging.getLogger("tswatermark")

DEFAULTS = {
    "model": {"vocab_size": 512, "embed_dim": 32, "model_seed": 1, "entropy_mix": [0.2, 0.3, 0.5],
              "category_signal": 0.25},
    "key": 42,
    "embedder": {"dim": 16, "seed": 0},
    "generators": {"init_gamma": 0.25, "init_delta": 1.25, "init_seed": 0, "hidden": 64,
                   "constant_gamma": None, "constant_delta": None},
    "prompts": {"count": 740, "length": 20, "seed": 0},
    "split": {"n_train": 640, "n_val": 100, "seed": 0},
    "train": trainer.config_dict(trainer.TrainConfig()),
    "corpus": {"count": 100, "length": 200, "seed": 7, "human": False},
    "generate": {"count": 100, "length": 200, "seed": 11},
    "detect": {"threshold": 4.0, "window": None},
    "attack": {"kind": "copy_paste", "k": 1, "rate": 0.1, "seed": 5},
    "evaluate": {"count": 200, "length": 200, "seed": 13, "null_seed": 17, "configs": []},
    "curves": {"samples": 100},
}

SEED_FIELD = {
    "model": ("model", "model_seed"), "corpus": ("corpus", "seed"), "train": ("train", "data_seed"),
    "generate": ("generate", "seed"), "attack": ("attack", "seed"), "evaluate": ("evaluate", "seed"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---- config ----------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k != "train":
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        elif k == "train":
            out[k] = trainer.config_dict(trainer.TrainConfig.from_dict({**base[k], **v}))
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path, seed: int | None = None, command: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if seed is not None and command in SEED_FIELD:
        sec, name = SEED_FIELD[command]
        cfg[sec][name] = int(seed)
    return cfg


def key_fingerprint(key: int) -> str:
    """Public identifier of a key; the key itself never leaves the config."""
    return hashlib.sha256(f"tswatermark-key:{int(key)}".encode()).hexdigest()[:16]


def _model(cfg):
    m = cfg["model"]
    return lm.build_model(m["vocab_size"], m["embed_dim"], m["model_seed"], tuple(m["entropy_mix"]),
                          m["category_signal"])


def _embedder(cfg, model):
    return losses.make_embedder(model.embed_dim, cfg["embedder"]["dim"], cfg["embedder"]["seed"])


def _generators(cfg, model, checkpoint):
    if checkpoint is not None:
        g, d = generators.load_checkpoint(checkpoint)
        if g.dim != model.embed_dim or d.dim != model.embed_dim:
            raise InputError("checkpoint input size does not match the model embedding size")
        return g, d
    gc = cfg["generators"]
    if gc["constant_gamma"] is not None or gc["constant_delta"] is not None:
        if gc["constant_gamma"] is None or gc["constant_delta"] is None:
            raise ConfigurationError("constant generators need both constant_gamma and constant_delta")
        return (generators.constant_net(generators.GAMMA, gc["constant_gamma"], model.embed_dim),
                generators.constant_net(generators.DELTA, gc["constant_delta"], model.embed_dim))
    return trainer.init_pair(gc["init_gamma"], gc["init_delta"], gc["init_seed"], model.embed_dim, gc["hidden"])


def _checkpoint_digest(checkpoint) -> str:
    if checkpoint is None:
        return "none"
    return hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()


def _write(path, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---- parallel helpers ------------------------------------------------------

def _chunks(n: int, jobs: int):
    bounds = np.linspace(0, n, max(1, min(jobs, n)) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunks(fn, arg_list, jobs: int):
    if jobs <= 1 or len(arg_list) <= 1:
        return [fn(*a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*arg_list)))


def _sample_chunk(model, last, length, seeds, stream):
    return lm.sample_batch(model, last, length, seeds, stream=stream)


def _generate_chunk(model, g, d, key, last, length, seeds):
    return pipeline.generate_batch(model, g, d, key, last, length, seeds)


def sample_parallel(model, last, length, seeds, stream, jobs):
    parts = _run_chunks(_sample_chunk, [(model, last[a:b], length, seeds[a:b], stream)
                                        for a, b in _chunks(len(last), jobs)], jobs)
    return np.concatenate(parts)


def generate_parallel(model, g, d, key, last, length, seeds, jobs):
    parts = _run_chunks(_generate_chunk, [(model, g, d, key, last[a:b], length, seeds[a:b])
                                          for a, b in _chunks(len(last), jobs)], jobs)
    return pipeline.HardGeneration(*(np.concatenate([getattr(p, f) for p in parts])
                                     for f in ("tokens", "gammas", "deltas", "flags")))


# ---- subcommands -----------------------------------------------------------

def cmd_model_build(args, cfg):
    model = _model(cfg)
    out = model.header()
    out["category_counts"] = {c: int(np.sum(model.categories == i)) for i, c in enumerate(lm.CATEGORIES)}
    _write(args.out, _dumps(out))


def _prompt_pool(model, count, length, seed):
    return lm.make_prompts(model, count, length, seed)


def cmd_corpus_generate(args, cfg):
    model = _model(cfg)
    c = cfg["corpus"]
    human = bool(c["human"] or args.human)
    prompts = _prompt_pool(model, c["count"], cfg["prompts"]["length"], c["seed"])
    seeds = lm.derive_seeds(c["seed"], c["count"], stream=2)
    last = [p.tokens[-1] for p in prompts]
    stream = lm.HUMAN_STREAM if human else lm.MODEL_STREAM
    toks = sample_parallel(model, last, c["length"], seeds, stream, args.jobs)
    origin = lm.Origin.HUMAN if human else lm.Origin.UNWATERMARKED
    seqs = [lm.TokenSeq(tuple(t), origin, s, {"prompt_last": int(p)}) for t, s, p in zip(toks, seeds, last)]
    lm.write_corpus(args.out, seqs)


def cmd_train(args, cfg):
    model = _model(cfg)
    pc, sc = cfg["prompts"], cfg["split"]
    prompts = _prompt_pool(model, pc["count"], pc["length"], pc["seed"])
    tr, va = trainer.split_prompts(prompts, sc["n_train"], sc["n_val"], sc["seed"])
    gc = cfg["generators"]
    g, d = trainer.init_pair(gc["init_gamma"], gc["init_delta"], gc["init_seed"], model.embed_dim, gc["hidden"])
    tcfg = trainer.TrainConfig.from_dict(cfg["train"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"config": cfg}

    def on_checkpoint(ck):
        gg, dd = g.copy(), d.copy()
        generators.set_pair_flat(gg, dd, ck.params)
        generators.save_checkpoint(out / f"checkpoint_step{ck.step:06d}.json", gg, dd,
                                   {**echo, "step": ck.step, "val": vars(ck.val)})

    res = trainer.train(tcfg, model, tr, va, g, d, cfg["key"], _embedder(cfg, model), on_checkpoint)
    sel = res.selected_checkpoint
    generators.set_pair_flat(g, d, sel.params)
    generators.save_checkpoint(out / "generators.json", g, d, {**echo, "step": sel.step, "val": vars(sel.val)})
    trainer.write_log(out / "train_log.jsonl", res.log)
    summary = {"selected_step": sel.step, "checkpoints": [{"step": c.step, **vars(c.val)} for c in res.checkpoints],
               "key_id": key_fingerprint(cfg["key"])}
    (out / "train_summary.json").write_text(_dumps(summary))


def cmd_generate(args, cfg):
    model = _model(cfg)
    g, d = _generators(cfg, model, args.checkpoint)
    c = cfg["generate"]
    prompts = _prompt_pool(model, c["count"], cfg["prompts"]["length"], c["seed"])
    seeds = lm.derive_seeds(c["seed"], c["count"], stream=3)
    last = [p.tokens[-1] for p in prompts]
    out = generate_parallel(model, g, d, cfg["key"], last, c["length"], seeds, args.jobs)
    seqs = [lm.TokenSeq(tuple(t), lm.Origin.WATERMARKED, s, {"prompt_last": int(p)})
            for t, s, p in zip(out.tokens, seeds, last)]
    lm.write_corpus(args.out, seqs)
    meta = {"key_id": key_fingerprint(cfg["key"]), "checkpoint_sha256": _checkpoint_digest(args.checkpoint),
            "model": model.header(), "count": c["count"], "length": c["length"], "seed": c["seed"]}
    Path(str(args.out) + ".meta.json").write_text(_dumps(meta))


def _read_input(path):
    seqs = lm.read_corpus(path)
    if not seqs:
        raise InputError(f"{path} holds no sequences")
    return seqs


def cmd_detect(args, cfg):
    model = _model(cfg)
    g, _ = _generators(cfg, model, args.checkpoint)
    threshold = args.threshold if args.threshold is not None else cfg["detect"]["threshold"]
    window = args.window if args.window is not None else cfg["detect"]["window"]
    seqs = _read_input(args.input)
    E = model.embedding_matrix
    results = []
    for s in seqs:
        model.check_tokens(s.tokens)
        if window is None:
            results.append(detect(s, g, E, cfg["key"], threshold))
        else:
            results.append(detect_windowed(s, g, E, cfg["key"], int(window), threshold))
    if len(results) == 1 and not args.json:
        _write(args.out, format_report(results[0]) + "\n")
    else:
        _write(args.out, "".join(json.dumps({"index": i, **r.report()}, sort_keys=True) + "\n"
                                 for i, r in enumerate(results)))


def cmd_annotate(args, cfg):
    model = _model(cfg)
    g, d = _generators(cfg, model, args.checkpoint)
    seqs = _read_input(args.input)
    if not 0 <= args.index < len(seqs):
        raise InputError(f"index {args.index} out of range for {len(seqs)} sequences")
    rows = annotate(seqs[args.index], g, d, model.embedding_matrix, cfg["key"])
    _write(args.out, render_annotation(rows, color=not args.json) + "\n")


def cmd_attack(args, cfg):
    model = _model(cfg)
    a = cfg["attack"]
    kind = args.kind or a["kind"]
    seqs = _read_input(args.input)
    seeds = lm.derive_seeds(a["seed"], len(seqs), stream=4)
    out = []
    if kind == "copy_paste":
        if args.human is None:
            raise UsageError("copy_paste needs --human")
        human = _read_input(args.human)
        if len(human) < len(seqs):
            raise InputError("need one human text per watermarked text")
        k = args.k if args.k is not None else a["k"]
        for s, h, sd in zip(seqs, human, seeds):
            out.append(attacks.copy_paste(s, h, k, sd))
    elif kind == "corrupt":
        rate = args.rate if args.rate is not None else a["rate"]
        for s, sd in zip(seqs, seeds):
            out.append(attacks.corrupt(s, rate, sd, model, s.meta.get("prompt_last")))
    else:
        raise ConfigurationError(f"unknown attack kind {kind!r}")
    lm.write_corpus(args.out, out)


def _z_scores(seqs, g, model, key):
    E = model.embedding_matrix
    return np.array([detect(s, g, E, key).z for s in seqs])


def cmd_calibrate(args, cfg):
    model = _model(cfg)
    g, _ = _generators(cfg, model, args.checkpoint)
    z = _z_scores(_read_input(args.input), g, model, cfg["key"])
    fprs = args.fpr or [0.0, 0.01]
    rep = {"n": int(z.size), "mean_z": float(z.mean()), "var_z": float(z.var()),
           "thresholds": {repr(float(f)): evalkit.calibrate_threshold(z, f) for f in fprs},
           "key_id": key_fingerprint(cfg["key"])}
    _write(args.out, _dumps(rep))


def _eval_configs(cfg, args):
    configs = list(cfg["evaluate"]["configs"])
    if args.checkpoint:
        configs.extend({"id": Path(c).stem, "checkpoint": c} for c in args.checkpoint)
    if not configs:
        configs = [{"id": "default"}]
    return configs


def cmd_evaluate(args, cfg):
    model = _model(cfg)
    emb = _embedder(cfg, model)
    e = cfg["evaluate"]
    L = cfg["prompts"]["length"]
    prompts = _prompt_pool(model, e["count"], L, e["seed"])
    seeds = lm.derive_seeds(e["seed"], e["count"], stream=5)
    last = [p.tokens[-1] for p in prompts]
    null_prompts = _prompt_pool(model, e["count"], L, e["null_seed"])
    null_seeds = lm.derive_seeds(e["null_seed"], e["count"], stream=6)
    null_toks = sample_parallel(model, [p.tokens[-1] for p in null_prompts], e["length"], null_seeds,
                                lm.HUMAN_STREAM, args.jobs)
    refs = sample_parallel(model, last, e["length"], seeds, lm.MODEL_STREAM, args.jobs)
    E = model.embedding_matrix

    entries, points = [], []
    for conf in _eval_configs(cfg, args):
        sub = copy.deepcopy(cfg)
        for k in ("constant_gamma", "constant_delta"):
            if k in conf:
                sub["generators"][k] = conf[k]
        g, d = _generators(sub, model, conf.get("checkpoint"))
        null_z = np.array([detect(t, g, E, cfg["key"]).z for t in null_toks])
        wm = generate_parallel(model, g, d, cfg["key"], last, e["length"], seeds, args.jobs)
        wm_z = np.array([detect(t, g, E, cfg["key"]).z for t in wm.tokens])
        sims = [evalkit.similarity(a, b, emb, model) for a, b in zip(wm.tokens, refs)]
        rep = evalkit.summarize(null_z, wm_z, sims, conf.get("id", ""))
        rep.extra = {"bucket_stats": evalkit.bucket_stats(list(wm.tokens), g, d, E, model.categories),
                     "mean_perplexity": float(np.mean([lm.perplexity(model, t) for t in wm.tokens]))}
        entries.append({"id": conf.get("id", ""), **json.loads(rep.to_json())})
        points.append(evalkit.TradeoffPoint(**rep.points[0]))

    pareto = [p.config_id for p in evalkit.pareto_filter(points)]
    report = {"key_id": key_fingerprint(cfg["key"]), "model": model.header(), "configs": entries,
              "points": [vars(p) for p in points], "pareto": pareto}
    if len(points) >= 3:
        try:
            fit = evalkit.fit_tradeoff([(p.similarity, p.tpr) for p in points])
            report["fit"] = vars(fit)
        except (WatermarkError, ValueError) as exc:
            report["fit_error"] = str(exc)
    _write(args.out, _dumps(report))


def cmd_curves(args, cfg):
    data = json.loads(Path(args.input).read_text())
    pts = data["points"] if isinstance(data, dict) else data
    xy = [(p["similarity"], p["tpr"]) if isinstance(p, dict) else tuple(p) for p in pts]
    fit = evalkit.fit_tradeoff(xy)
    xs = [x for x, _ in xy]
    samples = evalkit.curve_samples(fit, min(xs), max(xs), cfg["curves"]["samples"])
    if args.csv:
        evalkit.write_curve_csv(args.csv, samples)
    _write(args.out, _dumps(vars(fit)))


# ---- parser ----------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON config file (merged over defaults)")
    p.add_argument("--seed", type=int, help="override the command's primary seed")
    p.add_argument("--out", help="output path (stdout if omitted, where allowed)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-sequence work")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tswatermark", description="Token-specific watermarking toolkit on a synthetic LM.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pm = sub.add_parser("model", help="synthetic language model")
    pm_sub = pm.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = pm_sub.add_parser("build", help="build the model and print its header")
    _common(p)
    p.set_defaults(func=cmd_model_build, seed_section="model")

    pc = sub.add_parser("corpus", help="unwatermarked corpora")
    pc_sub = pc.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = pc_sub.add_parser("generate", help="sample unwatermarked continuations")
    _common(p)
    p.add_argument("--human", action="store_true", help="tag as HUMAN and use the human seed stream")
    p.set_defaults(func=cmd_corpus_generate, seed_section="corpus", need_out=True)

    p = sub.add_parser("train", help="train the generator pair")
    _common(p)
    p.set_defaults(func=cmd_train, seed_section="train", need_out=True)

    p = sub.add_parser("generate", help="watermarked generation")
    _common(p)
    p.add_argument("--checkpoint", help="generator checkpoint (default: config generators)")
    p.set_defaults(func=cmd_generate, seed_section="generate", need_out=True)

    p = sub.add_parser("detect", help="z-test detection")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--window", type=int, help="sliding-window size in scored tokens")
    p.add_argument("--json", action="store_true", help="JSON lines even for a single sequence")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("annotate", help="green/red token listing")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--json", action="store_true", help="JSON rows instead of ANSI colors")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("attack", help="copy-paste or corruption attack")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--human", help="human corpus for copy_paste")
    p.add_argument("--kind", choices=["copy_paste", "corrupt"])
    p.add_argument("--k", type=int)
    p.add_argument("--rate", type=float)
    p.set_defaults(func=cmd_attack, seed_section="attack", need_out=True)

    p = sub.add_parser("calibrate", help="FPR-calibrated thresholds from a null corpus")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--fpr", type=float, action="append")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="full evaluation report")
    _common(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint to evaluate (repeatable)")
    p.set_defaults(func=cmd_evaluate, seed_section="evaluate")

    p = sub.add_parser("curves", help="fit a trade-off curve to report points")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--csv", help="write curve samples as CSV")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if getattr(args, "need_out", False) and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, args.seed, getattr(args, "seed_section", None))
        args.func(args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (WatermarkError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
