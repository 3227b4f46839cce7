"""Command-line driver: ``scrlab {generate,search,train-eval,approx}``.

Settings come from an optional JSON file (``--config``) overridden by flags.
Every artifact lands in ``<out>/<config-hash>/`` and embeds the config hash,
seed and package version. Exit codes: 0 success, 2 bad input or missing file,
3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from . import __version__
from .autodiff import atomic_write_text
from .dag import adjacency_to_dict, adjacency_from_dict, binarize, is_dag, ordering_label, ordering_to_mask, parse_ordering
from .learners import (VARIANTS, BoConfig, Structure, TrainConfig, TrainingDiverged, UnrollConfig, learn_dense_bo,
                       learn_generic_masked, learn_generic_unrolled, train_fixed)
from .metrics import structure_recovery
from .pipeline import PipelineConfig
from .synth import ApproxConfig, PolyTarget, approx_experiment, load_corpus, make_scm, make_splits, sample_corpus, save_corpus, DEFAULT_EDGES

log = logging.getLogger("scrlab")

EXIT_USAGE = 2
EXIT_DIVERGED = 3

METRIC_COLUMNS = ("run_id", "variant", "seed", "side", "mad", "shd", "precision", "recall", "val_loss",
                  "config_hash", "code_version")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _sub(cls, overrides: dict | None):
    """Instantiate a frozen config dataclass, rejecting unknown keys."""
    overrides = dict(overrides or {})
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise CliError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**overrides)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _merge(args, keys) -> dict:
    cfg = load_config(args.config)
    for k in keys:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            cfg[k] = v
    return cfg


def _meta(cfg: dict, seed) -> dict:
    return {"config_hash": config_hash(cfg), "seed": seed, "code_version": __version__}


def _run_dir(args, cfg: dict) -> str:
    d = os.path.join(args.out, config_hash(cfg))
    os.makedirs(d, exist_ok=True)
    return d


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_csv(path, rows: list[dict], columns) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    atomic_write_text(path, buf.getvalue())


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    train = dict(cfg.get("train", {}))
    if cfg.get("steps") is not None:
        train["steps"] = cfg["steps"]
    train["seed"] = seed
    train["pipeline"] = _sub(PipelineConfig, cfg.get("pipeline"))
    return _sub(TrainConfig, train)


def _dataset(path: str | None):
    if path is None:
        raise CliError("--dataset is required")
    if not os.path.exists(path):
        raise CliError(f"dataset not found: {path}")
    corpus, splits = load_corpus(path)
    if splits is None:
        splits = make_splits(len(corpus))
    return corpus, [corpus.subset(i) for i in splits]


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _merge(args, ["n", "grid", "scm_seed", "symmetry", "ratios", "seed"])
    n = int(cfg.get("n", 1000))
    if n <= 0:
        raise CliError("n must be positive")
    seed = int(cfg.get("seed", 0))
    scm = make_scm(tuple(tuple(e) for e in cfg.get("edges", DEFAULT_EDGES)), seed=int(cfg.get("scm_seed", 0)),
                   grid=int(cfg.get("grid", 16)), symmetry=float(cfg.get("symmetry", 1.0)))
    try:
        splits = make_splits(n, tuple(cfg.get("ratios", (0.8, 0.1, 0.1))), seed=seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    corpus = sample_corpus(scm, n, seed)
    corpus.header.update(_meta(cfg, seed))
    path = args.dataset or os.path.join(_run_dir(args, cfg), "corpus.bin")
    try:
        save_corpus(corpus, path, splits)
    except OSError as exc:
        raise CliError(f"cannot write dataset {path}: {exc}") from exc
    print(f"generate: wrote {n} samples to {path} (config {config_hash(cfg)})")
    return 0


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def _read_structure(path: str | None, what: str) -> dict:
    if path is None:
        raise CliError(f"{what} requires a structure file")
    if not os.path.exists(path):
        raise CliError(f"structure file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def _dense_ordering(doc: dict) -> tuple[int, ...]:
    if "ordering" not in doc:
        raise CliError("structure file has no dense ordering")
    return parse_ordering(doc["ordering"])


def cmd_search(args) -> int:
    cfg = _merge(args, ["variant", "seed", "budget", "steps", "supervised_val"])
    cfg["dataset"] = os.path.abspath(args.dataset) if args.dataset else None
    if args.dense_result:
        cfg["dense_result"] = os.path.abspath(args.dense_result)
    variant = cfg.get("variant", "dense")
    if variant not in VARIANTS:
        raise CliError(f"unknown variant {variant!r}")
    seed = int(cfg.get("seed", 0))
    corpus, (train, val, _test) = _dataset(cfg["dataset"])
    meta = _meta(cfg, seed)
    doc = {"variant": variant, **meta}
    trace_lines: list[dict] = []

    if variant == "independent":
        doc["M"] = adjacency_to_dict(np.zeros((4, 4)))
    elif variant == "dense":
        bo = dict(cfg.get("bo", {}))
        bo_cfg = BoConfig(budget=int(cfg.get("budget", bo.get("budget", 10))),
                          inner=_train_config({**cfg, "steps": cfg.get("steps", bo.get("inner_steps", 5000))}, seed),
                          supervised_val=bool(cfg.get("supervised_val", False)), seed=seed)
        try:
            perm, trace = learn_dense_bo(train, val, bo_cfg)
        except Exception as exc:
            raise CliError(f"dense search failed: {exc}", EXIT_DIVERGED) from exc
        if not any(math.isfinite(r["score"]) for r in trace.records):
            raise CliError("every BO evaluation diverged", EXIT_DIVERGED)
        doc["ordering"] = ordering_label(perm)
        doc["M"] = adjacency_to_dict(ordering_to_mask(perm))
        trace_lines = trace.records
    elif variant in ("dynamic-sigmoid", "dynamic-cosine"):
        dense = _read_structure(cfg.get("dense_result"), variant)
        doc["ordering"] = ordering_label(_dense_ordering(dense))
        doc["mask"] = adjacency_to_dict(ordering_to_mask(_dense_ordering(dense)))
    else:
        unroll = _sub(UnrollConfig, cfg.get("unroll"))
        tc = _train_config(cfg, seed)
        try:
            if variant == "generic-masked":
                dense = _read_structure(cfg.get("dense_result"), variant)
                mask = ordering_to_mask(_dense_ordering(dense))
                res = learn_generic_masked(train, val, mask, unroll, tc)
                doc["mask"] = adjacency_to_dict(mask)
            else:
                res = learn_generic_unrolled(train, val, unroll, tc)
        except TrainingDiverged as exc:
            raise CliError(f"{variant} search diverged: {exc}", EXIT_DIVERGED) from exc
        doc["M_continuous"] = adjacency_to_dict(res.M)
        doc["M"] = adjacency_to_dict(res.M_binary)
        doc["dropped_edges"] = [[int(j), int(k), float(w)] for j, k, w in res.dropped]
        trace_lines = [{**s, "H": h, "train_loss": t}
                       for s, h, t in zip(res.schedule, res.history["H"], res.history["train_loss"])]

    run = _run_dir(args, cfg)
    _write_json(os.path.join(run, "structure.json"), doc)
    atomic_write_text(os.path.join(run, "trace.jsonl"),
                      "".join(json.dumps({**r, **meta}, sort_keys=True) + "\n" for r in trace_lines))
    summary = doc.get("ordering") or "edges=" + str(int(np.count_nonzero(adjacency_from_dict(doc["M"]))))
    print(f"search: variant={variant} result={summary} -> {os.path.join(run, 'structure.json')}")
    return 0


# ---------------------------------------------------------------------------
# train-eval
# ---------------------------------------------------------------------------


def _structure_for(variant: str, doc: dict | None) -> Structure:
    if variant == "independent":
        return Structure.independent()
    if doc is None:
        raise CliError(f"variant {variant} needs a structure file (--structure)")
    if variant in ("dynamic-sigmoid", "dynamic-cosine"):
        return Structure.attention(_dense_ordering(doc), variant.split("-")[1])
    M = binarize(adjacency_from_dict(doc["M"]))
    if not is_dag(M)[0]:
        raise CliError(f"structure for {variant} is not a DAG")
    if variant == "dense":
        return Structure.dense(_dense_ordering(doc))
    return Structure.fixed(M, variant)


def _train_eval_one(job: tuple) -> dict:
    variant, doc, cfg, seed = job
    corpus, (train, val, test) = _dataset(cfg["dataset"])
    structure = _structure_for(variant, doc)
    tc = _train_config(cfg, seed)
    try:
        r = train_fixed(train, val, structure, tc, test=test)
    except TrainingDiverged as exc:
        return {"variant": variant, "seed": seed, "diverged": str(exc), "curves": exc.history.get("curves", [])}
    learned = structure.M if structure.M is not None else structure.mask
    rec = structure_recovery(learned, corpus.gt_dag)
    return {"variant": variant, "seed": seed, "curves": r.curves(), "side": r.metrics["test_side"],
            "mad": r.metrics["test_mad"], "val_loss": r.metrics["val_loss"], **rec}


def _parse_structure_args(items) -> dict:
    out = {}
    for item in items or []:
        if "=" in item:
            variant, path = item.split("=", 1)
        else:
            doc = _read_structure(item, "train-eval")
            variant, path = doc.get("variant"), item
        out[variant] = _read_structure(path, variant)
    return out


def cmd_train_eval(args) -> int:
    cfg = _merge(args, ["variant", "seed", "steps"])
    cfg["dataset"] = os.path.abspath(args.dataset) if args.dataset else None
    docs = _parse_structure_args(args.structure)
    cfg["structures"] = {k: config_hash(v) for k, v in sorted(docs.items())}
    variant = cfg.get("variant", "independent")
    variants = list(VARIANTS) if variant == "all" else [variant]
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}")
        if v in ("dynamic-sigmoid", "dynamic-cosine") and v not in docs and "dense" in docs:
            docs[v] = docs["dense"]
        _structure_for(v, docs.get(v))  # fail fast before any training
    seed = int(cfg.get("seed", 0))
    _dataset(cfg["dataset"])
    meta = _meta(cfg, seed)
    run = _run_dir(args, cfg)
    jobs = [(v, docs.get(v), cfg, seed) for v in variants]
    if args.jobs and args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_eval_one, jobs))
    else:
        results = [_train_eval_one(j) for j in jobs]

    rows, failed = [], []
    for res in results:
        v = res["variant"]
        curve_rows = [{**c, "variant": v, **meta} for c in res["curves"]]
        _write_csv(os.path.join(run, f"curves_{v}.csv"), curve_rows,
                   ("step", "train_loss", "val_loss", "val_side", "val_mad", "variant", "config_hash", "seed", "code_version"))
        if "diverged" in res:
            failed.append(f"{v}: {res['diverged']}")
            continue
        rows.append({"run_id": f"{meta['config_hash']}-{v}-{seed}", "variant": v, "seed": seed,
                     **{k: res[k] for k in ("side", "mad", "shd", "precision", "recall", "val_loss")},
                     "config_hash": meta["config_hash"], "code_version": __version__})
    _write_csv(os.path.join(run, "metrics.csv"), rows, METRIC_COLUMNS)
    for r in rows:
        print(f"train-eval: {r['variant']} side={r['side']:.5f} mad={r['mad']:.3f} shd={r['shd']} val_loss={r['val_loss']:.5f}")
    print(f"train-eval: results in {run}")
    if failed:
        raise CliError("non-finite loss: " + "; ".join(failed), EXIT_DIVERGED)
    return 0


# ---------------------------------------------------------------------------
# approx
# ---------------------------------------------------------------------------


def _approx_one(job: tuple) -> dict:
    target_kw, approx_kw, seed = job
    target = PolyTarget.random(seed=seed, **target_kw)
    res = approx_experiment(target, ApproxConfig(**approx_kw), seed=seed)
    return {"seed": seed, **res}


def cmd_approx(args) -> int:
    cfg = _merge(args, ["seeds", "seed", "coupling", "dim", "order", "steps"])
    seeds = int(cfg.get("seeds", 10))
    first = int(cfg.get("seed", 0))
    target_kw = {"dim": int(cfg.get("dim", 2)), "order": int(cfg.get("order", 2)),
                 "coupling": float(cfg.get("coupling", 1.0))}
    approx_kw = dict(cfg.get("approx", {}))
    if cfg.get("steps") is not None:
        approx_kw["steps"] = int(cfg["steps"])
    _sub(ApproxConfig, approx_kw)
    jobs = [(target_kw, approx_kw, first + i) for i in range(seeds)]
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_approx_one, jobs))
    else:
        results = [_approx_one(j) for j in jobs]
    meta = _meta(cfg, first)
    rows = [{**meta, **r, "composed_wins": int(r["mse_composed"] < r["mse_independent"])} for r in results]
    if any(not (math.isfinite(r["mse_composed"]) and math.isfinite(r["mse_independent"])) for r in rows):
        raise CliError("non-finite MSE in approximation experiment", EXIT_DIVERGED)
    run = _run_dir(args, cfg)
    _write_csv(os.path.join(run, "approx.csv"), rows,
               ("seed", "mse_independent", "mse_composed", "composed_wins", "config_hash", "code_version"))
    win_rate = sum(r["composed_wins"] for r in rows) / len(rows)
    _write_json(os.path.join(run, "approx_summary.json"), {"win_rate": win_rate, "n_seeds": len(rows), **target_kw, **meta})
    print(f"approx: composed wins {sum(r['composed_wins'] for r in rows)}/{len(rows)} (win rate {win_rate:.2f}) -> {run}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scrlab", description="Structured latent-factor reconstruction experiments.")
    p.add_argument("--version", action="version", version=f"scrlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs", help="results root (default: runs)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("generate", help="sample a synthetic corpus with splits")
    common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--grid", type=int)
    g.add_argument("--scm-seed", dest="scm_seed", type=int)
    g.add_argument("--symmetry", type=float)
    g.add_argument("--ratios", type=float, nargs=3)
    g.add_argument("--dataset", help="output path (default: <out>/<hash>/corpus.bin)")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("search", help="learn a structure for one variant")
    common(s)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--dataset")
    s.add_argument("--budget", type=int, help="BO evaluations (dense)")
    s.add_argument("--steps", type=int, help="training steps per evaluation or run")
    s.add_argument("--supervised-val", dest="supervised_val", action="store_true", default=None,
                   help="add depth normal error to the BO score")
    s.add_argument("--dense-result", dest="dense_result", help="structure.json of a dense search")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train-eval", help="retrain with fixed structures and evaluate")
    common(t)
    t.add_argument("--variant", choices=VARIANTS + ("all",))
    t.add_argument("--dataset")
    t.add_argument("--steps", type=int)
    t.add_argument("--structure", action="append", help="structure.json, optionally as VARIANT=PATH; repeatable")
    t.set_defaults(func=cmd_train_eval)

    a = sub.add_parser("approx", help="composition vs independent approximation experiment")
    common(a)
    a.add_argument("--seeds", type=int)
    a.add_argument("--coupling", type=float)
    a.add_argument("--dim", type=int)
    a.add_argument("--order", type=int)
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_approx)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"scrlab: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
