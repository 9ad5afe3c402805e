"""Command-line interface: gen, train, rerank, sweep, bench.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 resource-budget error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import data as D
from . import pipeline as P
from .errors import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RESOURCE,
                     ConfigError, FormatError, ResourceBudgetError)
from .model import ACPConfig, ACPModel
from .train import TrainConfig, train


def _parse_dims(text: str):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad block dims {text!r}: {exc}") from exc


def _add_common_rerank_flags(sp):
    sp.add_argument("--query", required=True)
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--metric", choices=("euclidean", "cosine"), default="cosine")
    sp.add_argument("--k1", type=int, default=25)
    sp.add_argument("--k2", type=int, default=6)
    sp.add_argument("--alpha", type=float, default=3.0)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--checkpoint")
    sp.add_argument("--renormalize", choices=("on", "off"), default="on")
    sp.add_argument("--space", choices=("fused", "raw"), default="fused")
    sp.add_argument("--mem-budget", type=int, default=None)
    sp.add_argument("--kmax", type=int, default=50)


def _build_params(args) -> P.RerankParams:
    model = None
    if args.checkpoint:
        model = ACPModel.load(args.checkpoint)
    return P.RerankParams(
        metric=args.metric, k1=args.k1, k2=args.k2, alpha=args.alpha,
        lam=args.lam, renormalize=args.renormalize == "on", space=args.space,
        threads=args.threads, k_max=args.kmax, mem_budget=args.mem_budget,
        model=model)


def read_train_config(path):
    """Flat key=value file covering training and model settings."""
    train_fields = set(TrainConfig.__dataclass_fields__)
    model_fields = set(ACPConfig.__dataclass_fields__) - {"block_dims"}
    train_kw, model_kw = {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in train_fields:
                target = train_kw
            elif key in model_fields:
                target = model_kw
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            target[key] = _cast_value(key, value, lineno, path)
    return train_kw, model_kw


def _cast_value(key, value, lineno, path):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: cannot parse value {value!r} "
                          f"for {key!r}") from None


def cmd_gen(args):
    train_set, query, gallery = D.generate_synthetic(
        args.train_ids, args.test_ids, args.imgs_per_id, args.cameras,
        block_dims=_parse_dims(args.block_dims), intra_noise=args.noise,
        distractor_rate=args.distractor_rate, seed=args.seed)
    import os
    os.makedirs(args.out_dir, exist_ok=True)
    for name, eset in (("train", train_set), ("query", query), ("gallery", gallery)):
        path = os.path.join(args.out_dir, f"{name}.acpe")
        D.save_set(eset, path)
        if args.manifest:
            D.write_manifest(eset, path + ".jsonl")
        print(f"wrote {path} ({len(eset)} records)")
    return EXIT_OK


def cmd_train(args):
    train_set = D.load_set(args.train)
    train_kw, model_kw = read_train_config(args.config) if args.config else ({}, {})
    if args.seed is not None:
        train_kw["seed"] = args.seed
    cfg = TrainConfig(**train_kw)
    model = ACPModel(ACPConfig(block_dims=train_set.block_dims, **model_kw),
                     seed=cfg.seed)
    result = train(model, train_set, cfg,
                   log_fn=(print if not args.quiet else None))
    model.save(args.out)
    print(f"wrote {args.out} (best epoch {result.best_epoch})")
    if args.loss_csv:
        with open(args.loss_csv, "w", encoding="utf-8") as fh:
            fh.write(result.curve_csv())
        print(f"wrote {args.loss_csv}")
    return EXIT_OK


def cmd_rerank(args):
    query = D.load_set(args.query)
    gallery = D.load_set(args.gallery)
    params = _build_params(args)
    result = P.run_method(args.method, query, gallery, params)
    payload = json.dumps(result.to_dict(), indent=2)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        print(f"wrote {args.report}")
    else:
        print(payload)
    return EXIT_OK


def cmd_sweep(args):
    query = D.load_set(args.query)
    gallery = D.load_set(args.gallery)
    params = _build_params(args)
    values = [int(v) for v in args.values.split(",")]
    rows = P.sweep(args.parameter, values, args.method, query, gallery, params)
    csv_text = P.sweep_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        print(f"wrote {args.out}")
    else:
        print(csv_text, end="")
    return EXIT_OK


def cmd_bench(args):
    query = D.load_set(args.query)
    gallery = D.load_set(args.gallery)
    params = _build_params(args)
    methods = args.methods.split(",")
    for m in methods:
        if m not in P.METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {P.METHODS}")
    report = P.bench(methods, query, gallery, params)
    payload = P.bench_json(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        print(f"wrote {args.report}")
    else:
        print(payload)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="acprank",
                                 description="Re-ID re-ranking engine")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic embedding sets")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--train-ids", type=int, default=200)
    g.add_argument("--test-ids", type=int, default=100)
    g.add_argument("--imgs-per-id", type=int, default=15)
    g.add_argument("--cameras", type=int, default=4)
    g.add_argument("--block-dims", default="32,64,128")
    g.add_argument("--noise", type=float, default=0.35)
    g.add_argument("--distractor-rate", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--manifest", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a correlation predictor")
    t.add_argument("--train", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--loss-csv")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("rerank", help="run one re-ranking method")
    r.add_argument("--method", required=True, choices=P.METHODS)
    r.add_argument("--report")
    _add_common_rerank_flags(r)
    r.set_defaults(fn=cmd_rerank)

    s = sub.add_parser("sweep", help="sweep k1 or k2 for one method")
    s.add_argument("--parameter", required=True, choices=("k1", "k2"))
    s.add_argument("--values", required=True, help="comma-separated ints")
    s.add_argument("--method", required=True, choices=P.METHODS)
    s.add_argument("--out")
    _add_common_rerank_flags(s)
    s.set_defaults(fn=cmd_sweep)

    b = sub.add_parser("bench", help="benchmark several methods")
    b.add_argument("--methods", default=",".join(P.METHODS))
    b.add_argument("--report")
    _add_common_rerank_flags(b)
    b.set_defaults(fn=cmd_bench)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ResourceBudgetError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":
    sys.exit(main())
