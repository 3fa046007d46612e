"""Command-line interface: gen-data, train, tokenize, eval, compare.

Exit codes: 0 success, 2 bad usage or input, 3 numerical failure.
``UNITOK_THREADS`` caps the number of BLAS/OpenMP worker threads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data import DataFormatError, gen_synthetic, load_dataset, save_binary, save_jsonl
from .metrics import evaluate, format_table, theorem_report
from .model import ConfigError, TrainConfig, load_model, save_model
from .moe import tokenize_dataset
from .nn import NonFiniteGradientError
from .trainer import TrainingDivergence, train, train_baseline_single_codebook

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _progress(msg):
    print(msg, flush=True)


def _read_config(path):
    if path is None:
        return TrainConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    return TrainConfig.from_dict(raw)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _write_text(path, text):
    Path(path).write_text(text + "\n", encoding="utf-8")


def cmd_gen_data(args):
    ds = gen_synthetic(args.domains, args.items, args.dim, separation=args.separation,
                       intra_std=args.intra_std, seed=args.seed)
    fmt = args.format or ("binary" if str(args.out).endswith(".utok") else "jsonl")
    (save_binary if fmt == "binary" else save_jsonl)(ds, args.out)
    _progress(f"wrote {ds.n_items} items, {ds.K} domains, dim {ds.d} to {args.out}")


def cmd_train(args):
    config = _read_config(args.config)
    ds = load_dataset(args.data)
    _progress(f"loaded {ds.n_items} items, {ds.K} domains, dim {ds.d}")
    trainer = train_baseline_single_codebook if args.single_codebook else train
    model, report = trainer(ds, config, progress=_progress)
    save_model(model, args.out)
    if args.report:
        _write_json(args.report, report.to_dict())
    _progress(f"saved model to {args.out}")


def cmd_tokenize(args):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    table = tokenize_dataset(model, ds)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in table.rows():
            fh.write(json.dumps(row) + "\n")
    _progress(f"tokenized {len(table.tokens)} items, collision rate {table.collision_rate:.6f}")


def eval_table(report):
    """Summary and per-domain tables for an EvalReport."""
    summary = format_table([
        ["items", report.n_items], ["token_length", report.token_length],
        ["token_entropy_bits", report.token_entropy_bits], ["collision_rate", report.collision_rate],
        ["quantization_mse", report.quantization_mse], ["mi_variance", report.mi_variance],
        ["loss_spread", report.loss_spread], ["params_total", report.param_counts["total"]],
    ], ["metric", "value"])
    rows = [[label, d["token_count"], d["recon_mse"], d["quantization_mse"],
             "-" if d["hsic"] is None else d["hsic"]] for label, d in report.per_domain.items()]
    per_domain = format_table(rows, ["domain", "items", "recon_mse", "quant_mse", "hsic"])
    return summary + "\n\n" + per_domain


def theorem_table(report):
    rows = [
        ["token entropy (bits)", report.H_unitok, report.H_baseline, report.checks["theorem1_entropy"]],
        ["quantization mse", report.Q_unitok, report.Q_baseline, report.checks["theorem2_quantization"]],
    ]
    head = format_table(rows, ["quantity", "multi-expert", "single codebook", "check"])
    sweep = format_table([[lam, v["mi_variance"], v["loss_spread"]] for lam, v in report.sweep.items()],
                         ["lambda_mi", "hsic_variance", "recon_spread"])
    return (f"{head}\n\nquantization margin: {report.Q_margin:.6g}\n\n{sweep}\n"
            f"mi calibration check: {report.checks['theorem3_mi_variance']}")


def cmd_eval(args):
    model = load_model(args.model)
    ds = load_dataset(args.data)
    report = evaluate(model, ds)
    text = eval_table(report)
    print(text)
    if args.report:
        _write_json(args.report, report.to_dict())
        _write_text(Path(args.report).with_suffix(".txt"), text)


def cmd_compare(args):
    config = _read_config(args.config)
    ds = load_dataset(args.data)
    report = theorem_report(ds, config, sweep=tuple(args.sweep), progress=_progress if args.verbose else None)
    text = theorem_table(report)
    print(text)
    if args.report:
        _write_json(args.report, report.to_dict())
        _write_text(Path(args.report).with_suffix(".txt"), text)


def build_parser():
    p = argparse.ArgumentParser(prog="unitok", description="Multi-domain item tokenizer.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-domain dataset")
    g.add_argument("--domains", type=int, required=True)
    g.add_argument("--items", type=int, required=True, help="items per domain")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--intra-std", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=("jsonl", "binary"), help="default: from the extension (.utok = binary)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a tokenizer")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON config; omitted keys take their defaults")
    t.add_argument("--out", required=True, help="model JSON")
    t.add_argument("--report", help="training report JSON")
    t.add_argument("--single-codebook", action="store_true", help="train the one-stack baseline instead")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("tokenize", help="tokenize a dataset with a trained model")
    k.add_argument("--model", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True, help="token table JSONL")
    k.set_defaults(func=cmd_tokenize)

    e = sub.add_parser("eval", help="evaluate a trained model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="EvalReport JSON (a .txt table is written alongside)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train both tokenizers and run the comparison checks")
    c.add_argument("--data", required=True)
    c.add_argument("--config")
    c.add_argument("--report", help="comparison JSON (a .txt table is written alongside)")
    c.add_argument("--sweep", type=float, nargs="*", default=[0.0, 0.3], help="extra lambda_mi values")
    c.add_argument("--verbose", action="store_true", help="print training progress")
    c.set_defaults(func=cmd_compare)
    return p


def _thread_limit():
    raw = os.environ.get("UNITOK_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"UNITOK_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"UNITOK_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            args.func(args)
    except (TrainingDivergence, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataFormatError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
