"""Command-line entry point ``nccl-lab``.

Exit codes: 0 success, 1 other package error, 2 config error,
3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bank import load_bank
from .config import load_config, validate
from .credibility import apply_filter, class_stats, threshold_for
from .data import generate, read_dataset, write_dataset
from .errors import DimensionError, LabError, NumericError, ParameterError
from .evaluation import align_dims, criterion_report
from .model import encode, load_checkpoint
from .numeric import make_rng
from .pipeline import dump_embeddings, read_embeddings, run_experiment, run_sweep

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("nccl_lab")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (defaults to the reference config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config path, e.g. train_new.alpha=0.02 (repeatable)")
    p.add_argument("--seed", type=int, help="seed for data and both trainings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nccl-lab", description="Backward-compatible embedding experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output JSONL path")

    p = sub.add_parser("run", help="full pipeline, writes metrics.json and artifacts")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--dataset", type=Path, help="use an existing dataset instead of generating one")

    p = sub.add_parser("sweep", help="grid over alpha=beta and the threshold factor")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--alpha-beta", type=_floats, default=[0.005, 0.01, 0.015])
    p.add_argument("--factors", type=_floats, default=[0.2, 0.5, 1.0])

    p = sub.add_parser("dump-embeddings", help="encode a dataset with a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["train", "query", "gallery", "all"], default="all")

    p = sub.add_parser("criterion", help="criterion rates for two embedding dumps (new, old)")
    p.add_argument("new", type=Path)
    p.add_argument("old", type=Path)
    p.add_argument("--max-triplets", type=int, default=2_000_000)
    p.add_argument("--distance", choices=["cosine", "euclidean"], default="cosine")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="also write the report here")

    p = sub.add_parser("filter-report", help="credibility filter statistics for a bank dump")
    p.add_argument("bank", type=Path)
    p.add_argument("--factor", type=float, default=0.5)
    p.add_argument("--spread", choices=["mean_sq", "var_sq"], default="mean_sq")
    p.add_argument("--n-classes", type=int, help="defaults to max label + 1")
    p.add_argument("--out", type=Path, help="also write the report here")
    return parser


def _emit(doc: dict, out: Path | None) -> None:
    text = json.dumps(doc, indent=1)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    ds = generate(validate(cfg).data)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    path, header = write_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples to {path} (header {header.name})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    dataset = read_dataset(args.dataset) if args.dataset else None
    doc = run_experiment(cfg, args.out, dataset)
    so, sn, cx = doc["self_test"]["old"], doc["self_test"]["new"], doc["cross_test"]["new_old"]
    print(f"mAP old/old {so['mAP']:.4f}  new/new {sn['mAP']:.4f}  new/old {cx['mAP']:.4f}")
    print(f"metrics: {args.out / 'metrics.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.alpha_beta or not args.factors:
        raise ParameterError("sweep grids must be nonempty")
    cfg = load_config(args.config, args.overrides, args.seed)
    rows = run_sweep(cfg, args.alpha_beta, args.factors, args.out)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} points, {len(failed)} failed; summary: {args.out / 'summary.csv'}")
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    enc, _, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    samples = ds.samples if args.split == "all" else ds.split(args.split)
    X = np.stack([s.x for s in samples])
    if X.shape[1] != enc.d_in:
        raise DimensionError(f"checkpoint expects d_in={enc.d_in}, dataset has {X.shape[1]}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dump_embeddings(args.out, samples, encode(enc, X))
    print(f"wrote {len(samples)} embeddings to {args.out}")
    return EXIT_OK


def cmd_criterion(args) -> int:
    ids_n, labels_n, new = read_embeddings(args.new)
    ids_o, labels_o, old = read_embeddings(args.old)
    if not np.array_equal(ids_n, ids_o) or not np.array_equal(labels_n, labels_o):
        order = {int(i): k for k, i in enumerate(ids_o)}
        if set(order) != set(int(i) for i in ids_n):
            raise DimensionError("the two dumps cover different sample ids")
        idx = [order[int(i)] for i in ids_n]
        old, labels_o = old[idx], labels_o[idx]
        if not np.array_equal(labels_n, labels_o):
            raise DimensionError("labels disagree between the two dumps")
    if old.shape[1] > new.shape[1]:
        raise DimensionError("old embeddings are wider than new ones")
    rep = criterion_report(new, align_dims(old, new.shape[1]), labels_n, args.max_triplets,
                           make_rng(args.seed, "criterion"), args.distance)
    _emit(rep.to_dict(), args.out)
    return EXIT_OK


def cmd_filter_report(args) -> int:
    bank = load_bank(args.bank)
    K = args.n_classes if args.n_classes is not None else int(bank.labels.max()) + 1
    stats = class_stats(bank, K, spread=args.spread)
    _, report = apply_filter(bank, stats, threshold_for(K, args.factor))
    _emit(report.to_dict(), args.out)
    return EXIT_OK



COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "dump-embeddings": cmd_dump_embeddings,
    "criterion": cmd_criterion,
    "filter-report": cmd_filter_report,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_DIVERGENCE
    if isinstance(exc, (OSError, json.JSONDecodeError, KeyError)):
        return EXIT_IO
    if isinstance(exc, (ValueError, IndexError)):
        return EXIT_CONFIG
    return EXIT_OTHER


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (LabError, OSError, ValueError, IndexError, KeyError) as exc:
        code = exit_code_for(exc)
        print(f"nccl-lab {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
