"""Command-line entry point: ``prepare``, ``train``, ``eval`` and ``analyze``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import data as dataio
from .errors import ConfigError, ContractError, DataError, IntegrityError, NumericError
from .evaluation import (
    DEFAULT_CUTOFFS,
    analytic_peak,
    evaluate,
    grad_curve,
    mad,
    popularity_scores,
    sparsity_buckets,
)
from .model import ModelConfig, forward
from .numcore import SparseMatrix
from .objective import LossConfig
from .trainer import TrainConfig, configs_from_manifest, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("hccf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig}
ABLATIONS = {"--no-hyper": "hyper", "--no-ccl": "ccl", "--no-hhm": "hhm", "--no-lowrank": "lowrank"}


# ----------------------------------------------------------------- config

def config_fields():
    """Map every config key to ``(section, type)``."""
    out = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f.name] = (section, type(f.default))
    return out


def _coerce(key, raw, kind):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for config key {key!r}") from None


def read_config_file(path):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    values = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_overrides(tokens):
    """Turn ``--key value`` / ``--key=value`` tokens into a dict."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, sep, value = tok[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError(f"config key {key!r} needs a value")
            value = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = value
        i += 1
    return out


def resolve_config(values):
    """Validate keys and build ``(ModelConfig, LossConfig, TrainConfig)``."""
    known = config_fields()
    parts = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        section, kind = known[key]
        parts[section][key] = _coerce(key, raw, kind)
    return tuple(SECTIONS[s](**parts[s]) for s in SECTIONS)


def render_config(mc, lc, tc):
    lines = []
    for cfg in (mc, lc, tc):
        for key, value in dataclasses.asdict(cfg).items():
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def versions():
    return {"hccf": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


# ----------------------------------------------------------------- helpers

def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory {p} not found")
    return p


def _cutoffs(text):
    try:
        values = tuple(int(c) for c in str(text).split(",") if c.strip())
    except ValueError:
        raise ConfigError(f"cutoffs must be comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise ConfigError("cutoffs must be positive")
    return values


def _write_csv(path, rows, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = header or (list(rows[0]) if rows else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def embeddings_from_checkpoint(ckpt, ds, layer="final"):
    """Eval-mode user and item embeddings; ``layer`` is ``final`` or a layer index."""
    mc, _, _ = configs_from_manifest(ckpt.manifest)
    adj = dataio.build_normalized_adjacency(ds).matrix
    states = forward(ckpt.model_params(), mc, adj)
    if layer == "final":
        return states.user.psi.value, states.item.psi.value
    k = int(layer)
    if not 0 <= k < len(states.user.e):
        raise ConfigError(f"layer must be 'final' or 0..{len(states.user.e) - 1}")
    return states.user.e[k].value, states.item.e[k].value


def evaluate_checkpoint(ckpt, ds, cutoffs=DEFAULT_CUTOFFS, split="test", include_train=False):
    """Library path shared by ``eval``: ranking metrics plus MAD."""
    if split == "train" and not include_train:
        raise ConfigError("evaluating against the train split requires --include-train")
    pu, pv = embeddings_from_checkpoint(ckpt, ds)
    truth = ds.matrix(split)
    if split == "train":
        train = SparseMatrix(ds.num_users, ds.num_items, np.zeros(ds.num_users + 1), [], [])
    else:
        train = ds.matrix("train")
    report = evaluate(pu, pv, train, truth, cutoffs)
    report.mad_user, report.mad_item = mad(pu), mad(pv)
    return report


# ----------------------------------------------------------------- commands

def cmd_prepare(args):
    if bool(args.input) == bool(args.synthetic):
        raise ConfigError("give exactly one of --input or --synthetic")
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError:
        raise ConfigError(f"bad --ratios {args.ratios!r}") from None
    if args.input:
        if not Path(args.input).exists():
            raise DataError(f"input file {args.input} not found")
        ds = dataio.load_interactions(args.input, args.format)
        source = str(args.input)
    else:
        ds = dataio.from_pairs(dataio.synthetic_blocks(*dataio.parse_synthetic(args.synthetic)))
        source = args.synthetic
    if args.min_degree:
        ds = dataio.kcore_filter(ds, args.min_degree)
    ds = dataio.split(ds, ratios, args.seed)
    manifest = dataio.save_split(ds, args.output, args.seed, ratios,
                                 {"source": source, "min_degree": args.min_degree})
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


def cmd_train(args, overrides):
    data_dir = _require_dir(args.data, "data")
    values = read_config_file(args.config) if args.config else {}
    values.update(overrides)
    for key in ABLATIONS.values():
        if getattr(args, f"{key}_off"):
            values[key] = False
    mc, lc, tc = resolve_config(values)
    ds = dataio.load_split(data_dir)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render_config(mc, lc, tc), encoding="utf-8")
    for name in ("train_log.jsonl", "timings.jsonl"):
        (out / name).unlink(missing_ok=True)
    flags = {k: getattr(mc, k) for k in ABLATIONS.values()}
    t0 = time.perf_counter()
    ckpt, records = fit(ds, mc, lc, tc, out / "train_log.jsonl", out / "timings.jsonl", log_extra=flags)
    wall = time.perf_counter() - t0
    save_checkpoint(ckpt, out / "checkpoint")
    report = evaluate_checkpoint(ckpt, ds, (tc.eval_cutoff,), "test")
    pop = evaluate(*popularity_scores(ds.matrix("train"), ds.num_users), ds.matrix("train"),
                   ds.matrix("test"), (tc.eval_cutoff,))
    run = {
        "seed": tc.seed,
        "versions": versions(),
        "config": {"model": mc.to_dict(), "loss": lc.to_dict(), "train": tc.to_dict()},
        "data": str(data_dir),
        "epochs_run": len(records),
        "best_epoch": ckpt.manifest["epoch"],
        "metrics": {**ckpt.manifest["metrics"], **{f"test_{k}": v for k, v in report.flat().items()},
                    f"popularity_test_recall@{tc.eval_cutoff}": pop.recall[tc.eval_cutoff]},
        "wall_time": wall,
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(json.dumps(run["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    ds = dataio.load_split(_require_dir(args.data, "data"))
    ckpt = load_checkpoint(_require_dir(args.checkpoint, "checkpoint"))
    report = evaluate_checkpoint(ckpt, ds, _cutoffs(args.cutoffs), args.split, args.include_train)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    records = report.records()
    (out / "eval.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    _write_csv(out / "eval.csv", records, ["metric", "value"])
    for r in records:
        print(f"{r['metric']}\t{r['value']}")
    return EXIT_OK


def cmd_analyze(args):
    out = Path(args.output)
    if args.mode == "gradcurve":
        xs = np.linspace(-1.0, 1.0, args.grid)
        rows = []
        for tau in (float(t) for t in args.tau.split(",")):
            curve = grad_curve(tau, xs)
            rows += [{"tau": tau, **r} for r in curve.rows()]
            print(f"tau={tau}\targmax={curve.argmax():.4f}\tanalytic={analytic_peak(tau):.4f}")
        _write_csv(out, rows, ["tau", "x", "norm"])
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError(f"--checkpoint is required for mode {args.mode}")
    ckpt = load_checkpoint(_require_dir(args.checkpoint, "checkpoint"))
    if args.mode == "mad":
        if args.layer == "0":
            pu, pv = ckpt.params["user_emb"], ckpt.params["item_emb"]
        else:
            ds = dataio.load_split(_require_dir(_need_data(args), "data"))
            pu, pv = embeddings_from_checkpoint(ckpt, ds, args.layer)
        rows = [{"side": "user", "layer": args.layer, "mad": mad(pu)},
                {"side": "item", "layer": args.layer, "mad": mad(pv)}]
        _write_csv(out, rows, ["side", "layer", "mad"])
    else:
        ds = dataio.load_split(_require_dir(_need_data(args), "data"))
        pu, pv = embeddings_from_checkpoint(ckpt, ds)
        try:
            edges = [int(e) for e in args.edges.split(",")]
        except ValueError:
            raise ConfigError(f"bad --edges {args.edges!r}") from None
        rows = sparsity_buckets(pu, pv, ds.matrix("train"), ds.matrix("test"), edges, args.cutoff)
        _write_csv(out, rows)
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def _need_data(args):
    if not args.data:
        raise ConfigError(f"--data is required for mode {args.mode}")
    return args.data


# ----------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="hccf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load or generate interactions and write a 7:1:2 split")
    p.add_argument("--input", help="csv/tsv file with user,item in the first two columns")
    p.add_argument("--format", choices=("csv", "tsv"), help="override separator detection")
    p.add_argument("--synthetic", help="blocks:U,V,p_in,p_out,seed")
    p.add_argument("--output", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-degree", type=int, default=0, help="iterative k-core filter before splitting")

    p = sub.add_parser("train", help="train a model; any config key may be given as --key value")
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="flat key = value file")
    for flag, key in ABLATIONS.items():
        p.add_argument(flag, dest=f"{key}_off", action="store_true")

    p = sub.add_parser("eval", help="ranking metrics and MAD of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cutoffs", default="20,40")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p.add_argument("--include-train", action="store_true", help="allow the train split as truth")

    p = sub.add_parser("analyze", help="diagnostics written as CSV")
    p.add_argument("--mode", choices=("mad", "gradcurve", "sparsity"), required=True)
    p.add_argument("--output", required=True, help="CSV file")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--layer", default="final", help="mad: 'final' or a layer index")
    p.add_argument("--tau", default="1.0", help="gradcurve: comma-separated temperatures")
    p.add_argument("--grid", type=int, default=1001, help="gradcurve: number of x points")
    p.add_argument("--edges", default="0,10,20,40", help="sparsity: lower bucket edges")
    p.add_argument("--cutoff", type=int, default=20)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if extra and args.command != "train":
            raise ConfigError(f"unknown arguments: {' '.join(extra)}")
        if args.command == "prepare":
            return cmd_prepare(args)
        if args.command == "train":
            return cmd_train(args, parse_overrides(extra))
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_analyze(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IntegrityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
