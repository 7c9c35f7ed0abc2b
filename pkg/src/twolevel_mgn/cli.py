"""Command-line entry point: data generation, preprocessing, training, evaluation, ablations.

Config files are JSON objects with optional ``model``, ``train``, ``coarsen``
and ``seed`` sections. Command-line flags override values from the file.
Every command that writes a directory also writes the resolved configuration
there as ``run_config.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fem
from .autodiff import ShapeError
from .coarsen import ALGORITHMS, louvain, partition_graph
from .experiments import (DataError, block_ablation, coarsen_ablation, load_split, prepare_all, read_manifest,
                          shift_test)
from .fem import MeshError, SolverError
from .mesh import SampleFormatError, load_sample, save_sample
from .model import ConfigError, ModelConfig, TwoLevelMGN, prepare
from .spectral import LanczosError
from .training import (CheckpointError, NumericalError, TrainConfig, evaluate_mse, fit_normalizer,
                       load_checkpoint, sensitivity_map, stream_seed, train, write_sensitivity_csv)

log = logging.getLogger("twolevel_mgn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    coarsen: dict = field(default_factory=lambda: {"algorithm": "louvain"})
    command: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "coarsen": dict(self.coarsen), "command": self.command}

    def write(self, directory) -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "run_config.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def resolve_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: line {exc.lineno}: {exc.msg}") from None
    unknown = set(doc) - {"seed", "model", "train", "coarsen", "command", "format_version"}
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    seed = getattr(args, "seed", None)
    seed = int(doc.get("seed", 0) if seed is None else seed)
    model_doc = dict(doc.get("model", {}))
    train_doc = dict(doc.get("train", {}))
    for flag, key in (("max_steps", "max_steps"), ("lr", "learning_rate"), ("eval_every", "eval_every")):
        val = getattr(args, flag, None)
        if val is not None:
            train_doc[key] = val
    train_doc["seed"] = seed
    try:
        model = ModelConfig(**model_doc)
        tcfg = TrainConfig(**train_doc)
    except TypeError as exc:
        raise UsageError(f"config: {exc}") from None
    return RunConfig(seed, model, tcfg, dict(doc.get("coarsen", {"algorithm": "louvain"})),
                     {k: v for k, v in vars(args).items() if k != "func"})


def _command(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------- commands

def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def cmd_gen_data(args) -> int:
    divisions = tuple(int(t) for t in args.divisions.split(","))
    if len(divisions) != 2:
        raise UsageError("--divisions expects NX,NY")
    if args.holes == "grid":
        holes = fem.default_hole_grid()
        if args.num_holes is not None:
            idx = np.unique(np.linspace(0, len(holes) - 1, args.num_holes).round().astype(int))
            holes = [holes[i] for i in idx]
    else:
        holes = [None]
    manifest = fem.generate_dataset(holes, _floats(args.angles), args.out, divisions=divisions, seed=args.seed)
    RunConfig(seed=args.seed, command=_command(args)).write(args.out)
    print(f"wrote {len(manifest['files'])} samples to {args.out} "
          f"(train {len(manifest['train'])}, val {len(manifest['val'])}, test {len(manifest['test'])})")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    manifest = read_manifest(args.data)
    counts = []
    for fname in manifest["files"]:
        path = Path(args.data) / fname
        sample = load_sample(path)
        k = args.k
        if args.coarsen != "louvain" and k is None and args.cell is None and args.hops is None:
            k = louvain(sample.graph).num_groups
        part = partition_graph(sample.graph, args.coarsen, k=k, cell=args.cell, hops=args.hops,
                               seed=int(np.random.default_rng(stream_seed(args.seed, "coarsen")).integers(2**31)))
        save_sample(sample.with_partition(part.assignment), path)
        counts.append(part.num_groups)
    rc = RunConfig(seed=args.seed, coarsen={"algorithm": args.coarsen, "k": args.k, "cell": args.cell,
                                             "hops": args.hops}, command=_command(args))
    (Path(args.data) / "preprocess_config.json").write_text(json.dumps(rc.to_dict(), indent=1, sort_keys=True))
    print(f"{args.coarsen}: {len(counts)} samples, coarse nodes mean {np.mean(counts):.2f} "
          f"(min {min(counts)}, max {max(counts)})")
    return EXIT_OK


def _load_sets(data, k_pe):
    return [prepare_all(load_split(data, s), k_pe) for s in ("train", "val", "test")]


def cmd_train(args) -> int:
    rc = resolve_config(args.config, args)
    tr, va, _ = _load_sets(args.data, rc.model.k_pe)
    tcfg = replace(rc.train, checkpoint_dir=str(args.out))
    rc = replace(rc, train=tcfg)
    rc.write(args.out)
    init_seed = int(np.random.default_rng(stream_seed(rc.seed, "init")).integers(2**31))
    model = TwoLevelMGN(rc.model, seed=init_seed)
    result = train(model, tr, va, tcfg, fit_normalizer(tr))
    print(f"trained {tcfg.max_steps} steps; best val MSE {result.best_val:.6g} at step {result.best_step}; "
          f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, normalizer, _, _ = load_checkpoint(args.checkpoint)
    samples = prepare_all(load_split(args.data, args.split), model.config.k_pe)
    res = evaluate_mse(model, samples, normalizer)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "mse"])
        for s, v in zip(samples, res["per_sample"]):
            w.writerow([s.name, repr(v)])
    print(f"{args.split} MSE {res['mean']:.6g} over {len(samples)} samples (per-sample CSV: {out})")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, normalizer, _, _ = load_checkpoint(args.checkpoint)
    sample = load_sample(args.sample)
    inp = prepare(sample, model.config.k_pe)
    pred = model.predict(inp, normalizer)
    truth = inp.response
    p = pred.shape[1]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        suffix = [""] if p == 1 else [f"_{c}" for c in range(p)]
        head = ["node", "x", "y"]
        for s in suffix:
            head += [f"pred{s}", f"true{s}", f"abs_err{s}"]
        w.writerow(head)
        for i in range(inp.num_nodes):
            row = [i, repr(float(inp.coords[i, 0])), repr(float(inp.coords[i, 1]))]
            for c in range(p):
                y = float(truth[i, c]) if truth is not None else float("nan")
                row += [repr(float(pred[i, c])), repr(y), repr(abs(float(pred[i, c]) - y))]
            w.writerow(row)
    print(f"wrote {inp.num_nodes} node predictions to {args.out}")
    return EXIT_OK


def _write_rows(path, rows):
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_ablate_blocks(args) -> int:
    rc = resolve_config(args.config, args)
    out = Path(args.out or Path(args.data) / "ablate_blocks")
    rc.write(out)
    tr, va, te = _load_sets(args.data, rc.model.k_pe)
    rows = block_ablation(tr, va, te, rc.model, rc.train, match_params=not args.no_match)
    _write_rows(out / "ablate_blocks.csv", rows)
    for r in rows:
        print(f"{r['block_order']:9s} M={r['M']} params={r['params']} test MSE {r['test_mse']:.6g}")
    return EXIT_OK


def cmd_ablate_coarsen(args) -> int:
    rc = resolve_config(args.config, args)
    out = Path(args.out or Path(args.data) / "ablate_coarsen")
    rc.write(out)
    sets = [load_split(args.data, s) for s in ("train", "val", "test")]
    rows = coarsen_ablation(*sets, rc.model, rc.train, seed=rc.seed)
    _write_rows(out / "ablate_coarsen.csv", rows)
    for r in rows:
        print(f"{r['algorithm']:9s} groups={r['mean_groups']:.1f} test MSE {r['test_mse']:.6g}")
    return EXIT_OK


def cmd_shift_test(args) -> int:
    model, normalizer, _, _ = load_checkpoint(args.checkpoint)
    samples = prepare_all(load_split(args.data, args.split), model.config.k_pe)
    res = shift_test(model, samples, normalizer, args.dx)
    print(f"{args.split} MSE before {res['mse_before']:.10g} after dx={args.dx} mm {res['mse_after']:.10g} "
          f"(relative change {res['relative_change']:.3e})")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    model, normalizer, _, _ = load_checkpoint(args.checkpoint)
    inp = prepare(load_sample(args.sample), model.config.k_pe)
    grad = sensitivity_map(model, inp, normalizer, args.node)
    write_sensitivity_csv(args.out, inp, grad)
    print(f"wrote sensitivity map for node {args.node} to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="twolevel-mgn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate beam samples with FEM ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--holes", choices=("grid", "none"), default="grid")
    p.add_argument("--num-holes", type=int, default=None, help="evenly spaced subset of the 111 hole positions")
    p.add_argument("--angles", default=",".join(str(a) for a in fem.DEFAULT_ANGLES_DEG),
                   help="force angles in degrees from the -y axis")
    p.add_argument("--divisions", default="50,8")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="cache coarsening partitions in every sample")
    p.add_argument("--data", required=True)
    p.add_argument("--coarsen", choices=ALGORITHMS, default="louvain")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--k", type=int)
    g.add_argument("--cell", type=float)
    g.add_argument("--hops", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    def train_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--eval-every", type=int)

    p = sub.add_parser("train", help="train a model")
    train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean MSE of a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-node predictions for one sample")
    p.add_argument("--sample", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate-blocks", help="train the four block orderings")
    train_flags(p)
    p.add_argument("--out")
    p.add_argument("--no-match", action="store_true", help="keep M fixed instead of matching parameter counts")
    p.set_defaults(func=cmd_ablate_blocks)

    p = sub.add_parser("ablate-coarsen", help="train with each of the six coarsening algorithms")
    train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate_coarsen)

    p = sub.add_parser("shift-test", help="test MSE before/after translating coordinates")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dx", type=float, default=20.0)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_shift_test)

    p = sub.add_parser("sensitivity", help="gradient map of one node's output w.r.t. all loads")
    p.add_argument("--sample", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sensitivity)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, SampleFormatError, CheckpointError, DataError, MeshError, KeyError,
            IndexError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, NumericalError, LanczosError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
