"""Command-line interface.

Commands: ``inspect``, ``compress``, ``eval``, ``pareto`` and ``round``.
Exit codes: 0 success, 2 input error, 3 infeasible budget, 4 numerical failure.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .estimator import HESSIAN_MODES, MLoRQ, resolve_hessians
from .exceptions import InputError, MLoRQError
from .intra_search import LOWRANK, LayerSpace, candidate_count, enumerate_candidates, front_to_rows, pareto_front
from .lorada import TARGETS, LoRAdaConfig, run_sequential_rounding
from .lowrank import hessian_weighted_decompose, truncate
from .model_store import (
    SOLUTION_CONTAINER,
    SOLUTION_JSON,
    compressed_container,
    load_compressed,
    load_sequential,
    save_solution,
    write_container,
)
from .netsim import forward
from .quantizer import DEFAULT_BITSET, PERCENTILE_GRID, quantize_activation

logger = logging.getLogger("mlorq")

FRONT_COLUMNS = ("layer", "kind", "r", "b_A", "b_B", "b_W", "local_loss", "memory_bits")


def _bitset(text):
    try:
        return tuple(sorted({int(t) for t in str(text).split(",") if t.strip()}))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad bit-width list {text!r}") from exc


def _grid(text):
    try:
        return tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad percentile list {text!r}") from exc


def _add_search_args(p):
    p.add_argument("--bitset", type=_bitset, default=DEFAULT_BITSET,
                   help="comma separated bit-widths (default 2,3,4,6,8)")
    p.add_argument("--rank-stride", type=int, default=1)
    p.add_argument("--percentiles", type=_grid, default=PERCENTILE_GRID)
    p.add_argument("--hessian", choices=HESSIAN_MODES, default="auto")


def _add_lorada_args(p):
    d = LoRAdaConfig()
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--lambda", dest="reg_weight", type=float, default=d.reg_weight)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--beta-start", type=float, default=d.beta_start)
    p.add_argument("--beta-end", type=float, default=d.beta_end)
    p.add_argument("--warmup", type=float, default=d.warmup)
    p.add_argument("--target", choices=TARGETS, default=d.target)


def _lorada_config(args):
    return LoRAdaConfig(
        iterations=args.iterations, learning_rate=args.lr, reg_weight=args.reg_weight,
        batch_size=args.batch_size, beta_start=args.beta_start, beta_end=args.beta_end,
        warmup=args.warmup, seed=args.seed, target=args.target,
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="mlorq", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="YAML or JSON file with default option values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print layer shapes and search-space sizes")
    p.add_argument("manifest")
    p.add_argument("--bitset", type=_bitset, default=DEFAULT_BITSET)
    p.add_argument("--rank-stride", type=int, default=1)

    p = sub.add_parser("compress", help="search a compression solution")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--budget-bits", type=int)
    g.add_argument("--avg-bits", type=float)
    p.add_argument("--act-budget-bits", type=int)
    _add_search_args(p)
    p.add_argument("--k-inf", type=int, default=16)
    p.add_argument("--delta", type=int, default=1024)
    p.add_argument("--quant-only", action="store_true", help="disable low-rank candidates")
    p.add_argument("--lorada", action="store_true", help="run adaptive rounding after allocation")
    _add_lorada_args(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a saved solution")
    p.add_argument("manifest")
    p.add_argument("solution_dir")

    p = sub.add_parser("pareto", help="dump per-layer Pareto fronts as CSV")
    p.add_argument("manifest")
    p.add_argument("--layer", help="only this layer")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--quant-only", action="store_true")
    _add_search_args(p)

    p = sub.add_parser("round", help="apply adaptive rounding to a saved solution")
    p.add_argument("manifest")
    p.add_argument("solution_dir")
    p.add_argument("--out", help="output directory (default: overwrite solution_dir)")
    _add_lorada_args(p)
    p.add_argument("--seed", type=int, default=0)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            cfg = yaml.safe_load(fh) or {}
        if not isinstance(cfg, dict):
            raise InputError("config file must hold a mapping")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        for key in ("bitset", "percentiles"):
            if isinstance(cfg.get(key), (list, tuple)):
                cfg[key] = ",".join(str(v) for v in cfg[key])
        conv = {"bitset": _bitset, "percentiles": _grid}
        sub.set_defaults(**{k: conv.get(k, lambda v: v)(v) for k, v in cfg.items() if k in known})
        args = parser.parse_args(argv)
    return args


def cmd_inspect(args, out):
    model, calib, manifest = load_sequential(args.manifest)
    total = 0
    print(f"model {model.name}: {len(model)} layers, {calib.shape[0]} calibration samples", file=out)
    print("layer\tn_out\tn_in\tr_max\tactivation\tcompressible\tcandidates", file=out)
    for l in model.layers:
        n = candidate_count(l.n_out, l.n_in, len(args.bitset), l.compressible, args.rank_stride)
        total += l.n_out * l.n_in
        print(f"{l.name}\t{l.n_out}\t{l.n_in}\t{min(l.n_out, l.n_in)}\t{l.activation}\t"
              f"{str(l.compressible).lower()}\t{n}", file=out)
    print(f"weights\t{total}", file=out)
    print(f"float_bits\t{32 * total}", file=out)
    return 0


def _write_fronts(path, model, fronts, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FRONT_COLUMNS + ("phi", "interpolated"), lineterminator="\n")
        w.writeheader()
        for l, f, m in zip(model.layers, fronts, metrics):
            rows = front_to_rows(f, l.name)
            for row, phi, interp in zip(rows, m.phi, m.interpolated):
                row["phi"] = repr(float(phi))
                row["interpolated"] = str(bool(interp)).lower()
            w.writerows(rows)


def cmd_compress(args, out):
    model, calib, manifest = load_sequential(args.manifest)
    if args.budget_bits is None and args.avg_bits is None:
        raise InputError("one of --budget-bits or --avg-bits is required")
    est = MLoRQ(
        model=model, budget_bits=args.budget_bits, avg_bits=args.avg_bits,
        act_budget_bits=args.act_budget_bits, bitset=args.bitset, rank_stride=args.rank_stride,
        k_inf=args.k_inf, delta=args.delta, percentiles=args.percentiles, hessian=args.hessian,
        quant_only=args.quant_only, lorada=_lorada_config(args) if args.lorada else None,
        random_state=args.seed,
    )
    est.fit(calib)
    out_dir = Path(args.out)
    extra = {
        "hessian": args.hessian,
        "bitset": list(args.bitset),
        "percentiles": list(args.percentiles),
        "rank_stride": args.rank_stride,
        "quant_only": args.quant_only,
        "lorada": _lorada_config(args).__dict__ if args.lorada else None,
    }
    save_solution(est.solution_, est.compressed_layers_, out_dir, model.name, est.metric_table_,
                  est.activation_params_, extra)
    _write_fronts(out_dir / "fronts.csv", model, est.fronts_, est.metric_table_)
    out.write((out_dir / "solution.txt").read_text())
    return 0


def _evaluate(model, calib, layers, act_params, out):
    ref = forward(model, calib)
    comp = model.with_weights([c.dense_weight() for c in layers])
    idx = {l.name: i for i, l in enumerate(model.layers)}
    quant = {idx[n]: (lambda x, p=p: quantize_activation(x, p)) for n, p in act_params.items()}
    res = forward(comp, calib, quant)
    mse = float(np.mean((ref - res) ** 2))
    nmse = float(np.sum((ref - res) ** 2) / np.sum(ref**2))
    print("layer\tkind\trank\tbits\tmemory_bits", file=out)
    total = 0
    for c in layers:
        total += c.memory_bits
        print(f"{c.name}\t{c.kind}\t{c.rank if c.rank else '-'}\t"
              f"{'/'.join(str(b) for b in c.bits)}\t{c.memory_bits}", file=out)
    print(f"total_memory_bits\t{total}", file=out)
    print(f"mse\t{mse!r}", file=out)
    print(f"nmse\t{nmse!r}", file=out)
    return {"mse": mse, "nmse": nmse, "total_memory_bits": total}


def cmd_eval(args, out):
    model, calib, _ = load_sequential(args.manifest)
    layers, act, _ = load_compressed(args.solution_dir)
    if [c.name for c in layers] != [l.name for l in model.layers]:
        raise InputError("solution layers do not match the model")
    _evaluate(model, calib, layers, act, out)
    return 0


def cmd_pareto(args, out):
    model, calib, _ = load_sequential(args.manifest)
    hessians = resolve_hessians(model, calib, args.hessian)
    names = [l.name for l in model.layers]
    if args.layer and args.layer not in names:
        raise InputError(f"unknown layer {args.layer!r}")
    rows = []
    for i, (l, hw) in enumerate(zip(model.layers, hessians)):
        if args.layer and l.name != args.layer:
            continue
        space = LayerSpace(l.weight, hw, args.bitset, args.percentiles, i,
                           compressible=l.compressible and not args.quant_only)
        rows.extend(front_to_rows(pareto_front(enumerate_candidates(space, args.rank_stride)), l.name))
    fh = open(args.out, "w", newline="") if args.out else out
    try:
        w = csv.DictWriter(fh, fieldnames=FRONT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_round(args, out):
    model, calib, _ = load_sequential(args.manifest)
    src = Path(args.solution_dir)
    layers, act, summary = load_compressed(src)
    hessians = resolve_hessians(model, calib, summary.get("hessian", "auto"))
    plan = []
    for l, c, hw in zip(model.layers, layers, hessians):
        if c.kind == LOWRANK:
            dec = hessian_weighted_decompose(l.weight, hw.Q)
            plan.append((LOWRANK, list(truncate(dec, c.rank)), list(c.params)))
        else:
            plan.append((c.kind, [l.weight], list(c.params)))
    cfg = _lorada_config(args)
    rounded = run_sequential_rounding(model, plan, calib, cfg)
    dst = Path(args.out) if args.out else src
    dst.mkdir(parents=True, exist_ok=True)
    write_container(compressed_container(rounded, act), dst / SOLUTION_CONTAINER)
    summary["lorada"] = cfg.__dict__
    (dst / SOLUTION_JSON).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if dst != src:
        for name in ("solution.txt", "solution.csv", "fronts.csv"):
            if (src / name).exists():
                (dst / name).write_text((src / name).read_text())
    _evaluate(model, calib, rounded, act, out)
    return 0


COMMANDS = {
    "inspect": cmd_inspect,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "pareto": cmd_pareto,
    "round": cmd_round,
}


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = parse_args(argv)
    except MLoRQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except MLoRQError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
