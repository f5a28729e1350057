"""Command-line entry points: train, gradcheck, sweep, estimate-throughput, summarize."""
import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as C
from . import data, gradcheck, harness, throughput
from .models import ModelSpec, build_model

log = logging.getLogger("dynflow")

SWEEP_HEADER = ["max_active_keys", "min_update_frequency", "epochs_to_target", "wall_to_target",
                "inst_per_s", "final_valid_acc", "epochs_run"]


def _parse_replicas(text):
    if text is None:
        return None
    text = str(text)
    if text.isdigit():
        return int(text)
    out = {}
    for part in text.split(","):
        node, _, k = part.partition("=")
        if not k.isdigit():
            raise argparse.ArgumentTypeError(f"bad replica spec {part!r}; use K or node=K[,node=K]")
        out[node.strip()] = int(k)
    return out


def _load(args, extra=None):
    over = {
        "train.threads": args.threads,
        "train.max_active_keys": args.max_active_keys,
        "train.min_update_frequency": args.min_update_frequency,
        "seed": args.seed,
    }
    over.update(extra or {})
    cfg = C.load(args.config, over)
    reps = _parse_replicas(args.replicas)
    if isinstance(reps, int):
        heavy = build_model(cfg.model).heavy
        reps = {n: reps for n in heavy} if reps > 1 else {}
    if reps is not None:
        cfg.replicas = reps
    return cfg


def cmd_train(args):
    base = _load(args)
    os.makedirs(args.out, exist_ok=True)
    results = []
    for i in range(args.repeat):
        cfg = base if args.repeat == 1 else C.load(base.doc, {"seed": base.seed + i})
        if args.repeat > 1:
            cfg.replicas = base.replicas
        run_dir = os.path.join(args.out, f"run{i}") if args.repeat > 1 else args.out
        os.makedirs(run_dir, exist_ok=True)
        res = harness.fit(cfg, csv_path=os.path.join(run_dir, "metrics.csv"))
        harness.save_weights(res.weights, os.path.join(run_dir, "weights.npz"))
        harness.write_json({
            "seed": cfg.seed,
            "epochs_to_target": res.epochs_to_target,
            "wall_to_target": res.wall_to_target,
            "final_valid_acc": res.final_acc,
            "inst_per_s": res.throughput,
            "staleness": {n: {str(k): v for k, v in h.items()} for n, h in res.reports[-1].staleness.items()},
        }, os.path.join(run_dir, "report.json"))
        results.append(res)
        print(f"run {i}: epochs_to_target={res.epochs_to_target} final_valid_acc={res.final_acc:.4f}")
    summ = harness.summary(results)
    harness.write_json(summ, os.path.join(args.out, "summary.json"))
    print(json.dumps(summ, sort_keys=True))
    return 0


def _default_gradcheck_cases():
    rng = np.random.default_rng(0)
    return {
        "mlp": (ModelSpec("mlp", input_dim=20, mlp_hidden=16, classes=4), data.VectorInstance(rng.standard_normal(20), 2)),
        "rnn": (ModelSpec("rnn", hidden=16, embed=8), data.ListReductionInstance("alt_mean", (1, 2, 3), 0)),
        "treernn": (ModelSpec("treernn", hidden=8, embed=4, classes=5, vocab=10), data.parse_sexpr("(3 (2 a) (4 (1 b) (0 c)))")),
        "ggsnn": (ModelSpec("ggsnn", hidden=5, steps=2, vocab=data.GRAPH_VOCAB),
                  data.GraphInstance(4, (3, 1, 2, 1), ((0, 1, 0), (1, 0, 1), (1, 3, 2), (3, 1, 3), (2, 3, 0)), 3)),
    }


def cmd_gradcheck(args):
    from . import tensor

    tensor.set_default_dtype("float64")
    if args.config:
        cfg = _load(args)
        train, _, _ = C.make_datasets(C.load(cfg.doc, {"dataset.train": 1, "dataset.valid": 1}))
        cases = {cfg.model.family: (cfg.model, train[0])}
    else:
        cases = _default_gradcheck_cases()
    rows, failed = [], 0
    for name, (spec, inst) in cases.items():
        for r in gradcheck.check_model(build_model(spec), inst, tol=args.tol):
            ok = r.ok(args.tol)
            failed += not ok
            rows.append([name, r.node, r.param, r.size, f"{r.rel_error:.3e}", "pass" if ok else "FAIL"])
            print(f"{'pass' if ok else 'FAIL'} {name}.{r.node}.{r.param} rel_error={r.rel_error:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "node", "param", "size", "rel_error", "result"])
            w.writerows(rows)
    return 1 if failed else 0


def _ints(text):
    return [int(x) for x in text.split(",") if x]


def cmd_sweep(args):
    base = _load(args)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_HEADER)
        for mak in _ints(args.mak):
            for muf in _ints(args.muf):
                cfg = C.load(base.doc, {"train.max_active_keys": mak, "train.min_update_frequency": muf})
                cfg.replicas = base.replicas
                res = harness.fit(cfg, csv_path=os.path.join(args.out, f"mak{mak}_muf{muf}.csv"))
                row = [mak, muf, res.epochs_to_target if res.epochs_to_target is not None else "",
                       f"{res.wall_to_target:.3f}" if res.wall_to_target is not None else "",
                       f"{res.throughput:.3f}", f"{res.final_acc:.6f}", len(res.reports)]
                w.writerow(row)
                f.flush()
                print(",".join(map(str, row)))
    return 0


def cmd_estimate(args):
    m = throughput.ThroughputModel(args.hidden, args.nodes, args.edges, args.edge_types, args.steps,
                                   args.flops, args.overhead, args.bits)
    r = throughput.estimate(m)
    r["samples_per_s_2sf"] = throughput.sig(r["samples_per_s"])
    r["bandwidth_bits_per_s_2sf"] = throughput.sig(r["bandwidth_bits_per_s"])
    print(json.dumps(r, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        harness.write_json(r, os.path.join(args.out, "throughput.json"))
    return 0


def cmd_summarize(args):
    rows = harness.read_metrics(args.metrics)
    best = max(rows, key=lambda r: r["valid_acc"]) if rows else None
    print(json.dumps({
        "epochs": len(rows),
        "best_valid_acc": best["valid_acc"] if best else None,
        "best_epoch": best["epoch"] if best else None,
        "total_wall_s": sum(r["wall_s"] for r in rows),
        "mean_inst_per_s": float(np.mean([r["inst_per_s"] for r in rows])) if rows else None,
    }, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dynflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def run_flags(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="run configuration (JSON)")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--max-active-keys", type=int)
        sp.add_argument("--min-update-frequency", type=int)
        sp.add_argument("--replicas", help="K for every heavy node, or node=K[,node=K]")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=None)

    t = sub.add_parser("train", help="train with early stopping at the target accuracy")
    run_flags(t)
    t.add_argument("--repeat", type=int, default=1)
    t.set_defaults(fn=cmd_train, out_default="runs/train")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    run_flags(g, need_config=False)
    g.add_argument("--tol", type=float, default=1e-5)
    g.set_defaults(fn=cmd_gradcheck, out_default=None)

    s = sub.add_parser("sweep", help="grid over max_active_keys x min_update_frequency")
    run_flags(s)
    s.add_argument("--mak", default="1,4,8,16")
    s.add_argument("--muf", default="10,50,250")
    s.set_defaults(fn=cmd_sweep, out_default="runs/sweep")

    e = sub.add_parser("estimate-throughput", help="analytic samples/s and bandwidth estimate")
    e.add_argument("--hidden", type=float, default=200)
    e.add_argument("--nodes", type=float, default=30)
    e.add_argument("--edges", type=float, default=30)
    e.add_argument("--edge-types", type=float, default=4)
    e.add_argument("--steps", type=float, default=4)
    e.add_argument("--flops", type=float, default=1e12)
    e.add_argument("--overhead", type=float, default=0.5)
    e.add_argument("--bits", type=float, default=32)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_estimate, out_default=None)

    m = sub.add_parser("summarize", help="summarize a metrics CSV")
    m.add_argument("metrics")
    m.set_defaults(fn=cmd_summarize, out_default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "out", None) is None:
        args.out = args.out_default
    if getattr(args, "repeat", 1) < 1:
        print("error: --repeat must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (C.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
