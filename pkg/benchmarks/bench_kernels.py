"""Compare the compiled and numpy kernel backends.

Times each hot kernel on single-row and batched shapes, then one training
epoch of the list-reduction RNN per backend. Usage::

    python3 benchmarks/bench_kernels.py [--repeat 200] [--instances 500] [--csv out.csv]
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from dynflow import _kernels_py, data, kernels
from dynflow.models import ModelSpec, build_model
from dynflow.runtime import Runtime, TrainConfig

SHAPES = [(1, 160, 128), (32, 160, 128), (1, 784, 784), (64, 784, 784)]


def _cases(rows, n_in, n_out, rng):
    x = rng.standard_normal((rows, n_in))
    w = rng.standard_normal((n_in, n_out))
    b = rng.standard_normal((1, n_out))
    g = rng.standard_normal((rows, n_out))
    acc = np.zeros_like(w)
    return {
        "linear_forward": lambda k: k.linear_forward(x, w, b),
        "linear_backward": lambda k: k.linear_backward(x, w, g),
        "relu_backward": lambda k: k.relu_backward(g, g),
        "sigmoid": lambda k: k.sigmoid(g),
        "add_inplace": lambda k: k.add_inplace(acc, w),
        "all_finite": lambda k: k.all_finite(w),
    }


def _backends():
    out = {"python": _kernels_py}
    try:
        from dynflow import _kernels

        out["cython"] = _kernels
    except ImportError:
        print("compiled kernels not built; timing the numpy backend only", file=sys.stderr)
    return out


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    backends = _backends()
    for shape in SHAPES:
        for name, fn in _cases(*shape, rng).items():
            t = {b: min(timeit.repeat(lambda: fn(mod), number=repeat, repeat=3)) / repeat for b, mod in backends.items()}
            rows.append({"kernel": name, "shape": "x".join(map(str, shape)), **{f"{b}_us": v * 1e6 for b, v in t.items()}})
    return rows


def bench_epoch(instances):
    insts = data.gen_list_reduction(instances, 0)
    rows = []
    for backend in _backends():
        kernels.use(backend)
        m = build_model(ModelSpec("rnn", hidden=128, embed=32, identity_init=1.0))
        conf = TrainConfig(threads=1, max_active_keys=1, min_update_frequency=20, optimizer={"name": "adam", "lr": 0.002})
        with Runtime(m.graph, conf, m.pump) as rt:
            rt.run_epoch(insts[:50])
            rep = rt.run_epoch(insts)
        rows.append({"backend": backend, "inst_per_s": rep.inst_per_s})
    kernels.use("auto")
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--instances", type=int, default=500)
    p.add_argument("--csv", help="also write the kernel table here")
    args = p.parse_args(argv)

    table = bench_kernels(args.repeat)
    cols = list(table[0])
    print(" ".join(f"{c:>16}" for c in cols + (["speedup"] if "cython_us" in cols else [])))
    for r in table:
        cells = [f"{r[c]:>16.2f}" if isinstance(r[c], float) else f"{r[c]:>16}" for c in cols]
        if "cython_us" in r:
            cells.append(f"{r['python_us'] / r['cython_us']:>15.2f}x")
        print(" ".join(cells))
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(table)
    print()
    for r in bench_epoch(args.instances):
        print(f"RNN H=128 epoch, {r['backend']:>6} kernels: {r['inst_per_s']:.1f} instances/s")


if __name__ == "__main__":
    main()
