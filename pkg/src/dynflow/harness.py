"""Epoch loop shared by the CLI and the acceptance checks."""
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import data
from .config import make_datasets, seeds
from .models import build_model
from .runtime import Runtime

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "wall_s", "train_loss", "valid_acc", "inst_per_s", "mean_staleness"]


@dataclass
class RunResult:
    reports: list
    epochs_to_target: int = None
    wall_to_target: float = None
    weights: dict = field(default_factory=dict)

    @property
    def final_acc(self):
        return self.reports[-1].valid_acc if self.reports else float("nan")

    @property
    def throughput(self):
        """Mean training instances per second over all epochs."""
        n = sum(r.instances for r in self.reports)
        t = sum(r.wall_s for r in self.reports)
        return n / t if t else float("nan")


def epoch_order(instances, rng, bucket=None):
    order = [instances[int(i)] for i in rng.permutation(len(instances))]
    if bucket:
        order = data.bucket_by_length(order, bucket, rng)
    return order


def fit(cfg, train=None, valid=None, csv_path=None, on_epoch=None, model=None):
    """Train until the target validation accuracy or ``cfg.epochs``.

    Datasets default to the ones described by ``cfg``. Returns a :class:`RunResult`.
    """
    if train is None or valid is None:
        gtrain, gvalid, fresh = make_datasets(cfg)
        train = gtrain if train is None else train
        valid = gvalid if valid is None else valid
    else:
        fresh = None
    model = model or build_model(cfg.model, cfg.replicas)
    rng = np.random.default_rng(seeds(cfg.seed, 3)[2])
    bucket = cfg.dataset.get("bucket")
    writer = fh = None
    if csv_path:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
    result = RunResult([])
    elapsed = 0.0
    try:
        with Runtime(model.graph, cfg.train, model.pump, model.label_entries) as rt:
            for epoch in range(cfg.epochs):
                epoch_data = fresh(epoch) if fresh and epoch else train
                rep = rt.run_epoch(epoch_order(epoch_data, rng, bucket), valid)
                elapsed += rep.wall_s
                result.reports.append(rep)
                if writer:
                    writer.writerow(csv_row(rep))
                    fh.flush()
                log.info("epoch %d: loss %.4f valid %.4f %.1f inst/s staleness %.2f",
                         rep.epoch, rep.train_loss, rep.valid_acc, rep.inst_per_s, rep.mean_staleness)
                if on_epoch:
                    on_epoch(rep, rt)
                if cfg.lr_decay != 1.0:
                    rt.optimizer.lr *= cfg.lr_decay
                if rep.valid_acc >= cfg.target:
                    result.epochs_to_target = rep.epoch
                    result.wall_to_target = elapsed
                    break
            result.weights = rt.parameters()
            if cfg.event_log and cfg.train.diagnostics and csv_path:
                rt.write_event_log(os.path.join(os.path.dirname(csv_path), "events.jsonl"))
    finally:
        if fh:
            fh.close()
    return result


def csv_row(rep):
    return [rep.epoch, f"{rep.wall_s:.6f}", f"{rep.train_loss:.6f}", f"{rep.valid_acc:.6f}",
            f"{rep.inst_per_s:.3f}", f"{rep.mean_staleness:.6f}"]


def read_metrics(path):
    """Parse a metrics CSV written by :func:`fit`; rejects unexpected headers."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: header {rows[0] if rows else None} != {CSV_HEADER}")
    out = []
    for r in rows[1:]:
        out.append({"epoch": int(r[0]), **{k: float(v) for k, v in zip(CSV_HEADER[1:], r[1:])}})
    return out


def save_weights(weights, path):
    flat = {f"{node}/{k}": w for node, ws in weights.items() for k, w in ws.items()}
    np.savez(path, **flat)


def summary(results):
    """Median time-to-target and epochs over repeated runs."""
    hit = [r for r in results if r.epochs_to_target is not None]
    return {
        "runs": len(results),
        "reached_target": len(hit),
        "median_epochs_to_target": float(np.median([r.epochs_to_target for r in hit])) if hit else None,
        "median_wall_to_target": float(np.median([r.wall_to_target for r in hit])) if hit else None,
        "median_final_acc": float(np.median([r.final_acc for r in results])) if results else None,
        "median_inst_per_s": float(np.median([r.throughput for r in results])) if results else None,
    }


def write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
