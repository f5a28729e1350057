"""Per-node gradient accumulation, local updates and staleness accounting.

Each parameterized node owns one :class:`ParamBlock`. Gradients are summed
into an accumulator; once ``min_update_frequency`` of them have arrived the
block applies one optimizer step on their mean and clears the accumulator.
No other node is consulted, so updates from different nodes interleave
freely with in-flight forward/backward work.
"""
import logging
import math
import zlib
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ShapeError, default_dtype

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UpdateEvent:
    block: str
    update_counter: int
    n_grads: int


class SGD:
    name = "sgd"

    def __init__(self, lr=0.1):
        self.lr = lr

    def init_state(self, weights):
        return {}

    def step(self, weights, grads, state):
        for k, g in grads.items():
            weights[k] -= self.lr * g


class Momentum:
    """Heavy-ball SGD accumulating into the velocity: ``v = mu*v + g; w -= lr*v``."""

    name = "momentum"

    def __init__(self, lr=0.1, momentum=0.9):
        self.lr = lr
        self.momentum = momentum

    def init_state(self, weights):
        return {"v." + k: np.zeros_like(w) for k, w in weights.items()}

    def step(self, weights, grads, state):
        for k, g in grads.items():
            v = state["v." + k]
            v *= self.momentum
            v += g
            weights[k] -= self.lr * v


class Adam:
    name = "adam"

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def init_state(self, weights):
        state = {"t": np.zeros((1, 1))}
        for k, w in weights.items():
            state["m." + k] = np.zeros_like(w)
            state["v." + k] = np.zeros_like(w)
        return state

    def step(self, weights, grads, state):
        state["t"] += 1
        t = int(round(float(state["t"][0, 0])))
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            m, v = state["m." + k], state["v." + k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            weights[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


OPTIMIZERS = {"sgd": SGD, "momentum": Momentum, "adam": Adam}


def make_optimizer(cfg):
    """Build an optimizer from ``{"name": ..., "lr": ..., ...}``."""
    cfg = dict(cfg or {"name": "sgd"})
    name = cfg.pop("name", "sgd").lower()
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(**cfg)


def node_rng(seed, node_id):
    """Independent RNG per node, stable across runs and placements."""
    return np.random.default_rng([int(seed), zlib.crc32(str(node_id).encode())])


def glorot(rng, fan_in, fan_out, dtype=None):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype or default_dtype())


class ParamBlock:
    """Weights, gradient accumulator and optimizer slots of one node."""

    def __init__(self, name, weights, optimizer, min_update_frequency=1):
        if min_update_frequency < 1:
            raise ValueError("min_update_frequency must be >= 1")
        self.name = name
        self.weights = {k: np.array(w, order="C") for k, w in weights.items()}
        self.grad_accum = {k: np.zeros_like(w) for k, w in self.weights.items()}
        self.accum_count = 0
        self.update_counter = 0
        self.optimizer = optimizer
        self.opt_state = optimizer.init_state(self.weights)
        self.min_update_frequency = int(min_update_frequency)
        self.frozen = False
        self.skipped_nonfinite = 0
        self.grad_events = 0

    def accumulate(self, grads):
        """Add one gradient; returns an :class:`UpdateEvent` if it triggered an update."""
        for k, g in grads.items():
            if g.shape != self.weights[k].shape:
                raise ShapeError(f"{self.name}.{k}: gradient {g.shape} vs weight {self.weights[k].shape}")
        if not all(kernels.all_finite(g) for g in grads.values()):
            self.skipped_nonfinite += 1
            log.warning("%s: skipped non-finite gradient (%d so far)", self.name, self.skipped_nonfinite)
            return None
        for k, g in grads.items():
            kernels.add_inplace(self.grad_accum[k], g)
        self.accum_count += 1
        self.grad_events += 1
        if self.accum_count >= self.min_update_frequency and not self.frozen:
            return self._apply()
        return None

    def flush(self):
        """Apply a partial accumulator (end of epoch). No-op if empty or frozen."""
        if self.accum_count and not self.frozen:
            log.debug("%s: flushing partial accumulator of %d", self.name, self.accum_count)
            return self._apply()
        return None

    def _apply(self):
        n = self.accum_count
        mean = {k: a / n for k, a in self.grad_accum.items()}
        self.optimizer.step(self.weights, mean, self.opt_state)
        for a in self.grad_accum.values():
            a.fill(0)
        self.accum_count = 0
        self.update_counter += 1
        return UpdateEvent(self.name, self.update_counter, n)

    def zero_accum(self):
        for a in self.grad_accum.values():
            a.fill(0)
        self.accum_count = 0

    def snapshot(self):
        return {k: w.copy() for k, w in self.weights.items()}


class StalenessTracker:
    """Histogram of (updates at backward - updates at forward) for one node."""

    def __init__(self):
        self.hist = Counter()

    def record(self, fwd_counter, bwd_counter):
        s = bwd_counter - fwd_counter
        if s < 0:
            raise AssertionError(f"negative staleness {s}")
        self.hist[s] += 1

    def mean(self):
        n = sum(self.hist.values())
        return sum(k * v for k, v in self.hist.items()) / n if n else 0.0

    def reset(self):
        self.hist.clear()


def staleness_report(nodes):
    """Per-node staleness histograms for every node that tracks staleness."""
    return {nid: dict(sorted(n.staleness.hist.items())) for nid, n in nodes.items() if hasattr(n, "staleness")}


def mean_staleness(report):
    total = sum(sum(h.values()) for h in report.values())
    if not total:
        return 0.0
    return sum(k * v for h in report.values() for k, v in h.items()) / total


def average_blocks(blocks):
    """Replace weights and optimizer slots of every block by their elementwise mean."""
    if len(blocks) < 2:
        return
    first = blocks[0]
    for b in blocks[1:]:
        for k in first.weights:
            if b.weights[k].shape != first.weights[k].shape:
                raise ShapeError(f"replica {b.name}.{k} shape {b.weights[k].shape} != {first.weights[k].shape}")
    for table in ("weights", "opt_state"):
        for k in getattr(first, table):
            mean = sum(getattr(b, table)[k] for b in blocks) / len(blocks)
            for b in blocks:
                getattr(b, table)[k][...] = mean
