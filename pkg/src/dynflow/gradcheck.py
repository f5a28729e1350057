"""Single-threaded executor and finite-difference gradient checks."""
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import optim
from .ir import CONTROLLER, FORWARD, Message
from .nodes import Ppt, make_node


class SerialExecutor:
    """Runs a graph's nodes inline on the calling thread, one message at a time.

    Uses the same node objects and the same backward-first policy as a worker,
    so results match a one-thread runtime with ``max_active_keys=1``.
    """

    def __init__(self, graph, optimizer=None, seed=0, min_update_frequency=1, muf_overrides=None):
        self.graph = graph
        self.optimizer = optim.make_optimizer(optimizer or {"name": "sgd", "lr": 0.0})
        overrides = muf_overrides or {}
        self.nodes = {
            nid: make_node(nid, spec, self.optimizer, seed=seed,
                           min_update_frequency=overrides.get(nid, overrides.get(spec.get("replica_of"), min_update_frequency)))
            for nid, spec in graph.nodes.items()
        }

    def run(self, sends, train=True):
        """Process ``[(entry port, payload, state)]`` to completion; returns messages that reached the controller."""
        fwd, bwd = deque(), deque()
        for port, payload, state in sends:
            fwd.append((self.graph.fwd[(CONTROLLER, port)], Message(FORWARD, payload, state, train)))
        returned = []
        while fwd or bwd:
            (nid, port), msg = bwd.popleft() if bwd else fwd.popleft()
            if nid == CONTROLLER:
                returned.append((port, msg))
                continue
            for out_port, out in self.nodes[nid].process(port, msg):
                if out.direction is FORWARD:
                    fwd.append((self.graph.fwd[(nid, out_port)], out))
                else:
                    bwd.append((self.graph.bwd[(nid, out_port)], out))
        return returned

    def ppts(self):
        return {nid: n for nid, n in self.nodes.items() if isinstance(n, Ppt)}

    def losses(self):
        recs = []
        for n in self.nodes.values():
            if n.kind == "loss":
                recs.extend(n.records)
                n.records = []
        return recs


@dataclass
class BlockCheck:
    node: str
    param: str
    rel_error: float
    size: int

    def ok(self, tol):
        return self.rel_error < tol


def check_model(model, instance, eps=1e-6, seed=0, tol=1e-5):
    """Compare backprop gradients of every parameter with central differences.

    Returns a list of :class:`BlockCheck`, one per parameter array, with the
    norm-wise relative error ``|a - n| / max(|a| + |n|, 1e-300)``.
    """
    ex = SerialExecutor(model.graph, seed=seed, min_update_frequency=10 ** 9)
    sends = model.pump(instance, 0, True)
    ex.run(sends, train=True)
    ex.losses()
    analytic = {nid: {k: a.copy() for k, a in n.block.grad_accum.items()} for nid, n in ex.ppts().items()}
    for n in ex.ppts().values():
        n.block.zero_accum()

    def loss():
        ex.run(model.pump(instance, 0, False), train=False)
        return sum(r[1] for r in ex.losses())

    out = []
    for nid, n in ex.ppts().items():
        for k, w in n.block.weights.items():
            num = np.zeros_like(w)
            flat, nflat = w.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp = loss()
                flat[i] = orig - eps
                lm = loss()
                flat[i] = orig
                nflat[i] = (lp - lm) / (2 * eps)
            a = analytic[nid][k]
            err = np.linalg.norm(a - num) / max(np.linalg.norm(a) + np.linalg.norm(num), 1e-300)
            out.append(BlockCheck(nid, k, float(err), int(w.size)))
    return out
