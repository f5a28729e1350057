"""Reference implementations written independently of the package internals.

Nothing here imports the node, runtime or optimizer code. The sequential RNN
takes its matrix primitives as a parameter so it can be compared bit for bit
with either kernel backend.
"""
from fractions import Fraction
from types import SimpleNamespace

import numpy as np

# matrix primitives ---------------------------------------------------------------

NUMPY_OPS = SimpleNamespace(
    linear_forward=lambda x, w, b: x @ w + b,
    linear_backward=lambda x, w, g: (g @ w.T, x.T @ g, g.sum(axis=0, keepdims=True)),
)


def kernel_ops():
    """Primitives of the active package backend, for bitwise comparisons."""
    from dynflow import kernels

    return SimpleNamespace(linear_forward=kernels.linear_forward, linear_backward=kernels.linear_backward)


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x.copy())
        x[i] = orig - h
        fm = f(x.copy())
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


# optimizers ----------------------------------------------------------------------


class RefAdam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def init(self, w):
        return {"t": 0, "m": {k: np.zeros_like(a) for k, a in w.items()}, "v": {k: np.zeros_like(a) for k, a in w.items()}}

    def step(self, w, g, s):
        s["t"] += 1
        c1 = 1.0 - self.b1 ** s["t"]
        c2 = 1.0 - self.b2 ** s["t"]
        for k in g:
            s["m"][k] = s["m"][k] * self.b1 + (1.0 - self.b1) * g[k]
            s["v"][k] = s["v"][k] * self.b2 + (1.0 - self.b2) * (g[k] * g[k])
            w[k] = w[k] - self.lr * (s["m"][k] / c1) / (np.sqrt(s["v"][k] / c2) + self.eps)


class RefSGD:
    def __init__(self, lr):
        self.lr = lr

    def init(self, w):
        return {}

    def step(self, w, g, s):
        for k in g:
            w[k] = w[k] - self.lr * g[k]


class RefMomentum:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.mu = lr, momentum

    def init(self, w):
        return {k: np.zeros_like(a) for k, a in w.items()}

    def step(self, w, g, s):
        for k in g:
            s[k] = s[k] * self.mu + g[k]
            w[k] = w[k] - self.lr * s[k]


class RefBlock:
    """Accumulate-then-mean-update bookkeeping for one parameter group."""

    def __init__(self, weights, opt, muf):
        self.w = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
        self.acc = {k: np.zeros_like(v) for k, v in self.w.items()}
        self.n = 0
        self.opt, self.muf = opt, muf
        self.state = opt.init(self.w)
        self.updates = 0

    def add(self, g):
        for k in g:
            self.acc[k] = self.acc[k] + g[k]
        self.n += 1
        if self.n >= self.muf:
            self.apply()

    def apply(self):
        if not self.n:
            return
        self.opt.step(self.w, {k: a / self.n for k, a in self.acc.items()}, self.state)
        self.acc = {k: np.zeros_like(a) for k, a in self.acc.items()}
        self.n = 0
        self.updates += 1


# sequential RNN ------------------------------------------------------------------


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


class SequentialRNN:
    """Single-threaded Elman RNN trained one instance at a time.

    ``init`` is ``{"lookup": {"table"}, "linear1": {"w", "b"}, "linear2": {"w", "b"}}``.
    Gradients go to their block as soon as they are computed, newest time
    step first; the input gradient of a step uses the weights current at
    that moment, so an update triggered mid-sequence affects earlier steps.
    """

    def __init__(self, init, make_opt, muf, ops=NUMPY_OPS):
        self.blocks = {name: RefBlock(w, make_opt(), muf) for name, w in init.items()}
        self.ops = ops

    def weights(self):
        return {n: {k: v.copy() for k, v in b.w.items()} for n, b in self.blocks.items()}

    def _forward(self, tokens):
        table = self.blocks["lookup"].w["table"]
        w1, b1 = self.blocks["linear1"].w["w"], self.blocks["linear1"].w["b"]
        hidden = w1.shape[1]
        h = np.zeros((1, hidden))
        steps = []
        for tok in tokens:
            x = np.concatenate([table[tok:tok + 1], h], axis=1)
            a = self.ops.linear_forward(x, w1, b1)
            h = np.maximum(a, 0)
            steps.append((tok, x, a))
        w2, b2 = self.blocks["linear2"].w["w"], self.blocks["linear2"].w["b"]
        return steps, h, self.ops.linear_forward(h, w2, b2)

    def predict(self, tokens):
        return int(self._forward(tokens)[2].argmax())

    def train_one(self, tokens, label):
        steps, h, z = self._forward(tokens)
        logp = _log_softmax(z)
        g = np.exp(logp)
        g[0, label] -= 1
        lin1, lin2, emb = self.blocks["linear1"], self.blocks["linear2"], self.blocks["lookup"]
        dh, dw, db = self.ops.linear_backward(h, lin2.w["w"], g)
        lin2.add({"w": dw, "b": db})
        dim = emb.w["table"].shape[1]
        for tok, x, a in reversed(steps):
            ga = dh * (a > 0)
            dx, dw, db = self.ops.linear_backward(x, lin1.w["w"], ga)
            lin1.add({"w": dw, "b": db})
            gt = np.zeros_like(emb.w["table"])
            gt[tok] += dx[0, :dim]
            emb.add({"table": gt})
            dh = dx[:, dim:]
        return float(-logp[0, label])

    def train_epoch(self, instances):
        loss = sum(self.train_one(inst.tokens, inst.label) for inst in instances)
        for b in self.blocks.values():
            b.apply()
        return loss / len(instances)


# dataset oracles -------------------------------------------------------------


def list_reduction_oracle(op, digits):
    """Exact rational evaluation, round half away from zero, then mod 10."""
    d = [Fraction(x) for x in digits]
    if op == "mean":
        v = sum(d) / len(d)
    elif op == "alt_mean":
        ev, od = d[0::2], d[1::2]
        v = sum(ev) / len(ev) - sum(od) / len(od)
    elif op == "range":
        v = max(d) - min(d)
    elif op == "len":
        v = Fraction(len(d))
    else:
        raise ValueError(op)
    sign = 1 if v >= 0 else -1
    mag = abs(v)
    r = int(mag) + (1 if mag - int(mag) >= Fraction(1, 2) else 0)
    return (sign * r) % 10


def traversal_oracle(num_nodes, annotations, edges, query_token=3, isa_type=0, fears_type=2):
    """Follow is-a then fears from the query node using adjacency sets."""
    adj = {}
    for s, d, t in edges:
        adj.setdefault((s, t), set()).add(d)
    q = [i for i in range(num_nodes) if annotations[i] == query_token]
    assert len(q) == 1
    (species,) = adj[(q[0], isa_type)]
    (answer,) = adj[(species, fears_type)]
    return answer


def planted_tree_oracle(children, tokens):
    """Recompute every node's class bottom-up from leaf token ids."""
    labels = [None] * len(children)

    def rule(a, b):
        if (a == 0) != (b == 0):
            return 4 - (b if a == 0 else a)
        return int(np.clip(a + b - 2, 0, 4))

    for i, c in enumerate(children):
        labels[i] = tokens[i] % 5 if not c else rule(labels[c[0]], labels[c[1]])
    return labels
