"""Forward/backward semantics of every IR node kind.

A node processes one message at a time and returns the messages it emits as
``(port, message)`` pairs. Forward messages leave through output ports and
backward messages through input ports; the runtime resolves ports to the
neighbouring node. Caches are keyed by the node's keying function and must
be empty once every instance of an epoch has completed.
"""
import itertools

import numpy as np

from . import statefns
from . import tensor as T
from .ir import BACKWARD, FORWARD, DuplicateKeyError, KeyFn, Message, ProtocolError
from .optim import ParamBlock, StalenessTracker, glorot, node_rng


class NodeError(RuntimeError):
    pass


def _put(cache, key, value, node):
    if key in cache:
        raise DuplicateKeyError(f"node {node.node_id!r}: key {key} already in flight (keying function too coarse)")
    cache[key] = value


def _pop(cache, key, node, state):
    try:
        return cache.pop(key)
    except KeyError:
        raise ProtocolError(f"node {node.node_id!r}: backward for unknown key {key} (state {state!r})") from None


class Node:
    kind = None
    #: names of dict attributes that must be empty at epoch end
    caches = ()

    def __init__(self, node_id, spec):
        self.node_id = node_id
        self.spec = spec
        key = spec.get("key")
        self.key_fn = KeyFn(key) if key else None

    def process(self, port, msg):
        if msg.direction is FORWARD:
            return self.forward(port, msg)
        return self.backward(port, msg)

    def forward(self, port, msg):
        raise NotImplementedError

    def backward(self, port, msg):
        raise NotImplementedError

    def cache_contents(self):
        """``{cache name: [keys]}`` for non-empty caches."""
        out = {}
        for name in self.caches:
            c = getattr(self, name)
            if c:
                out[name] = list(c)
        return out

    def clear_caches(self):
        for name in self.caches:
            getattr(self, name).clear()

    def __repr__(self):
        return f"<{type(self).__name__} {self.node_id}>"


# non-parameterized payload transforms ---------------------------------------


class _Activation(Node):
    caches = ("cache",)
    fn = grad = None

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.cache = {}

    def forward(self, port, msg):
        x = msg.payload
        if msg.train:
            _put(self.cache, self.key_fn(msg.state), x, self)
        return [("out", msg.with_payload(type(self).fn(x)))]

    def backward(self, port, msg):
        x = _pop(self.cache, self.key_fn(msg.state), self, msg.state)
        return [("in", msg.with_payload(type(self).grad(x, msg.payload)))]


class Relu(_Activation):
    kind = "relu"
    fn = T.relu
    grad = T.relu_grad


class Tanh(_Activation):
    kind = "tanh"
    fn = T.tanh
    grad = T.tanh_grad


class Sigmoid(_Activation):
    kind = "sigmoid"
    fn = T.sigmoid
    grad = T.sigmoid_grad


class SumRows(Node):
    """Sums the rows of the payload into one row."""

    kind = "sum_rows"
    caches = ("cache",)

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.cache = {}

    def forward(self, port, msg):
        if msg.train:
            _put(self.cache, self.key_fn(msg.state), msg.payload.shape[0], self)
        return [("out", msg.with_payload(T.sum_rows(msg.payload)))]

    def backward(self, port, msg):
        n = _pop(self.cache, self.key_fn(msg.state), self, msg.state)
        return [("in", msg.with_payload(T.tensor(np.repeat(msg.payload, n, axis=0), msg.payload.dtype)))]


class Transpose(Node):
    kind = "transpose"

    def forward(self, port, msg):
        return [("out", msg.with_payload(T.transpose(msg.payload)))]

    def backward(self, port, msg):
        return [("in", msg.with_payload(T.transpose(msg.payload)))]


# parameterized payload transforms ------------------------------------------


class Ppt(Node):
    """Base for nodes owning a :class:`ParamBlock`."""

    caches = ("cache",)

    def __init__(self, node_id, spec, optimizer, seed=0, min_update_frequency=1):
        super().__init__(node_id, spec)
        self.cache = {}
        self.staleness = StalenessTracker()
        rng = node_rng(seed, spec.get("replica_of", node_id))
        self.block = ParamBlock(node_id, self.init_weights(rng), optimizer, min_update_frequency)
        self.last_update = None

    def init_weights(self, rng):
        raise NotImplementedError

    def _stash(self, msg, value):
        if msg.train:
            _put(self.cache, self.key_fn(msg.state), (value, self.block.update_counter), self)

    def _unstash(self, msg):
        value, counter = _pop(self.cache, self.key_fn(msg.state), self, msg.state)
        self.staleness.record(counter, self.block.update_counter)
        return value

    def _accumulate(self, grads):
        ev = self.block.accumulate(grads)
        if ev is not None:
            self.last_update = ev
        return ev


class Linear(Ppt):
    kind = "linear"

    def init_weights(self, rng):
        n_in, n_out = int(self.spec["in"]), int(self.spec["out"])
        w = glorot(rng, n_in, n_out)
        # optional scaled identity on a square sub-block (recurrent weights)
        off = self.spec.get("identity_offset")
        if off is not None:
            off = int(off)
            if off < 0 or off + n_out > n_in:
                raise NodeError(f"{self.node_id}: identity block at row {off} does not fit a {n_in}x{n_out} weight")
            w[off:off + n_out] = np.eye(n_out) * float(self.spec.get("identity_scale", 1.0))
        return {"w": w, "b": np.zeros((1, n_out), dtype=T.default_dtype())}

    def forward(self, port, msg):
        w = self.block.weights
        self._stash(msg, msg.payload)
        return [("out", msg.with_payload(T.linear(msg.payload, w["w"], w["b"])))]

    def backward(self, port, msg):
        x = self._unstash(msg)
        dx, dw, db = T.linear_grads(x, self.block.weights["w"], msg.payload)
        self._accumulate({"w": dw, "b": db})
        return [("in", msg.with_payload(dx))]


class Embedding(Ppt):
    """Lookup table; the payload is a column of integer token ids."""

    kind = "embedding"

    def init_weights(self, rng):
        v, d = int(self.spec["vocab"]), int(self.spec["dim"])
        scale = float(self.spec.get("init_scale", 0.1))
        return {"table": (rng.standard_normal((v, d)) * scale).astype(T.default_dtype())}

    def forward(self, port, msg):
        ids = msg.payload[:, 0].astype(np.int64)
        table = self.block.weights["table"]
        if ids.min() < 0 or ids.max() >= table.shape[0]:
            raise NodeError(f"{self.node_id}: token id out of range [0, {table.shape[0]}): {ids.tolist()}")
        self._stash(msg, ids)
        return [("out", msg.with_payload(T.tensor(table[ids], table.dtype)))]

    def backward(self, port, msg):
        ids = self._unstash(msg)
        g = np.zeros_like(self.block.weights["table"])
        np.add.at(g, ids, msg.payload)
        self._accumulate({"table": g})
        return [("in", msg.with_payload(T.zeros(len(ids), 1, g.dtype)))]


class GRU(Ppt):
    """Gated recurrent cell on a payload ``[a, h]`` of width ``input + hidden``."""

    kind = "gru"

    def init_weights(self, rng):
        i, h = int(self.spec["input"]), int(self.spec["hidden"])
        dt = T.default_dtype()
        w = {}
        for gate in ("z", "r", "h"):
            w["w" + gate] = glorot(rng, i + h, h)
            w["b" + gate] = np.zeros((1, h), dtype=dt)
        return w

    def _split(self, x):
        i = int(self.spec["input"])
        return x[:, :i], x[:, i:]

    def forward(self, port, msg):
        w = self.block.weights
        x = msg.payload
        a, h = self._split(x)
        z = T.sigmoid(T.linear(x, w["wz"], w["bz"]))
        r = T.sigmoid(T.linear(x, w["wr"], w["br"]))
        xr = T.hcat([a, T.mul(r, h)])
        hc = T.tanh(T.linear(xr, w["wh"], w["bh"]))
        out = T.tensor((1 - z) * h + z * hc, x.dtype)
        self._stash(msg, (x, z, r, xr, hc))
        return [("out", msg.with_payload(out))]

    def backward(self, port, msg):
        x, z, r, xr, hc = self._unstash(msg)
        w = self.block.weights
        g = msg.payload
        a, h = self._split(x)
        i = a.shape[1]
        dhc_pre = g * z * (1 - hc * hc)
        dxr, dwh, dbh = T.linear_grads(xr, w["wh"], T.tensor(dhc_pre, g.dtype))
        drh = dxr[:, i:]
        dz_pre = g * (hc - h) * z * (1 - z)
        dr_pre = drh * h * r * (1 - r)
        dx_z, dwz, dbz = T.linear_grads(x, w["wz"], T.tensor(dz_pre, g.dtype))
        dx_r, dwr, dbr = T.linear_grads(x, w["wr"], T.tensor(dr_pre, g.dtype))
        dx = dx_z + dx_r
        dx[:, :i] += dxr[:, :i]
        dx[:, i:] += g * (1 - z) + drh * r
        self._accumulate({"wz": dwz, "bz": dbz, "wr": dwr, "br": dbr, "wh": dwh, "bh": dbh})
        return [("in", msg.with_payload(T.tensor(dx, g.dtype)))]


# control flow ---------------------------------------------------------------


class Cond(Node):
    kind = "cond"

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.ports = set(spec["ports"])
        self.predicate = statefns.make_predicate(spec["predicate"])
        self.routed = {p: 0 for p in spec["ports"]}

    def forward(self, port, msg):
        out = self.predicate(msg.state)
        if out not in self.ports:
            raise NodeError(f"{self.node_id}: predicate returned unknown port {out!r} for {msg.state!r}")
        self.routed[out] += 1
        return [(out, msg)]

    def backward(self, port, msg):
        return [("in", msg)]


class Phi(Node):
    kind = "phi"
    caches = ("origin",)

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.origin = {}

    def forward(self, port, msg):
        if msg.train:
            _put(self.origin, self.key_fn(msg.state), port, self)
        return [("out", msg)]

    def backward(self, port, msg):
        return [(_pop(self.origin, self.key_fn(msg.state), self, msg.state), msg)]


class Isu(Node):
    kind = "isu"

    def __init__(self, node_id, spec, debug=False):
        super().__init__(node_id, spec)
        self.f, self.f_inv = statefns.make_update(spec["update"])
        self.debug = debug
        self.calls = {"fwd": 0, "bwd": 0}

    def forward(self, port, msg):
        self.calls["fwd"] += 1
        s = self.f(msg.state)
        if self.debug and self.f_inv(s) != msg.state:
            raise NodeError(f"{self.node_id}: f_inv(f({msg.state!r})) = {self.f_inv(s)!r}")
        return [("out", msg.with_state(s))]

    def backward(self, port, msg):
        self.calls["bwd"] += 1
        return [("in", msg.with_state(self.f_inv(msg.state)))]


# aggregation -------------------------------------------------------------------


class Concat(Node):
    """Joins one message per input port (same join key) by column concatenation."""

    kind = "concat"
    caches = ("pending", "cache")

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.inputs = list(spec["inputs"])
        self.state_from = spec.get("state_from", self.inputs[0])
        self.pending = {}
        self.cache = {}

    def forward(self, port, msg):
        key = self.key_fn(msg.state)
        slot = self.pending.setdefault(key, {})
        if port in slot:
            raise DuplicateKeyError(f"{self.node_id}: second message on port {port!r} for key {key}")
        slot[port] = msg
        if len(slot) < len(self.inputs):
            return []
        del self.pending[key]
        parts = [slot[p] for p in self.inputs]
        out_state = slot[self.state_from].state
        if msg.train:
            _put(self.cache, self.key_fn(out_state), [(p, m.state, m.payload.shape[1]) for p, m in zip(self.inputs, parts)], self)
        return [("out", Message(FORWARD, T.hcat([m.payload for m in parts]), out_state, msg.train))]

    def backward(self, port, msg):
        saved = _pop(self.cache, self.key_fn(msg.state), self, msg.state)
        grads = T.hsplit(msg.payload, [w for _, _, w in saved])
        return [(p, Message(BACKWARD, g, s)) for (p, s, _), g in zip(saved, grads)]


class _GradJoin(Node):
    """Shared backward join for Split/Bcast: waits for a gradient on every output port."""

    caches = ("cache",)

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.out_ports = list(spec["ports"])
        self.cache = {}

    def _open(self, msg):
        if msg.train:
            _put(self.cache, self.key_fn(msg.state), {}, self)

    def backward(self, port, msg):
        key = self.key_fn(msg.state)
        if key not in self.cache:
            raise ProtocolError(f"node {self.node_id!r}: backward for unknown key {key}")
        got = self.cache[key]
        if port in got:
            raise DuplicateKeyError(f"{self.node_id}: second gradient on port {port!r} for key {key}")
        got[port] = msg.payload
        if len(got) < len(self.out_ports):
            return []
        del self.cache[key]
        return [("in", msg.with_payload(self.combine([got[p] for p in self.out_ports])))]


class Split(_GradJoin):
    kind = "split"

    def forward(self, port, msg):
        self._open(msg)
        parts = T.hsplit(msg.payload, [int(s) for s in self.spec["sizes"]])
        return [(p, msg.with_payload(x)) for p, x in zip(self.out_ports, parts)]

    def combine(self, grads):
        return T.hcat(grads)


class Bcast(_GradJoin):
    kind = "bcast"

    def forward(self, port, msg):
        self._open(msg)
        return [(p, msg) for p in self.out_ports]

    def combine(self, grads):
        total = grads[0]
        for g in grads[1:]:
            total = T.add(total, g)
        return total


class Group(Node):
    """Collects a known number of messages into one, keyed on the merged state.

    ``layout`` is ``rows`` (stack), ``cols`` (concatenate) or ``scatter``
    (row ``i`` of an all-zero matrix receives the member whose ``scatter``
    field is ``i``).
    """

    kind = "group"
    caches = ("pending", "cache")

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.merge = statefns.make_merge(spec["merge"])
        self.count = statefns.make_count(spec["count"])
        self.order = list(spec.get("order", []))
        self.layout = spec.get("layout", "rows")
        if self.layout == "scatter":
            self.scatter_field = spec["scatter"]
            self.height = statefns.make_count(spec["height"])
        self.pending = {}
        self.cache = {}

    def _sort_key(self, m):
        return tuple(m.state.get(f) for f in self.order) + m.state.values

    def forward(self, port, msg):
        merged = self.merge(msg.state)
        members = self.pending.setdefault(merged, [])
        members.append(msg)
        expected = self.count(merged)
        if len(members) < expected:
            return []
        if len(members) > expected:
            raise NodeError(f"{self.node_id}: {len(members)} members for {merged!r}, expected {expected}")
        del self.pending[merged]
        members.sort(key=self._sort_key)
        payloads = [m.payload for m in members]
        if self.layout == "rows":
            out = T.vcat(payloads)
            shape = [p.shape[0] for p in payloads]
        elif self.layout == "cols":
            out = T.hcat(payloads)
            shape = [p.shape[1] for p in payloads]
        else:
            height = self.height(merged)
            rows = [m.state.get(self.scatter_field) for m in members]
            buf = np.zeros((height, payloads[0].shape[1]), dtype=payloads[0].dtype)
            for r, p in zip(rows, payloads):
                buf[r] = p[0]
            out = T.tensor(buf, buf.dtype)
            shape = rows
        if msg.train:
            _put(self.cache, merged, ([m.state for m in members], shape), self)
        return [("out", Message(FORWARD, out, merged, msg.train))]

    def backward(self, port, msg):
        states, shape = _pop(self.cache, msg.state, self, msg.state)
        g = msg.payload
        if self.layout == "rows":
            parts = T.vsplit(g, shape)
        elif self.layout == "cols":
            parts = T.hsplit(g, shape)
        else:
            parts = [T.tensor(g[r:r + 1], g.dtype) for r in shape]
        return [("in", Message(BACKWARD, p, s)) for s, p in zip(states, parts)]

    def incomplete(self):
        return {repr(k): len(v) for k, v in self.pending.items()}


class _FanOut(Node):
    """Emits several messages per input; backward collects one gradient per output."""

    caches = ("cache", "collect")

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.cache = {}
        self.collect = {}
        self._seq = itertools.count()

    def _fan_out(self, msg, states, payloads):
        if msg.train:
            in_key = next(self._seq)
            if not states:
                return [("in", Message(BACKWARD, self.empty_grad(msg.payload), msg.state))]
            self.collect[in_key] = [msg.state, [None] * len(states), len(states), msg.payload.shape]
            for i, s in enumerate(states):
                _put(self.cache, self.key_fn(s), (in_key, i), self)
        return [("out", Message(FORWARD, p, s, msg.train)) for s, p in zip(states, payloads)]

    def backward(self, port, msg):
        in_key, i = _pop(self.cache, self.key_fn(msg.state), self, msg.state)
        entry = self.collect[in_key]
        entry[1][i] = msg.payload
        entry[2] -= 1
        if entry[2]:
            return []
        del self.collect[in_key]
        return [("in", Message(BACKWARD, self.combine(entry[1], entry[3]), entry[0]))]


class Flatmap(_FanOut):
    kind = "flatmap"

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.generate = statefns.make_expand(spec["generate"])

    def forward(self, port, msg):
        states = self.generate(msg.state)
        return self._fan_out(msg, states, [msg.payload] * len(states))

    def empty_grad(self, payload):
        return T.zeros(*payload.shape, payload.dtype)

    def combine(self, grads, shape):
        total = grads[0]
        for g in grads[1:]:
            total = T.add(total, g)
        return total


class Ungroup(_FanOut):
    """Splits the payload rows among member states derived from the incoming state."""

    kind = "ungroup"

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.members = statefns.make_expand(spec["members"])

    def forward(self, port, msg):
        states = self.members(msg.state)
        if len(states) != msg.payload.shape[0]:
            raise NodeError(f"{self.node_id}: {len(states)} members but payload has {msg.payload.shape[0]} rows")
        rows = T.vsplit(msg.payload, [1] * len(states))
        return self._fan_out(msg, states, rows)

    def empty_grad(self, payload):
        return T.zeros(*payload.shape, payload.dtype)

    def combine(self, grads, shape):
        return T.vcat(grads)


# loss -----------------------------------------------------------------------


class Loss(Node):
    """Pairs predictions with controller-pumped labels and starts backprop.

    ``softmax_ce`` takes integer class labels (one per prediction row);
    ``squared_error`` takes a target of the prediction's shape.
    """

    kind = "loss"
    caches = ("pending",)

    def __init__(self, node_id, spec):
        super().__init__(node_id, spec)
        self.loss_kind = spec.get("loss", "softmax_ce")
        if self.loss_kind not in ("softmax_ce", "squared_error"):
            raise NodeError(f"{node_id}: unknown loss {self.loss_kind!r}")
        self.pending = {}
        self.records = []

    def forward(self, port, msg):
        key = self.key_fn(msg.state)
        slot = self.pending.setdefault(key, {})
        if port in slot:
            what = "label" if port == "label" else "prediction"
            raise DuplicateKeyError(f"{self.node_id}: {what} arrived twice for key {key}")
        slot[port] = msg
        if len(slot) < 2:
            return []
        del self.pending[key]
        pred, label = slot["pred"], slot["label"]
        loss, grad, correct, rows = self.evaluate(pred.payload, label.payload)
        self.records.append((pred.state.instance_id, loss, correct, rows, pred.train))
        ack = ("label", Message(BACKWARD, T.zeros(label.payload.shape[0], 0, label.payload.dtype), label.state, pred.train))
        if not pred.train:
            return [ack]
        return [("pred", Message(BACKWARD, grad, pred.state, pred.train)), ack]

    def evaluate(self, z, y):
        """Returns ``(loss, dloss/dz, correct count, rows)``."""
        if self.loss_kind == "softmax_ce":
            labels = y[:, 0].astype(np.int64)
            if labels.shape[0] != z.shape[0]:
                raise T.ShapeError(f"{self.node_id}: {z.shape[0]} prediction rows vs {labels.shape[0]} labels")
            rows = np.arange(z.shape[0])
            logp = T.log_softmax_rows(z)
            loss = float(-logp[rows, labels].sum())
            g = np.exp(logp)
            g[rows, labels] -= 1
            correct = int((z.argmax(axis=1) == labels).sum())
            return loss, T.tensor(g, z.dtype), correct, z.shape[0]
        if y.shape != z.shape:
            raise T.ShapeError(f"{self.node_id}: prediction {z.shape} vs target {y.shape}")
        d = z - y
        loss = float((d * d).sum())
        correct = int(np.all(np.abs(d) < 0.5))
        return loss, T.tensor(2 * d, z.dtype), correct, 1

    def backward(self, port, msg):
        raise ProtocolError(f"{self.node_id}: loss nodes have no successors")


NODE_TYPES = {
    cls.kind: cls
    for cls in (
        Relu, Tanh, Sigmoid, SumRows, Transpose, Linear, Embedding, GRU, Cond, Phi, Isu,
        Concat, Split, Bcast, Group, Flatmap, Ungroup, Loss,
    )
}


def make_node(node_id, spec, optimizer=None, seed=0, min_update_frequency=1, debug=False):
    cls = NODE_TYPES[spec["kind"]]
    if issubclass(cls, Ppt):
        return cls(node_id, spec, optimizer, seed=seed, min_update_frequency=min_update_frequency)
    if cls is Isu:
        return cls(node_id, spec, debug=debug)
    return cls(node_id, spec)
