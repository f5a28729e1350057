"""Messages, states, keying functions and the static graph.

A graph is described by a plain dict (or JSON document)::

    {
      "nodes": {"lin": {"kind": "linear", "in": 4, "out": 2, "key": ["instance_id"]}, ...},
      "edges": [["controller:x", "lin:in"], ["lin:out", "loss:pred"], ...],
      "controller": {"entries": ["x", "label"]}
    }

Edges join an output port to an input port. Every port is connected exactly
once; fan-out goes through ``bcast`` nodes and fan-in through ``phi`` or
``concat`` nodes, which keeps backward routing a table lookup.
"""
import copy
import enum
import hashlib
import json
import operator
from collections import defaultdict, deque
from dataclasses import dataclass, field

from . import statefns

CONTROLLER = "controller"


class GraphValidationError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid graph:\n  " + "\n  ".join(self.errors))


class StateFieldError(KeyError):
    pass


class DuplicateKeyError(RuntimeError):
    """Two in-flight messages projected to the same cache key at one node."""


class ProtocolError(RuntimeError):
    """A backward message arrived for a key the node never saw going forward."""


class State:
    """Instance id, ordered integer fields and an optional read-only aux handle.

    Equality and hashing cover the id and the fields; the aux handle rides
    along untouched.
    """

    __slots__ = ("instance_id", "names", "values", "aux", "_hash")

    def __init__(self, instance_id, fields=(), aux=None):
        if isinstance(fields, dict):
            fields = fields.items()
        names, values = [], []
        for name, value in fields:
            if name == "instance_id":
                raise ValueError("'instance_id' is reserved")
            names.append(name)
            values.append(int(value))
        self.instance_id = int(instance_id)
        self.names = tuple(names)
        self.values = tuple(values)
        self.aux = aux
        self._hash = None

    @classmethod
    def _raw(cls, instance_id, names, values, aux):
        s = cls.__new__(cls)
        s.instance_id, s.names, s.values, s.aux, s._hash = instance_id, names, values, aux, None
        return s

    def get(self, name):
        if name == "instance_id":
            return self.instance_id
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise StateFieldError(f"state {self!r} has no field {name!r}") from None

    def has(self, name):
        return name == "instance_id" or name in self.names

    def replace(self, **updates):
        """Copy with fields overwritten; unknown names are appended."""
        names, values = list(self.names), list(self.values)
        for k, v in updates.items():
            if k in names:
                values[names.index(k)] = int(v)
            else:
                names.append(k)
                values.append(int(v))
        return State._raw(self.instance_id, tuple(names), tuple(values), self.aux)

    def drop(self, *drop):
        keep = [(n, v) for n, v in zip(self.names, self.values) if n not in drop]
        return State._raw(self.instance_id, tuple(n for n, _ in keep), tuple(v for _, v in keep), self.aux)

    def project(self, names):
        return State._raw(
            self.instance_id, tuple(names), tuple(self.get(n) for n in names), self.aux
        )

    def as_dict(self):
        d = {"instance_id": self.instance_id}
        d.update(zip(self.names, self.values))
        return d

    def __eq__(self, other):
        return (
            isinstance(other, State)
            and self.instance_id == other.instance_id
            and self.names == other.names
            and self.values == other.values
        )

    def __hash__(self):
        h = self._hash
        if h is None:
            h = self._hash = hash((self.instance_id, self.names, self.values))
        return h

    def __repr__(self):
        inner = ", ".join(f"{n}={v}" for n, v in zip(self.names, self.values))
        return f"State({self.instance_id}{', ' if inner else ''}{inner})"


class KeyFn:
    """Projection of a state onto a tuple of named fields."""

    __slots__ = ("fields", "_plans")

    def __init__(self, fields):
        self.fields = tuple(fields)
        self._plans = {}

    def _plan(self, state):
        idx = []
        for f in self.fields:
            if f == "instance_id":
                idx.append(0)
            elif f in state.names:
                idx.append(1 + state.names.index(f))
            else:
                state.get(f)  # raises StateFieldError
        get = operator.itemgetter(*idx)
        plan = get if len(idx) > 1 else (lambda row: (get(row),))
        self._plans[state.names] = plan
        return plan

    def __call__(self, state):
        plan = self._plans.get(state.names) or self._plan(state)
        return plan((state.instance_id,) + state.values)

    def __repr__(self):
        return f"KeyFn({', '.join(self.fields)})"


class Direction(enum.Enum):
    FORWARD = "fwd"
    BACKWARD = "bwd"


FORWARD = Direction.FORWARD
BACKWARD = Direction.BACKWARD


class Message:
    __slots__ = ("direction", "payload", "state", "train")

    def __init__(self, direction, payload, state, train=True):
        self.direction = direction
        self.payload = payload
        self.state = state
        self.train = train

    def with_payload(self, payload, direction=None):
        return Message(direction or self.direction, payload, self.state, self.train)

    def with_state(self, state):
        return Message(self.direction, self.payload, state, self.train)

    def __repr__(self):
        shape = getattr(self.payload, "shape", None)
        return f"Message({self.direction.value}, {shape}, {self.state!r}, train={self.train})"


def key_of(node, state):
    """Cache key of ``state`` under ``node``'s keying function."""
    if getattr(node, "key_fn", None) is None:
        raise TypeError(f"node {getattr(node, 'node_id', node)!r} has no keying function")
    return node.key_fn(state)


# graph ---------------------------------------------------------------------


def _ports(kind, cfg):
    """(input ports, output ports) of a node kind. Unknown kinds raise KeyError."""
    one = (["in"], ["out"])
    table = {
        "linear": one,
        "embedding": one,
        "gru": one,
        "relu": one,
        "tanh": one,
        "sigmoid": one,
        "sum_rows": one,
        "transpose": one,
        "isu": one,
        "group": one,
        "ungroup": one,
        "flatmap": one,
        "cond": (["in"], list(cfg.get("ports", []))),
        "phi": (list(cfg.get("inputs", [])), ["out"]),
        "concat": (list(cfg.get("inputs", [])), ["out"]),
        "split": (["in"], list(cfg.get("ports", []))),
        "bcast": (["in"], list(cfg.get("ports", []))),
        "loss": (["pred", "label"], []),
    }
    return table[kind]


PPT_KINDS = frozenset({"linear", "embedding", "gru"})
MIN_PORTS = {"cond": ("out", 1), "phi": ("in", 1), "concat": ("in", 2), "split": ("out", 2), "bcast": ("out", 2)}


@dataclass(frozen=True)
class Edge:
    src: str
    src_port: str
    dst: str
    dst_port: str


def _parse_end(end):
    if isinstance(end, str):
        node, _, port = end.partition(":")
        return node, port
    return tuple(end)


@dataclass
class IrGraph:
    """Validated, immutable node/edge structure. Build with :func:`build_graph`."""

    nodes: dict
    edges: tuple
    entries: tuple
    fwd: dict = field(repr=False)
    bwd: dict = field(repr=False)
    order: tuple = ()
    replicas: dict = field(default_factory=dict)

    def ports(self, node_id):
        spec = self.nodes[node_id]
        return _ports(spec["kind"], spec)

    def ppt_nodes(self):
        return [n for n, s in self.nodes.items() if s["kind"] in PPT_KINDS]

    def successors(self, node_id):
        return [self.fwd[(node_id, p)][0] for p in self.ports(node_id)[1]]

    def predecessors(self, node_id):
        return [self.bwd[(node_id, p)][0] for p in self.ports(node_id)[0]]

    def topological_order(self):
        return list(self.order)

    def to_dict(self):
        return {
            "nodes": copy.deepcopy(self.nodes),
            "edges": [[f"{e.src}:{e.src_port}", f"{e.dst}:{e.dst_port}"] for e in self.edges],
            "controller": {"entries": list(self.entries)},
            **({"replicas": copy.deepcopy(self.replicas)} if self.replicas else {}),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def fingerprint(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _find_cycles_without(nodes, adj, removed):
    """True if the graph restricted to ``nodes - removed`` has a cycle."""
    keep = [n for n in nodes if n not in removed]
    indeg = {n: 0 for n in keep}
    for n in keep:
        for m in adj[n]:
            if m in indeg:
                indeg[m] += 1
    queue = deque(n for n, d in indeg.items() if d == 0)
    seen = 0
    while queue:
        n = queue.popleft()
        seen += 1
        for m in adj[n]:
            if m in indeg:
                indeg[m] -= 1
                if indeg[m] == 0:
                    queue.append(m)
    return seen != len(keep)


def build_graph(desc):
    """Validate a graph description and return an :class:`IrGraph`.

    Raises :class:`GraphValidationError` listing every problem found.
    """
    if isinstance(desc, IrGraph):
        return desc
    if isinstance(desc, str):
        desc = json.loads(desc)
    errors = []
    nodes = copy.deepcopy(dict(desc.get("nodes", {})))
    entries = tuple(desc.get("controller", {}).get("entries", []))
    if CONTROLLER in nodes:
        errors.append(f"'{CONTROLLER}' is reserved")
    if not entries:
        errors.append("controller declares no entry ports")

    ports = {CONTROLLER: ([], list(entries))}
    for nid, spec in nodes.items():
        kind = spec.get("kind")
        try:
            ins, outs = _ports(kind, spec)
        except KeyError:
            errors.append(f"node {nid!r}: unknown kind {kind!r}")
            continue
        ports[nid] = (ins, outs)
        if kind in MIN_PORTS:
            side, n = MIN_PORTS[kind]
            have = ins if side == "in" else outs
            if len(have) < n:
                errors.append(f"node {nid!r}: {kind} needs at least {n} {side}put ports, has {len(have)}")
            if len(set(have)) != len(have):
                errors.append(f"node {nid!r}: duplicate port names {have}")
        if kind == "cond":
            try:
                codomain = statefns.predicate_ports(spec.get("predicate", {}))
            except (statefns.StateFnError, KeyError) as exc:
                errors.append(f"node {nid!r}: bad predicate: {exc}")
            else:
                if codomain - set(outs):
                    errors.append(f"node {nid!r}: predicate can route to {sorted(codomain - set(outs))} which are not declared ports")
        if kind in ("split",) and len(spec.get("sizes", [])) != len(outs):
            errors.append(f"node {nid!r}: split has {len(outs)} ports but {len(spec.get('sizes', []))} sizes")
        if kind in PPT_KINDS | {"phi", "concat", "relu", "tanh", "sigmoid", "sum_rows", "loss", "bcast", "split", "flatmap", "ungroup"}:
            if not spec.get("key"):
                errors.append(f"node {nid!r}: {kind} requires a keying function ('key')")

    edges, fwd, bwd = [], {}, {}
    for raw in desc.get("edges", []):
        try:
            (s, sp), (d, dp) = _parse_end(raw[0]), _parse_end(raw[1])
        except (TypeError, ValueError, IndexError):
            errors.append(f"malformed edge {raw!r}")
            continue
        ok = True
        if s not in ports:
            errors.append(f"edge {raw!r}: unknown source node {s!r}")
            ok = False
        elif sp not in ports[s][1]:
            errors.append(f"edge {raw!r}: {s!r} has no output port {sp!r} (has {ports[s][1]})")
            ok = False
        if d not in ports:
            errors.append(f"edge {raw!r}: unknown destination node {d!r}")
            ok = False
        elif d == CONTROLLER or dp not in ports[d][0]:
            errors.append(f"edge {raw!r}: {d!r} has no input port {dp!r}")
            ok = False
        if not ok:
            continue
        if (s, sp) in fwd:
            errors.append(f"output port {s}:{sp} connected more than once (use a bcast node)")
            continue
        if (d, dp) in bwd:
            errors.append(f"input port {d}:{dp} connected more than once (use a phi or concat node)")
            continue
        fwd[(s, sp)] = (d, dp)
        bwd[(d, dp)] = (s, sp)
        edges.append(Edge(s, sp, d, dp))

    for nid, (ins, outs) in ports.items():
        for p in ins:
            if (nid, p) not in bwd:
                errors.append(f"dangling input port {nid}:{p}")
        for p in outs:
            if (nid, p) not in fwd:
                errors.append(f"dangling output port {nid}:{p}")

    adj = defaultdict(list)
    for e in edges:
        adj[e.src].append(e.dst)
    reach, stack = {CONTROLLER}, [CONTROLLER]
    while stack:
        for m in adj[stack.pop()]:
            if m not in reach:
                reach.add(m)
                stack.append(m)
    losses = [n for n, s in nodes.items() if s.get("kind") == "loss"]
    if not losses:
        errors.append("graph has no loss node")
    for n in nodes:
        if n not in reach:
            errors.append(f"node {n!r} unreachable from the controller" + (" (loss node)" if n in losses else ""))

    all_nodes = list(ports)
    phis = {n for n, s in nodes.items() if s.get("kind") == "phi"}
    isus = {n for n, s in nodes.items() if s.get("kind") == "isu"}
    if _find_cycles_without(all_nodes, adj, phis):
        errors.append("cycle that does not pass through a phi loop header")
    elif _find_cycles_without(all_nodes, adj, isus):
        errors.append("cycle without an isu state update (keys would repeat every iteration)")

    replicas = {str(k): list(v) for k, v in desc.get("replicas", {}).items()}
    for name, members in replicas.items():
        kinds = {nodes.get(m, {}).get("kind") for m in members}
        if any(m not in nodes for m in members):
            errors.append(f"replica group {name!r} names unknown nodes {members}")
        elif len(kinds) != 1 or not kinds <= PPT_KINDS:
            errors.append(f"replica group {name!r} must contain parameterized nodes of one kind, got {sorted(map(str, kinds))}")

    if errors:
        raise GraphValidationError(errors)

    # order ignoring loop back-edges, i.e. edges into a phi from a node the phi reaches
    def reaches(a, b):
        seen, st = {a}, [a]
        while st:
            x = st.pop()
            if x == b:
                return True
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    st.append(y)
        return False

    dag = defaultdict(list)
    for e in edges:
        if e.dst in phis and reaches(e.dst, e.src):
            continue
        dag[e.src].append(e.dst)
    indeg = {n: 0 for n in all_nodes}
    for n in all_nodes:
        for m in dag[n]:
            indeg[m] += 1
    queue = deque(n for n in all_nodes if indeg[n] == 0)
    order = []
    while queue:
        n = queue.popleft()
        order.append(n)
        for m in dag[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                queue.append(m)
    order = tuple(n for n in order if n != CONTROLLER)
    return IrGraph(nodes=nodes, edges=tuple(edges), entries=entries, fwd=fwd, bwd=bwd, order=order, replicas=replicas)


def load_graph(path):
    with open(path) as f:
        return build_graph(json.load(f))
