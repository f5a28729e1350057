"""Graph builders for the four model families, with their controller pump plans.

A :class:`Model` bundles a validated graph with ``pump(instance, iid, train)``,
which lists the ``(entry port, payload, state)`` triples the controller sends
for one instance.
"""
import copy
from dataclasses import dataclass, field

import numpy as np

from . import data
from . import tensor as T
from .ir import CONTROLLER, PPT_KINDS, State, build_graph


@dataclass
class ModelSpec:
    family: str
    hidden: int = 128
    embed: int = 32
    classes: int = 10
    vocab: int = data.LIST_VOCAB
    steps: int = 2
    edge_types: int = len(data.EDGE_TYPES)
    input_dim: int = 784
    mlp_hidden: int = 784
    identity_init: float = 0.0

    def __post_init__(self):
        self.family = self.family.lower()
        if self.family not in BUILDERS:
            raise ValueError(f"unknown model family {self.family!r}; choose from {sorted(BUILDERS)}")
        for name in ("hidden", "embed", "classes", "vocab", "steps", "edge_types", "input_dim", "mlp_hidden"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Model:
    spec: ModelSpec
    graph: object
    pump: object = field(repr=False)
    label_entries: tuple = ("label",)
    heavy: tuple = ()


def _ids(tokens):
    return T.tensor(np.asarray(tokens, dtype=np.float64).reshape(-1, 1))


def _e(src, dst):
    return [src, dst]


# MLP --------------------------------------------------------------------------


def mlp_graph(input_dim, hidden, classes, layers=4):
    nodes, edges = {}, []
    prev = f"{CONTROLLER}:x"
    dims = [input_dim] + [hidden] * (layers - 1) + [classes]
    for i in range(layers):
        nodes[f"linear{i + 1}"] = {"kind": "linear", "in": dims[i], "out": dims[i + 1], "key": ["instance_id"]}
        edges.append(_e(prev, f"linear{i + 1}:in"))
        prev = f"linear{i + 1}:out"
        if i < layers - 1:
            nodes[f"relu{i + 1}"] = {"kind": "relu", "key": ["instance_id"]}
            edges.append(_e(prev, f"relu{i + 1}:in"))
            prev = f"relu{i + 1}:out"
    nodes["loss"] = {"kind": "loss", "loss": "softmax_ce", "key": ["instance_id"]}
    edges += [_e(prev, "loss:pred"), _e(f"{CONTROLLER}:label", "loss:label")]
    return {"nodes": nodes, "edges": edges, "controller": {"entries": ["x", "label"]}}


def mlp_pump(inst, iid, train):
    s = State(iid)
    return [("x", T.tensor(inst.x), s), ("label", T.tensor([[inst.label]]), s)]


def build_mlp(spec):
    g = build_graph(mlp_graph(spec.input_dim, spec.mlp_hidden, spec.classes))
    return Model(spec, g, mlp_pump, heavy=("linear1", "linear2", "linear3"))


# RNN --------------------------------------------------------------------------


def rnn_graph(vocab, embed, hidden, classes, identity_init=0.0):
    """Variable-length RNN: tokens and the initial hidden state come from the controller."""
    step = ["instance_id", "t"]
    lin1 = {"kind": "linear", "in": embed + hidden, "out": hidden, "key": step}
    if identity_init:
        lin1.update(identity_offset=embed, identity_scale=float(identity_init))
    nodes = {
        "lookup": {"kind": "embedding", "vocab": vocab, "dim": embed, "key": step},
        "phi": {"kind": "phi", "inputs": ["init", "loop"], "key": step},
        "concat": {"kind": "concat", "inputs": ["x", "h"], "state_from": "h", "key": step},
        "linear1": lin1,
        "relu": {"kind": "relu", "key": step},
        "isu": {"kind": "isu", "update": {"fn": "increment", "field": "t", "by": 1}},
        "cond": {
            "kind": "cond",
            "ports": ["loop", "exit"],
            "predicate": {"fn": "less_than", "field": "t", "bound": "len", "true": "loop", "false": "exit"},
        },
        "linear2": {"kind": "linear", "in": hidden, "out": classes, "key": ["instance_id"]},
        "loss": {"kind": "loss", "loss": "softmax_ce", "key": ["instance_id"]},
    }
    edges = [
        _e("controller:tokens", "lookup:in"),
        _e("controller:h0", "phi:init"),
        _e("lookup:out", "concat:x"),
        _e("phi:out", "concat:h"),
        _e("concat:out", "linear1:in"),
        _e("linear1:out", "relu:in"),
        _e("relu:out", "isu:in"),
        _e("isu:out", "cond:in"),
        _e("cond:loop", "phi:loop"),
        _e("cond:exit", "linear2:in"),
        _e("linear2:out", "loss:pred"),
        _e("controller:label", "loss:label"),
    ]
    return {"nodes": nodes, "edges": edges, "controller": {"entries": ["tokens", "h0", "label"]}}


def make_rnn_pump(hidden):
    def pump(inst, iid, train):
        toks = inst.tokens
        n = len(toks)
        sends = [("h0", T.zeros(1, hidden), State(iid, {"t": 0, "len": n}))]
        sends += [("tokens", _ids([tok]), State(iid, {"t": t, "len": n})) for t, tok in enumerate(toks)]
        sends.append(("label", T.tensor([[inst.label]]), State(iid, {"t": n, "len": n})))
        return sends

    return pump


def build_rnn(spec):
    g = build_graph(rnn_graph(spec.vocab, spec.embed, spec.hidden, spec.classes, spec.identity_init))
    return Model(spec, g, make_rnn_pump(spec.hidden), heavy=("linear1",))


# Tree RNN ---------------------------------------------------------------------


def tree_graph(vocab, embed, hidden, classes):
    """Leaf and branch cells joined at a phi; siblings meet in a column Group."""
    node = ["instance_id", "node"]
    nodes = {
        "lookup": {"kind": "embedding", "vocab": vocab, "dim": embed, "key": node},
        "leaf": {"kind": "linear", "in": embed, "out": hidden, "key": node},
        "leaf_act": {"kind": "tanh", "key": node},
        "phi": {"kind": "phi", "inputs": ["leaf", "branch"], "key": node},
        "cond": {
            "kind": "cond",
            "ports": ["root", "up"],
            "predicate": {"fn": "aux_flag", "attr": "is_root", "index": ["node"], "true": "root", "false": "up"},
        },
        "isu": {"kind": "isu", "update": {"fn": "to_parent", "field": "node", "via": "from", "attr": "parent"}},
        "siblings": {
            "kind": "group",
            "merge": {"fn": "project", "fields": ["node"]},
            "count": {"fn": "const", "value": 2},
            "order": ["from"],
            "layout": "cols",
        },
        "branch": {"kind": "linear", "in": 2 * hidden, "out": hidden, "key": node},
        "branch_act": {"kind": "tanh", "key": node},
        "output": {"kind": "linear", "in": hidden, "out": classes, "key": ["instance_id"]},
        "loss": {"kind": "loss", "loss": "softmax_ce", "key": ["instance_id"]},
    }
    edges = [
        _e("controller:leaves", "lookup:in"),
        _e("lookup:out", "leaf:in"),
        _e("leaf:out", "leaf_act:in"),
        _e("leaf_act:out", "phi:leaf"),
        _e("phi:out", "cond:in"),
        _e("cond:up", "isu:in"),
        _e("isu:out", "siblings:in"),
        _e("siblings:out", "branch:in"),
        _e("branch:out", "branch_act:in"),
        _e("branch_act:out", "phi:branch"),
        _e("cond:root", "output:in"),
        _e("output:out", "loss:pred"),
        _e("controller:label", "loss:label"),
    ]
    return {"nodes": nodes, "edges": edges, "controller": {"entries": ["leaves", "label"]}}


def tree_aux(tree):
    n = len(tree)
    return {"parent": tree.parent, "is_root": [i == n - 1 for i in range(n)]}


def tree_pump(inst, iid, train):
    aux = tree_aux(inst)
    sends = [("leaves", _ids([inst.tokens[i]]), State(iid, {"node": i}, aux)) for i in inst.leaves]
    sends.append(("label", T.tensor([[inst.label]]), State(iid, {"node": inst.root}, aux)))
    return sends


def build_tree(spec):
    g = build_graph(tree_graph(spec.vocab, spec.embed, spec.hidden, spec.classes))
    return Model(spec, g, tree_pump, heavy=("leaf", "branch"))


# GGSNN ------------------------------------------------------------------------


def ggsnn_graph(vocab, hidden, edge_types, steps):
    """Gated graph network with per-edge-type propagation and a GRU update.

    Each step broadcasts the node states, fans them out per node and per
    outgoing edge, batches edges by type for the per-type linear maps,
    regroups messages by target node, sums them and scatters the sums back
    into an ``N x H`` matrix that enters the GRU alongside the old states.
    The readout scores every node and the loss is a softmax over nodes.
    """
    g = ["instance_id", "step"]
    types = [f"type{c}" for c in range(edge_types)]
    nodes = {
        "lookup": {"kind": "embedding", "vocab": vocab, "dim": hidden, "key": ["instance_id"]},
        "phi": {"kind": "phi", "inputs": ["init", "loop"], "key": g},
        "bcast": {"kind": "bcast", "ports": ["msg", "self"], "key": g},
        "per_node": {
            "kind": "ungroup",
            "members": {"fn": "range", "field": "node", "count": {"fn": "aux", "attr": "num_nodes"}},
            "key": g + ["node"],
        },
        "per_edge": {
            "kind": "flatmap",
            "generate": {"fn": "aux", "attr": "out_edges", "index": ["node"]},
            "key": g + ["edge"],
        },
        "by_type": {
            "kind": "group",
            "merge": {"fn": "project", "fields": ["step", "etype"]},
            "count": {"fn": "aux", "attr": "type_count", "index": ["etype"]},
            "order": ["node", "dst", "edge"],
            "layout": "rows",
        },
        "route_type": {
            "kind": "cond",
            "ports": types,
            "predicate": {"fn": "by_field", "field": "etype", "ports": types},
        },
        "join_type": {"kind": "phi", "inputs": types, "key": g + ["etype"]},
        "per_typed_edge": {
            "kind": "ungroup",
            "members": {"fn": "aux", "attr": "edges_of_type", "index": ["etype"]},
            "key": g + ["edge"],
        },
        "by_target": {
            "kind": "group",
            "merge": {"fn": "project", "fields": ["step", "dst"], "rename": {"dst": "node"}},
            "count": {"fn": "aux", "attr": "in_degree", "index": ["node"]},
            "order": ["node", "etype", "edge"],
            "layout": "rows",
        },
        "sum": {"kind": "sum_rows", "key": g + ["node"]},
        "scatter": {
            "kind": "group",
            "merge": {"fn": "project", "fields": ["step"]},
            "count": {"fn": "aux", "attr": "n_targets"},
            "layout": "scatter",
            "scatter": "node",
            "height": {"fn": "aux", "attr": "num_nodes"},
        },
        "concat": {"kind": "concat", "inputs": ["a", "h"], "state_from": "h", "key": g},
        "gru": {"kind": "gru", "input": hidden, "hidden": hidden, "key": g},
        "isu": {"kind": "isu", "update": {"fn": "increment", "field": "step", "by": 1}},
        "cond": {
            "kind": "cond",
            "ports": ["loop", "exit"],
            "predicate": {"fn": "less_than", "field": "step", "bound": steps, "true": "loop", "false": "exit"},
        },
        "readout": {"kind": "linear", "in": hidden, "out": 1, "key": ["instance_id"]},
        "transpose": {"kind": "transpose"},
        "loss": {"kind": "loss", "loss": "softmax_ce", "key": ["instance_id"]},
    }
    for c, t in enumerate(types):
        nodes[f"edge_linear{c}"] = {"kind": "linear", "in": hidden, "out": hidden, "key": g + ["etype"]}
    edges = [
        _e("controller:annotations", "lookup:in"),
        _e("lookup:out", "phi:init"),
        _e("phi:out", "bcast:in"),
        _e("bcast:msg", "per_node:in"),
        _e("per_node:out", "per_edge:in"),
        _e("per_edge:out", "by_type:in"),
        _e("by_type:out", "route_type:in"),
        _e("join_type:out", "per_typed_edge:in"),
        _e("per_typed_edge:out", "by_target:in"),
        _e("by_target:out", "sum:in"),
        _e("sum:out", "scatter:in"),
        _e("scatter:out", "concat:a"),
        _e("bcast:self", "concat:h"),
        _e("concat:out", "gru:in"),
        _e("gru:out", "isu:in"),
        _e("isu:out", "cond:in"),
        _e("cond:loop", "phi:loop"),
        _e("cond:exit", "readout:in"),
        _e("readout:out", "transpose:in"),
        _e("transpose:out", "loss:pred"),
        _e("controller:label", "loss:label"),
    ]
    for c, t in enumerate(types):
        edges += [_e(f"route_type:{t}", f"edge_linear{c}:in"), _e(f"edge_linear{c}:out", f"join_type:{t}")]
    return {"nodes": nodes, "edges": edges, "controller": {"entries": ["annotations", "label"]}}


def graph_aux(inst):
    """Structure lookups read by the GGSNN state functions."""
    n, C = inst.num_nodes, inst.num_edge_types
    if not inst.edges:
        raise ValueError("graph instances need at least one edge")
    out_edges = [[] for _ in range(n)]
    of_type = [[] for _ in range(C)]
    in_degree = [0] * n
    for e, (s, d, t) in enumerate(inst.edges):
        if not (0 <= s < n and 0 <= d < n and 0 <= t < C):
            raise ValueError(f"edge {e} = {(s, d, t)} out of range")
        out_edges[s].append({"edge": e, "etype": t, "dst": d})
        of_type[t].append({"node": s, "edge": e, "dst": d})
        in_degree[d] += 1
    # member order must match the row order the by_type group produces
    for lst in of_type:
        lst.sort(key=lambda m: (m["node"], m["dst"], m["edge"]))
    return {
        "num_nodes": n,
        "out_edges": out_edges,
        "type_count": [len(lst) for lst in of_type],
        "edges_of_type": of_type,
        "in_degree": in_degree,
        "n_targets": sum(1 for k in in_degree if k),
    }


def make_ggsnn_pump(steps):
    def pump(inst, iid, train):
        aux = graph_aux(inst)
        return [
            ("annotations", _ids(inst.annotations), State(iid, {"step": 0}, aux)),
            ("label", T.tensor([[inst.label]]), State(iid, {"step": steps}, aux)),
        ]

    return pump


def build_ggsnn(spec):
    g = build_graph(ggsnn_graph(spec.vocab, spec.hidden, spec.edge_types, spec.steps))
    heavy = ("gru",) + tuple(f"edge_linear{c}" for c in range(spec.edge_types))
    return Model(spec, g, make_ggsnn_pump(spec.steps), heavy=heavy)


BUILDERS = {"mlp": build_mlp, "rnn": build_rnn, "treernn": build_tree, "ggsnn": build_ggsnn}


def build_model(spec, replicas=None):
    """Build a model; ``replicas`` maps PPT node ids to replica counts."""
    if isinstance(spec, dict):
        spec = ModelSpec(**spec)
    model = BUILDERS[spec.family](spec)
    for node_id, k in (replicas or {}).items():
        model.graph = build_replicated(model.graph, node_id, int(k))
    return model


# replication ---------------------------------------------------------------------


def build_replicated(graph, node_id, k):
    """Replace PPT ``node_id`` with a key-mod Cond, ``k`` replicas and a Phi.

    Replica ``r`` receives the messages whose instance id is ``r`` mod ``k``
    and is initialised exactly like the original node.
    """
    graph = build_graph(graph)
    if node_id not in graph.nodes:
        raise ValueError(f"unknown node {node_id!r}")
    spec = graph.nodes[node_id]
    if spec["kind"] not in PPT_KINDS:
        raise ValueError(f"{node_id!r} is a {spec['kind']} node; only parameterized nodes can be replicated")
    if k < 1:
        raise ValueError("replica count must be >= 1")
    desc = graph.to_dict()
    nodes = desc["nodes"]
    del nodes[node_id]
    ports = [f"r{r}" for r in range(k)]
    names = [f"{node_id}_r{r}" for r in range(k)]
    origin = spec.get("replica_of", node_id)
    for name in names:
        nodes[name] = dict(copy.deepcopy(spec), replica_of=origin)
    key = list(spec["key"])
    nodes[f"{node_id}_split"] = {
        "kind": "cond",
        "ports": ports,
        "predicate": {"fn": "key_mod", "field": "instance_id", "ports": ports},
    }
    nodes[f"{node_id}_join"] = {"kind": "phi", "inputs": ports, "key": key}
    edges = []
    for src, dst in desc["edges"]:
        if dst == f"{node_id}:in":
            dst = f"{node_id}_split:in"
        if src == f"{node_id}:out":
            src = f"{node_id}_join:out"
        edges.append([src, dst])
    for p, name in zip(ports, names):
        edges += [[f"{node_id}_split:{p}", f"{name}:in"], [f"{name}:out", f"{node_id}_join:{p}"]]
    desc["edges"] = edges
    replicas = desc.setdefault("replicas", {})
    replicas.pop(node_id, None)
    replicas[node_id] = names
    return build_graph(desc)
