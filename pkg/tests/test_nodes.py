from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynflow import optim
from dynflow import tensor as T
from dynflow.ir import BACKWARD, FORWARD, DuplicateKeyError, Message, ProtocolError, State
from dynflow.nodes import NodeError, make_node
from oracles import central_diff

SGD0 = optim.SGD(lr=0.0)


def fwd(payload, state, train=True):
    return Message(FORWARD, T.tensor(payload), state, train)


def bwd(payload, state):
    return Message(BACKWARD, T.tensor(payload), state)


def linear(n_in, n_out, key=("instance_id",), muf=10**9):
    return make_node("lin", {"kind": "linear", "in": n_in, "out": n_out, "key": list(key)}, SGD0, min_update_frequency=muf)


# PPTs -----------------------------------------------------------------------------


def test_linear_identity_parameters():
    n = linear(3, 3)
    n.block.weights["w"][...] = np.eye(3)
    [(port, out)] = n.process("in", fwd([[1, 2, 3]], State(0)))
    assert port == "out" and out.payload.tolist() == [[1, 2, 3]]
    [(port, back)] = n.process("in", bwd([[4, 5, 6]], State(0)))
    assert port == "in" and back.payload.tolist() == [[4, 5, 6]]


def test_linear_sum_example():
    n = linear(2, 1)
    n.block.weights["w"][...] = [[1], [1]]
    assert n.process("in", fwd([[3, 4]], State(0)))[0][1].payload.tolist() == [[7]]


def test_linear_preserves_state():
    n = linear(2, 2)
    s = State(3, {"t": 2})
    assert n.process("in", fwd([[1, 1]], s))[0][1].state is s


def test_linear_weight_gradient_matches_finite_differences(rng):
    n = linear(4, 3)
    x, up = rng.standard_normal((1, 4)), rng.standard_normal((1, 3))
    w0 = n.block.weights["w"].copy()
    n.process("in", fwd(x, State(0)))
    n.process("in", bwd(up, State(0)))
    b = n.block.weights["b"]
    num = central_diff(lambda w: float(((x @ w + b) * up).sum()), w0)
    dw = n.block.grad_accum["w"]
    assert np.linalg.norm(dw - num) / np.linalg.norm(num) < 1e-6


def test_cache_entry_consumed_once():
    n = linear(2, 2)
    n.process("in", fwd([[1, 1]], State(5)))
    n.process("in", bwd([[1, 1]], State(5)))
    assert n.cache == {}
    with pytest.raises(ProtocolError, match="State\\(5\\)"):
        n.process("in", bwd([[1, 1]], State(5)))


def test_ppt_duplicate_forward_key():
    n = linear(2, 2)
    n.process("in", fwd([[1, 1]], State(5, {"t": 0})))
    with pytest.raises(DuplicateKeyError):
        n.process("in", fwd([[1, 1]], State(5, {"t": 1})))


def test_eval_mode_caches_nothing():
    n = linear(2, 2)
    n.process("in", fwd([[1, 1]], State(5), train=False))
    assert n.cache == {}


def test_embedding_returns_table_row():
    e = make_node("emb", {"kind": "embedding", "vocab": 8, "dim": 3, "key": ["instance_id"]}, SGD0, min_update_frequency=10)
    [(_, out)] = e.process("in", fwd([[5]], State(0)))
    assert np.array_equal(out.payload, e.block.weights["table"][5:6])
    e.process("in", bwd([[1, 2, 3]], State(0)))
    g = e.block.grad_accum["table"]
    assert g[5].tolist() == [1, 2, 3] and np.count_nonzero(g) == 3
    with pytest.raises(NodeError):
        e.process("in", fwd([[8]], State(1)))


def test_identity_init_block():
    n = make_node("l", {"kind": "linear", "in": 5, "out": 3, "key": ["instance_id"], "identity_offset": 2, "identity_scale": 0.5}, SGD0)
    assert np.array_equal(n.block.weights["w"][2:], 0.5 * np.eye(3))
    with pytest.raises(NodeError):
        make_node("l", {"kind": "linear", "in": 4, "out": 3, "key": ["instance_id"], "identity_offset": 2}, SGD0)


def test_gru_gradients(rng):
    g = make_node("gru", {"kind": "gru", "input": 2, "hidden": 3, "key": ["instance_id"]}, SGD0, min_update_frequency=10**9)
    x, up = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))

    def f(v):
        g2 = make_node("gru", {"kind": "gru", "input": 2, "hidden": 3, "key": ["instance_id"]}, SGD0)
        return float((np.asarray(g2.process("in", fwd(v, State(0), False))[0][1].payload) * up).sum())

    g.process("in", fwd(x, State(0)))
    [(_, back)] = g.process("in", bwd(up, State(0)))
    num = central_diff(f, x)
    assert np.linalg.norm(back.payload - num) / np.linalg.norm(num) < 1e-6


# control flow ------------------------------------------------------------------


def rnn_cond():
    return make_node("c", {"kind": "cond", "ports": ["loop", "exit"],
                           "predicate": {"fn": "less_than", "field": "t", "bound": "len", "true": "loop", "false": "exit"}})


def test_cond_rnn_predicate():
    c = rnn_cond()
    assert c.process("in", fwd([[0]], State(1, {"t": 2, "len": 5})))[0][0] == "loop"
    assert c.process("in", fwd([[0]], State(1, {"t": 5, "len": 5})))[0][0] == "exit"
    assert c.process("in", bwd([[0]], State(1, {"t": 5, "len": 5})))[0][0] == "in"


def test_cond_constant_predicate_counts():
    c = make_node("c", {"kind": "cond", "ports": ["a", "b"], "predicate": {"fn": "const", "port": "a"}})
    for i in range(100):
        c.process("in", fwd([[0]], State(i)))
    assert c.routed == {"a": 100, "b": 0}


def test_cond_unknown_port():
    c = make_node("c", {"kind": "cond", "ports": ["a"], "predicate": {"fn": "by_field", "field": "k", "ports": ["a", "zz"]}})
    with pytest.raises(NodeError):
        c.process("in", fwd([[0]], State(0, {"k": 1})))


def phi():
    return make_node("phi", {"kind": "phi", "inputs": ["init", "loop"], "key": ["instance_id", "t"]})


def test_phi_single_origin():
    p = phi()
    s = State(0, {"t": 0})
    p.process("init", fwd([[1]], s))
    assert p.process("out", bwd([[1]], s))[0][0] == "init"


def test_phi_interleaved_origins():
    p = phi()
    a, b = State(1, {"t": 3}), State(2, {"t": 0})
    p.process("loop", fwd([[1]], a))
    p.process("init", fwd([[1]], b))
    assert p.process("out", bwd([[1]], a))[0][0] == "loop"
    assert p.process("out", bwd([[1]], b))[0][0] == "init"
    assert p.origin == {}


def test_phi_duplicate_and_unknown():
    p = phi()
    s = State(0, {"t": 0})
    p.process("init", fwd([[1]], s))
    with pytest.raises(DuplicateKeyError):
        p.process("loop", fwd([[1]], s))
    with pytest.raises(ProtocolError):
        p.process("out", bwd([[1]], State(9, {"t": 0})))


def test_isu_increment_and_inverse():
    i = make_node("isu", {"kind": "isu", "update": {"fn": "increment", "field": "t"}}, debug=True)
    [(_, out)] = i.process("in", fwd([[0]], State(0, {"t": 3})))
    assert out.state.get("t") == 4
    [(_, back)] = i.process("out", bwd([[0]], out.state))
    assert back.state.get("t") == 3


@given(st.integers(0, 10**9), st.integers(-10**6, 10**6), st.integers(1, 5))
def test_isu_roundtrip_property(iid, t, by):
    i = make_node("isu", {"kind": "isu", "update": {"fn": "increment", "field": "t", "by": by}}, debug=True)
    s = State(iid, {"t": t, "len": 9})
    [(_, out)] = i.process("in", fwd([[0]], s))
    assert i.f_inv(out.state) == s


def test_isu_to_parent_roundtrip():
    i = make_node("isu", {"kind": "isu", "update": {"fn": "to_parent"}}, debug=True)
    s = State(0, {"node": 1}, aux={"parent": [2, 2, -1]})
    [(_, up)] = i.process("in", fwd([[0]], s))
    assert up.state.as_dict() == {"instance_id": 0, "node": 2, "from": 1}
    assert i.f_inv(up.state) == s


# aggregation -----------------------------------------------------------------------


def group(count, layout="rows", order=("m",)):
    return make_node("g", {"kind": "group", "merge": {"fn": "project", "fields": ["k"]},
                           "count": {"fn": "const", "value": count}, "order": list(order), "layout": layout})


def ungroup_for(n):
    return make_node("u", {"kind": "ungroup", "members": {"fn": "range", "field": "m", "count": {"fn": "const", "value": n}},
                           "key": ["instance_id", "k", "m"]})


def test_group_singleton():
    g = group(1)
    [(_, out)] = g.process("in", fwd([[1, 2]], State(0, {"k": 4, "m": 0})))
    assert out.payload.tolist() == [[1, 2]] and out.state == State(0, {"k": 4})


def test_group_orders_members_and_restores_states():
    g = group(3)
    states = [State(0, {"k": 1, "m": m}) for m in (2, 0, 1)]
    outs = []
    for s in states:
        outs += g.process("in", fwd([[s.get("m")]], s))
    [(_, out)] = outs
    assert out.payload.tolist() == [[0], [1], [2]]
    back = g.process("out", bwd([[10], [11], [12]], out.state))
    assert {(m.state.get("m"), m.payload[0, 0]) for _, m in back} == {(0, 10), (1, 11), (2, 12)}
    assert g.cache == {} and g.pending == {}


def test_group_overflow_detected():
    g = make_node("g", {"kind": "group", "merge": {"fn": "project", "fields": ["k"]}, "count": {"fn": "aux", "attr": "n"}})
    g.process("in", fwd([[1]], State(0, {"k": 0}, aux={"n": 2})))
    assert g.incomplete() == {"State(0, k=0)": 1}


@given(st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=2), min_size=5, max_size=5), st.permutations(range(5)))
def test_ungroup_inverts_group(rows, perm):
    g, u = group(5), ungroup_for(5)
    msgs = [fwd([rows[m]], State(7, {"k": 3, "m": m})) for m in perm]
    grouped = [o for m in msgs for _, o in g.process("in", m)]
    assert len(grouped) == 1
    out = u.process("in", grouped[0])
    before = Counter((m.state, tuple(m.payload[0])) for m in msgs)
    after = Counter((m.state, tuple(m.payload[0])) for _, m in out)
    assert before == after


def flatmap(k):
    return make_node("f", {"kind": "flatmap", "generate": {"fn": "range", "field": "e", "count": {"fn": "const", "value": k}},
                           "key": ["instance_id", "e"]})


def test_flatmap_sums_gradients_and_restores_state():
    f = flatmap(3)
    s = State(0, {"n": 1})
    outs = f.process("in", fwd([[1.0, 2.0]], s))
    assert [m.state.get("e") for _, m in outs] == [0, 1, 2]
    res = []
    for _, m in outs:
        res += f.process("out", bwd([[0.5, -1.0]], m.state))
    [(port, back)] = res
    assert port == "in" and back.state == s and back.payload.tolist() == [[1.5, -3.0]]
    assert f.cache == {} and f.collect == {}


@given(st.integers(1, 6), st.floats(-100, 100), st.integers(0, 100))
def test_flatmap_linearity(k, c, seed):
    rng = np.random.default_rng(seed)
    grads = rng.standard_normal((k, 1, 3))

    def run(scale):
        f = flatmap(k)
        outs = f.process("in", fwd(np.zeros((1, 3)), State(0)))
        res = []
        for (_, m), g in zip(outs, grads):
            res += f.process("out", bwd(g * scale, m.state))
        return res[0][1].payload

    np.testing.assert_allclose(run(c), c * run(1.0), rtol=1e-12, atol=1e-12)


def test_flatmap_with_no_outputs_returns_zero_gradient():
    f = flatmap(1)
    f.generate = lambda s: []
    [(port, m)] = f.process("in", fwd([[1.0]], State(0)))
    assert port == "in" and m.direction is BACKWARD and m.payload.tolist() == [[0.0]]


def test_concat_split_bcast():
    c = make_node("c", {"kind": "concat", "inputs": ["x", "h"], "state_from": "h", "key": ["instance_id"]})
    assert c.process("x", fwd([[1]], State(0, {"a": 1}))) == []
    [(_, out)] = c.process("h", fwd([[2, 3]], State(0, {"b": 2})))
    assert out.payload.tolist() == [[1, 2, 3]] and out.state == State(0, {"b": 2})
    back = c.process("out", bwd([[4, 5, 6]], out.state))
    assert [(p, m.payload.tolist(), m.state) for p, m in back] == [("x", [[4]], State(0, {"a": 1})), ("h", [[5, 6]], State(0, {"b": 2}))]
    with pytest.raises(DuplicateKeyError):
        c.process("x", fwd([[1]], State(1)))
        c.process("x", fwd([[1]], State(1)))

    sp = make_node("s", {"kind": "split", "ports": ["a", "b"], "sizes": [1, 2], "key": ["instance_id"]})
    parts = sp.process("in", fwd([[1, 2, 3]], State(0)))
    assert [m.payload.tolist() for _, m in parts] == [[[1]], [[2, 3]]]
    assert sp.process("b", bwd([[8, 9]], State(0))) == []
    assert sp.process("a", bwd([[7]], State(0)))[0][1].payload.tolist() == [[7, 8, 9]]

    bc = make_node("b", {"kind": "bcast", "ports": ["p", "q"], "key": ["instance_id"]})
    assert len(bc.process("in", fwd([[1]], State(0)))) == 2
    bc.process("p", bwd([[1.5]], State(0)))
    assert bc.process("q", bwd([[2.0]], State(0)))[0][1].payload.tolist() == [[3.5]]


def test_sum_rows_and_transpose_backward():
    s = make_node("s", {"kind": "sum_rows", "key": ["instance_id"]})
    [(_, out)] = s.process("in", fwd([[1, 2], [3, 4]], State(0)))
    assert out.payload.tolist() == [[4, 6]]
    assert s.process("out", bwd([[1, -1]], State(0)))[0][1].payload.tolist() == [[1, -1], [1, -1]]
    t = make_node("t", {"kind": "transpose"})
    assert t.process("in", fwd([[1], [2]], State(0)))[0][1].payload.shape == (1, 2)


# loss -----------------------------------------------------------------------------


def test_cross_entropy_symmetric_logits():
    loss = make_node("loss", {"kind": "loss", "key": ["instance_id"]})
    assert loss.process("label", fwd([[0]], State(0))) == []
    out = loss.process("pred", fwd([[0, 0]], State(0)))
    grads = {p: m for p, m in out}
    assert grads["pred"].payload.tolist() == [[-0.5, 0.5]]
    assert grads["label"].direction is BACKWARD
    assert loss.records[0][1] == pytest.approx(np.log(2), rel=1e-15)


def test_squared_error_perfect():
    loss = make_node("loss", {"kind": "loss", "loss": "squared_error", "key": ["instance_id"]})
    loss.process("pred", fwd([[3]], State(0)))
    out = dict(loss.process("label", fwd([[3]], State(0))))
    assert out["pred"].payload.tolist() == [[0]] and loss.records[0][1] == 0


@pytest.mark.parametrize("kind", ["softmax_ce", "squared_error"])
def test_loss_gradient_matches_finite_differences(kind, rng):
    node = make_node("loss", {"kind": "loss", "loss": kind, "key": ["instance_id"]})
    z = rng.standard_normal((1, 4))
    y = [[2]] if kind == "softmax_ce" else rng.standard_normal((1, 4))
    _, g, _, _ = node.evaluate(T.tensor(z), T.tensor(y))
    num = central_diff(lambda v: node.evaluate(T.tensor(v), T.tensor(y))[0], z)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-6


def test_eval_loss_only_acks_label():
    loss = make_node("loss", {"kind": "loss", "key": ["instance_id"]})
    loss.process("pred", fwd([[0, 1]], State(0), train=False))
    out = loss.process("label", fwd([[1]], State(0), train=False))
    assert [p for p, _ in out] == ["label"]


def test_label_twice_is_an_error():
    loss = make_node("loss", {"kind": "loss", "key": ["instance_id"]})
    loss.process("label", fwd([[0]], State(0)))
    with pytest.raises(DuplicateKeyError, match="label arrived twice"):
        loss.process("label", fwd([[0]], State(0)))
