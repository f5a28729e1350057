import numpy as np
import pytest

from dynflow import cli, data, gradcheck
from dynflow.models import ModelSpec, build_model


@pytest.mark.parametrize("name", ["mlp", "rnn", "treernn", "ggsnn"])
def test_end_to_end_gradients(name):
    spec, inst = cli._default_gradcheck_cases()[name]
    results = gradcheck.check_model(build_model(spec), inst)
    assert results
    for r in results:
        assert r.rel_error < 1e-5, (r.node, r.param, r.rel_error)


def test_rnn_case_is_length_four():
    spec, inst = cli._default_gradcheck_cases()["rnn"]
    assert len(inst.tokens) == 4 and spec.hidden == 16


def test_tree_case_has_three_leaves_and_ggsnn_four_nodes():
    cases = cli._default_gradcheck_cases()
    assert len(cases["treernn"][1].leaves) == 3
    assert cases["ggsnn"][1].num_nodes == 4 and cases["ggsnn"][0].hidden == 5


def test_detects_a_wrong_gradient():
    spec = ModelSpec("mlp", input_dim=3, mlp_hidden=4, classes=2)
    model = build_model(spec)
    inst = data.VectorInstance(np.array([0.5, -1.0, 2.0]), 1)
    from dynflow import nodes

    orig = nodes.Linear.backward

    def broken(self, port, msg):
        out = orig(self, port, msg)
        self.block.grad_accum["b"] *= 2
        return out

    nodes.Linear.backward = broken
    try:
        results = gradcheck.check_model(model, inst)
    finally:
        nodes.Linear.backward = orig
    assert any(r.param == "b" and not r.ok(1e-5) for r in results)


def test_cli_gradcheck_report(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "model,node,param,size,rel_error,result"
    assert all(line.endswith("pass") for line in lines[1:])
    assert "FAIL" not in capsys.readouterr().out


def test_cli_gradcheck_fails_with_impossible_tolerance():
    assert cli.main(["gradcheck", "--tol", "1e-30"]) == 1
