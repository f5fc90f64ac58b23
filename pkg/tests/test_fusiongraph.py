import json

import pytest

from msfusion.errors import ConfigError
from msfusion.fusiongraph import FusionEvent, FusionGraph, FusionInput, enumerate_fusions, verify_against_network
from msfusion.nets import ModelConfig, build_network


def as_tuples(g):
    return [(e.j, e.op, [(i.src, i.depth) for i in e.inputs]) for e in g.events]


def test_three_by_three_written_out():
    # F(3i+1) = mul(F(3i-1)^7, F(3i)^7); F(3i+2) = add(F(3i-1)^6, F(3i+1)^0);
    # F(3i+3) = add(F(3i)^6, F(3i+1)^0); F(-1) = x1, F(0) = x2; F10 = concat(F8^0, F9^0)
    want = [
        (1, "multiply", [("x1", 7), ("x2", 7)]),
        (2, "add", [("x1", 6), (1, 0)]),
        (3, "add", [("x2", 6), (1, 0)]),
        (4, "multiply", [(2, 7), (3, 7)]),
        (5, "add", [(2, 6), (4, 0)]),
        (6, "add", [(3, 6), (4, 0)]),
        (7, "multiply", [(5, 7), (6, 7)]),
        (8, "add", [(5, 6), (7, 0)]),
        (9, "add", [(6, 6), (7, 0)]),
        (10, "concat", [(8, 0), (9, 0)]),
    ]
    g = enumerate_fusions(3, 3)
    assert as_tuples(g) == want
    assert g.terminal == 10


@pytest.mark.parametrize("n", range(1, 6))
def test_single_stage(n):
    g = enumerate_fusions(1, n)
    assert [e.op for e in g.events] == ["multiply", "add", "add", "concat"]


def test_one_block_depths():
    # N = 1: two main-path convs in the block, plus the squeeze conv on the multiply path
    g = enumerate_fusions(3, 1)
    for e in g.events:
        if e.op == "multiply":
            assert [i.depth for i in e.inputs] == [3, 3]
        elif e.op == "add":
            assert e.inputs[0].depth == 2 and e.inputs[1].depth == 0


@pytest.mark.parametrize("stages", range(1, 6))
@pytest.mark.parametrize("blocks", range(1, 6))
def test_counts_and_depth_relation(stages, blocks):
    g = enumerate_fusions(stages, blocks)
    assert len(g.events) == 3 * stages + 1
    assert sum(e.op == "concat" for e in g.events) == 1
    mul_depth = {i.depth for e in g.events if e.op == "multiply" for i in e.inputs}
    add_depth = {e.inputs[0].depth for e in g.events if e.op == "add"}
    assert mul_depth == {2 * blocks + 1}
    assert add_depth == {2 * blocks}


def test_serialization_deterministic_and_round_trips():
    a, b = enumerate_fusions(4, 2).to_json(), enumerate_fusions(4, 2).to_json()
    assert a == b
    d = json.loads(a)
    assert d["events"][0] == {"j": 1, "op": "multiply", "inputs": [{"src": "x1", "depth": 5}, {"src": "x2", "depth": 5}]}
    assert FusionGraph.from_dict(d) == enumerate_fusions(4, 2)


@pytest.mark.parametrize("bad", [(0, 3), (6, 1), (3, 0), (1, 6)])
def test_out_of_range(bad):
    with pytest.raises(ConfigError):
        enumerate_fusions(*bad)


def test_event_validation():
    with pytest.raises(ConfigError):
        FusionEvent(1, "multiply", (FusionInput("x1", 1),))
    with pytest.raises(ConfigError):
        FusionEvent(2, "add", (FusionInput(2, 0), FusionInput("x1", 1)))
    with pytest.raises(ConfigError):
        FusionEvent(1, "add", (FusionInput("x1", -1), FusionInput("x2", 0)))
    with pytest.raises(ConfigError):
        FusionEvent(1, "divide", ())


def net(stages, blocks):
    side = 2**stages
    return build_network(ModelConfig(stages=stages, blocks_per_stage=blocks, base_channels=2, input_shape=(side, side, side)))


def test_verify_matches():
    r = verify_against_network(enumerate_fusions(3, 3), build_network(ModelConfig(stages=3, blocks_per_stage=3)))
    assert r.ok and r.observed_events == 10


@pytest.mark.parametrize("stages,blocks", [(1, 1), (2, 4), (5, 2)])
def test_verify_matches_other_shapes(stages, blocks):
    assert verify_against_network(enumerate_fusions(stages, blocks), net(stages, blocks)).ok


def test_verify_missing_stage():
    r = verify_against_network(enumerate_fusions(3, 3), net(2, 3))
    assert not r.ok
    assert r.observed_events == 7
    text = "\n".join(r.mismatches)
    for j in (8, 9, 10):
        assert f"F{j}" in text and "missing" in text


def test_verify_injected_depth_fault():
    g = enumerate_fusions(3, 3).replace_depth(1, 0, 8)
    r = verify_against_network(g, build_network(ModelConfig(stages=3, blocks_per_stage=3)))
    assert r.mismatches == ["F1 input 0: depth 8 in graph, 7 in network"]


def test_verify_needs_multistage():
    with pytest.raises(ConfigError):
        verify_against_network(enumerate_fusions(1, 1), build_network(ModelConfig(stages=1, blocks_per_stage=1, input_shape=(2, 2, 2), strategy="late")))
