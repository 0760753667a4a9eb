import json

import pytest
from hypothesis import given, settings, strategies as st

from hdeval.criteria import (
    ROOT_ID,
    CriteriaTree,
    attach_children,
    feature_order,
    lineage,
    new_tree,
    nodes_at_layer,
    prune_to_layers,
    validate,
)
from hdeval.errors import TreeError, UnknownNodeError, ValidationError


def test_new_tree_has_only_root():
    t = new_tree("evaluate summarization quality", 3, 4)
    assert len(t) == 1
    assert t.task.layer == 0 and t.task.parent_id is None
    assert nodes_at_layer(t, 0) == [t.task]


def test_new_tree_rejects_empty_task():
    with pytest.raises(ValidationError):
        new_tree("", 3, 4)


def test_single_layer_tree_accepts_layer1_only():
    t = new_tree("evaluate conversation quality", 1, 4)
    t = attach_children(t, ROOT_ID, [("Coherence", "Fits the dialogue.")])
    with pytest.raises(TreeError):
        attach_children(t, "1", [("Topic", "On topic.")])


def test_attach_children_adds_layer():
    t = attach_children(new_tree("dialogue", 3, 4), ROOT_ID, [("Naturalness", "Sounds human.")])
    kids = [("Grammar and syntax", "a"), ("Spelling and punctuation", "b"),
            ("Lexical choice and diversity", "c"), ("Register", "d")]
    t2 = attach_children(t, "1", kids)
    assert [n.name for n in nodes_at_layer(t2, 2)] == [k for k, _ in kids]
    assert [n.id for n in nodes_at_layer(t2, 2)] == ["1.1", "1.2", "1.3", "1.4"]


def test_attach_too_many_children():
    t = new_tree("dialogue", 3, 4)
    with pytest.raises(TreeError):
        attach_children(t, ROOT_ID, [(f"c{i}", "d") for i in range(5)])


def test_attach_nothing_returns_same_snapshot():
    t = new_tree("dialogue", 3, 4)
    assert attach_children(t, ROOT_ID, []) is t


def test_attach_duplicate_sibling_rejected():
    t = attach_children(new_tree("dialogue", 3, 4), ROOT_ID, [("A", "x")])
    with pytest.raises(TreeError):
        attach_children(t, ROOT_ID, [("A", "y")])


def test_attach_does_not_mutate_input():
    t = attach_children(new_tree("dialogue", 3, 4), ROOT_ID, [("A", "x")])
    before = t.to_json()
    attach_children(t, "1", [("B", "y")])
    assert t.to_json() == before


def test_lineage_of_deep_node(dialogue_tree):
    node = dialogue_tree.find("Spelling correctness")[0]
    names = [n.name for n in lineage(dialogue_tree, node.id)]
    assert names == [dialogue_tree.task.name, "Naturalness", "Spelling and punctuation", "Spelling correctness"]
    assert [n.layer for n in lineage(dialogue_tree, node.id)] == [0, 1, 2, 3]


def test_lineage_root_and_unknown(dialogue_tree):
    assert lineage(dialogue_tree, ROOT_ID) == [dialogue_tree.task]
    with pytest.raises(UnknownNodeError):
        lineage(dialogue_tree, "9.9")


def test_nodes_at_layer(dialogue_tree):
    assert [n.name for n in nodes_at_layer(dialogue_tree, 1)] == [
        "Naturalness", "Coherence", "Engagingness", "Groundedness"]
    with pytest.raises(TreeError):
        nodes_at_layer(dialogue_tree, 4)


def test_feature_order_of_fixture(dialogue_tree):
    order = feature_order(dialogue_tree)
    assert len(order) == 31
    assert [dialogue_tree.get(i).name for i in order[:4]] == [
        "Naturalness", "Coherence", "Engagingness", "Groundedness"]
    layers = [dialogue_tree.get(i).layer for i in order]
    assert layers == sorted(layers)
    assert [layers.count(k) for k in (1, 2, 3)] == [4, 15, 12]


def test_feature_order_root_only():
    with pytest.raises(TreeError):
        feature_order(new_tree("dialogue"))


def test_round_trip_preserves_order(dialogue_tree):
    back = CriteriaTree.from_json(dialogue_tree.to_json())
    assert feature_order(back) == feature_order(dialogue_tree)
    assert back.to_json() == dialogue_tree.to_json()


def test_repeated_names_are_distinct_nodes(dialogue_tree):
    hits = dialogue_tree.find("Topic relevance")
    assert len(hits) == 2
    assert {h.layer for h in hits} == {2, 3}


def test_from_dict_rejects_broken_tree(dialogue_tree):
    data = dialogue_tree.to_dict()
    data["nodes"][5]["parent_id"] = "nope"
    with pytest.raises(TreeError):
        CriteriaTree.from_dict(data)


def test_prune_to_layers(dialogue_tree):
    t = prune_to_layers(dialogue_tree, 2)
    assert t.depth() == 2
    assert len(feature_order(t)) == 19


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 5)), max_size=30))
def test_random_attach_sequences_keep_invariants(ops):
    t = new_tree("task", 3, 4)
    for pick, count in ops:
        nodes = [n for n in t.nodes if n.layer < 3]
        parent = nodes[pick % len(nodes)]
        try:
            t = attach_children(t, parent.id, [(f"n{len(t)}_{i}", "def") for i in range(count)])
        except TreeError:
            continue
    validate(t)
    ids = [n.id for n in t.nodes if n.layer >= 1]
    if ids:
        assert sorted(feature_order(t)) == sorted(ids)
        for n in t.nodes:
            assert [m.layer for m in lineage(t, n.id)] == list(range(n.layer + 1))
    assert json.loads(t.to_json()) == json.loads(CriteriaTree.from_json(t.to_json()).to_json())
