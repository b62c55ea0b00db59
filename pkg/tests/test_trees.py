import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policylab.ontology import ALL_KINDS, AttrKind, AttributeCondition, Presentation
from policylab.render import PolicyGenerationError, render_policy
from policylab.trees import (
    DecisionTree,
    count_leaves,
    enumerate_outcomes,
    resample_conditions,
    sample_decision_tree,
    validate_tree,
)


def test_condition_rejects_illegal_value():
    with pytest.raises(ValueError):
        AttributeCondition(kind=AttrKind.COLOR, value="cube")


def test_depth2_structure():
    tree = sample_decision_tree(2, "T", rng_seed=7)
    assert len(tree.nodes) == 3
    assert len(tree.leaves) == 4


def test_depth4_structure():
    tree = sample_decision_tree(4, "T", rng_seed=1)
    assert len(tree.nodes) == 15
    assert len(tree.leaves) == 16


def _true_edge_pairs(tree):
    pairs = []
    for node in tree.nodes:
        if node.on_true[0] == "node":
            pairs.append((node, tree.nodes[node.on_true[1]]))
    return pairs


@given(seed=st.integers(0, 10_000), depth=st.sampled_from([2, 4, 6]))
@settings(max_examples=60, deadline=None)
def test_true_child_never_repeats_parent_kind(seed, depth):
    tree = sample_decision_tree(depth, "T", seed)
    for parent, child in _true_edge_pairs(tree):
        assert child.condition.kind != parent.condition.kind


def test_enumerate_outcomes_unique_and_ordered():
    tree = sample_decision_tree(4, "T", 3)
    labels = enumerate_outcomes(tree)
    assert len(labels) == len(tree.leaves)
    assert len(set(labels)) == len(labels)
    assert labels == [f"Case {i}" for i in range(16)]


def test_determinism_same_seed_same_tree():
    a = sample_decision_tree(4, "M", 99)
    b = sample_decision_tree(4, "M", 99)
    assert a.to_dict() == b.to_dict()
    assert render_policy(a, "p", "M").text == render_policy(b, "p", "M").text


def test_mode_m_draws_visual_demos():
    tree = sample_decision_tree(6, "M", 5)
    kinds = {n.condition.presentation for n in tree.nodes}
    assert Presentation.VISUAL_DEMO in kinds
    assert Presentation.TEXTUAL in kinds


def test_validate_clean_tree():
    assert validate_tree(sample_decision_tree(4, "T", 11)) == []


def test_validate_catches_repeated_kind_on_true_edge():
    tree = sample_decision_tree(2, "T", 7)
    root = tree.nodes[0]
    child = tree.nodes[root.on_true[1]]
    child.condition = AttributeCondition(kind=root.condition.kind,
                                         value=root.condition.value)
    findings = validate_tree(tree)
    assert any("repeats parent attribute kind" in f for f in findings)


def test_validate_catches_duplicate_labels():
    tree = sample_decision_tree(2, "T", 7)
    tree.leaves[1].label = tree.leaves[0].label
    findings = validate_tree(tree)
    assert any("duplicate leaf labels" in f for f in findings)


def test_count_leaves_parent_scope_is_full_binary():
    assert count_leaves(2, "parent") == 4
    assert count_leaves(4, "parent") == 16
    assert count_leaves(6, "parent") == 64


def test_count_leaves_true_chain_truncates():
    # exhausting all four kinds along a TRUE chain truncates the branch
    assert count_leaves(6, "true_chain") < 64
    # brute-force recursion over (level, run-length) as an independent check
    def brute(level, run):
        if level == 6 or run == 4:
            return 1
        return brute(level + 1, run + 1) + brute(level + 1, 0)

    assert count_leaves(6, "true_chain") == brute(0, 0)


def test_true_chain_sampling_matches_structural_count():
    for seed in range(5):
        tree = sample_decision_tree(6, "T", seed, constraint="true_chain")
        assert len(tree.leaves) == count_leaves(6, "true_chain")
        assert validate_tree(tree) == []


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_sample_render_validate_roundtrip(seed):
    for depth in (2, 4):
        tree = sample_decision_tree(depth, "M", seed)
        assert validate_tree(tree) == []
        doc = render_policy(tree, "roundtrip", "M")
        assert len(doc.body) == len(tree.nodes) + 1


def test_render_mode_t_has_no_assets():
    tree = sample_decision_tree(4, "M", 5)
    doc = render_policy(tree, "p", "T")
    assert doc.visual_assets == {}
    assert "<demo_" not in doc.text


def test_render_mode_m_assets_match_placeholders():
    tree = sample_decision_tree(6, "M", 5)
    doc = render_policy(tree, "p", "M")
    n_demo = sum(
        1 for n in tree.nodes if n.condition.presentation is Presentation.VISUAL_DEMO
    )
    assert len(doc.visual_assets) == n_demo
    for placeholder, cond in doc.visual_assets.items():
        assert doc.text.count(placeholder) == 1
        assert cond.value not in doc.body[0]  # hidden from the instruction text


def test_render_duplicate_section_ids_error():
    tree = sample_decision_tree(2, "T", 7)
    tree.nodes[1].node_id = tree.nodes[0].node_id
    with pytest.raises(PolicyGenerationError):
        render_policy(tree, "p", "T")


def test_tree_dict_roundtrip():
    tree = sample_decision_tree(4, "M", 17)
    clone = DecisionTree.from_dict(tree.to_dict())
    assert clone.to_dict() == tree.to_dict()


def test_resample_conditions_keeps_structure():
    tree = sample_decision_tree(4, "T", 8)
    new = resample_conditions(tree, 123)
    assert [lf.label for lf in new.leaves] == [lf.label for lf in tree.leaves]
    assert [n.on_true for n in new.nodes] == [n.on_true for n in tree.nodes]
    assert validate_tree(new) == []
    changed = sum(
        1 for a, b in zip(tree.nodes, new.nodes)
        if (a.condition.kind, a.condition.value) != (b.condition.kind, b.condition.value)
    )
    assert changed > 0
