import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policylab.ontology import ATTRIBUTE_VALUES, AttrKind, AttributeCondition
from policylab.render import render_policy
from policylab.rewards import parse_response
from policylab.scenes import (
    Scene,
    SceneObject,
    eval_condition,
    sample_scene,
    synth_cot,
    trace,
)
from policylab.trees import sample_decision_tree


def brute_force_outcome(tree, scene):
    """Independent oracle: test every leaf's full path predicate.

    Walks all root-to-leaf paths collecting (condition, verdict)
    requirements and returns the label of the unique leaf whose
    conjunction the scene satisfies.
    """
    matches = []

    def walk(ref, constraints):
        if ref[0] == "leaf":
            if all(eval_condition(scene, c) == v for c, v in constraints):
                matches.append(tree.leaves[ref[1]].label)
            return
        node = tree.nodes[ref[1]]
        walk(node.on_true, constraints + [(node.condition, True)])
        walk(node.on_false, constraints + [(node.condition, False)])

    walk(tree.root, [])
    assert len(matches) == 1, "decision paths must partition the scene space"
    return matches[0]


def test_sample_scene_bounds():
    for seed in range(20):
        scene = sample_scene(seed, 3, 10)
        assert 3 <= len(scene.objects) <= 10
        for obj in scene.objects:
            for kind in AttrKind:
                assert obj.value(kind) in ATTRIBUTE_VALUES[kind]


def test_sample_scene_deterministic():
    assert sample_scene(3, 3, 10).to_list() == sample_scene(3, 3, 10).to_list()


def test_sample_scene_single_object():
    assert len(sample_scene(5, 1, 1).objects) == 1


def test_sample_scene_bad_bounds():
    with pytest.raises(ValueError):
        sample_scene(0, 0, 3)
    with pytest.raises(ValueError):
        sample_scene(0, 5, 3)


def test_eval_condition_existence():
    scene = Scene([SceneObject("cube", "cyan", "small", "rubber"),
                   SceneObject("sphere", "red", "large", "rubber")])
    assert eval_condition(scene, AttributeCondition(AttrKind.COLOR, "cyan"))
    assert not eval_condition(scene, AttributeCondition(AttrKind.COLOR, "gray"))
    assert eval_condition(scene, AttributeCondition(AttrKind.MATERIAL, "rubber"))


def test_trace_path_length_and_consistency():
    tree = sample_decision_tree(4, "T", 2)
    scene = sample_scene(9, 3, 10)
    tr = trace(tree, scene)
    assert len(tr.steps) == 4
    # each step's verdict matches a fresh evaluation of its condition
    for step in tr.steps:
        assert step.verdict == eval_condition(scene, step.condition)
    # verdict at step i selects the child visited at step i+1
    for a, b in zip(tr.steps, tr.steps[1:]):
        assert a.target == ("node", b.node_id)
    assert tr.steps[-1].target[0] == "leaf"
    assert tr.outcome == tree.leaves[tr.steps[-1].target[1]].label


@given(tree_seed=st.integers(0, 3000), scene_seed=st.integers(0, 3000))
@settings(max_examples=150, deadline=None)
def test_trace_agrees_with_brute_force(tree_seed, scene_seed):
    tree = sample_decision_tree(4, "T", tree_seed)
    scene = sample_scene(scene_seed, 3, 10)
    assert trace(tree, scene).outcome == brute_force_outcome(tree, scene)


def test_trace_brute_force_thousand_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        tree = sample_decision_tree(2, "T", int(rng.integers(1 << 30)))
        scene = sample_scene(int(rng.integers(1 << 30)), 3, 10)
        assert trace(tree, scene).outcome == brute_force_outcome(tree, scene)


def test_synth_cot_structure_and_roundtrip():
    tree = sample_decision_tree(2, "T", 7)
    doc = render_policy(tree, "p0", "T")
    scene = sample_scene(4, 3, 10)
    tr = trace(tree, scene, policy_name="p0")
    cot = synth_cot(tr, doc)
    text = " ".join(cot)
    assert text.count("Condition") >= 2
    verdict_words = [w for w in cot if w in ("yes", "no")]
    assert verdict_words == ["yes" if s.verdict else "no" for s in tr.steps]
    parsed = parse_response(cot)
    assert parsed.format_ok
    assert parsed.answer == tr.outcome


def test_synth_cot_policy_mismatch():
    tree = sample_decision_tree(2, "T", 7)
    doc = render_policy(tree, "p0", "T")
    tr = trace(tree, sample_scene(4, 3, 10), policy_name="other")
    with pytest.raises(ValueError):
        synth_cot(tr, doc)
