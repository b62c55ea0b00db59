"""Binary decision trees over the object ontology.

A tree alternates decision layers down to response leaves labelled
"Case k". A decision node reached from its parent over the TRUE edge never
tests the same attribute kind as that parent (this avoids logically
redundant chains). Two constraint scopes are supported:

* ``parent``: only the immediate parent's kind is excluded (default).
* ``true_chain``: every kind tested along the maximal chain of consecutive
  TRUE edges above the node is excluded; when all four kinds are exhausted
  the branch is truncated into a leaf early.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ontology import (
    ALL_KINDS,
    ATTRIBUTE_VALUES,
    AttrKind,
    AttributeCondition,
    Presentation,
)

# child reference: ("node", node_id) or ("leaf", leaf_id)
ChildRef = tuple[str, int]

CONSTRAINT_SCOPES = ("parent", "true_chain")


@dataclass
class DecisionNode:
    node_id: int
    condition: AttributeCondition
    on_true: ChildRef
    on_false: ChildRef


@dataclass
class Leaf:
    leaf_id: int
    label: str


@dataclass
class DecisionTree:
    depth: int
    mode: str  # "T" or "M"
    nodes: list[DecisionNode] = field(default_factory=list)
    leaves: list[Leaf] = field(default_factory=list)
    constraint: str = "parent"

    @property
    def root(self) -> ChildRef:
        return ("node", 0)

    def child(self, ref: ChildRef):
        kind, idx = ref
        return self.nodes[idx] if kind == "node" else self.leaves[idx]

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "mode": self.mode,
            "constraint": self.constraint,
            "nodes": [
                {
                    "id": n.node_id,
                    "condition": n.condition.to_dict(),
                    "on_true": list(n.on_true),
                    "on_false": list(n.on_false),
                }
                for n in self.nodes
            ],
            "leaves": [{"id": lf.leaf_id, "label": lf.label} for lf in self.leaves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        tree = cls(depth=d["depth"], mode=d["mode"], constraint=d.get("constraint", "parent"))
        tree.nodes = [
            DecisionNode(
                node_id=n["id"],
                condition=AttributeCondition.from_dict(n["condition"]),
                on_true=(n["on_true"][0], n["on_true"][1]),
                on_false=(n["on_false"][0], n["on_false"][1]),
            )
            for n in d["nodes"]
        ]
        tree.leaves = [Leaf(leaf_id=lf["id"], label=lf["label"]) for lf in d["leaves"]]
        return tree


def _draw_condition(
    rng: np.random.Generator, excluded: frozenset[AttrKind], mode: str, visual_prob: float
) -> AttributeCondition:
    kinds = [k for k in ALL_KINDS if k not in excluded]
    kind = kinds[rng.integers(len(kinds))]
    values = ATTRIBUTE_VALUES[kind]
    value = values[rng.integers(len(values))]
    presentation = Presentation.TEXTUAL
    if mode == "M" and rng.random() < visual_prob:
        presentation = Presentation.VISUAL_DEMO
    return AttributeCondition(kind=kind, value=value, presentation=presentation)


def sample_decision_tree(
    depth: int,
    mode: str,
    rng_seed: int,
    constraint: str = "parent",
    visual_prob: float = 0.5,
) -> DecisionTree:
    """Sample a decision tree with ``depth`` decision layers.

    Deterministic given (depth, mode, rng_seed, constraint, visual_prob).
    Nodes are created in preorder (TRUE branch first); leaf labels are
    "Case k" with k assigned left to right.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if mode not in ("T", "M"):
        raise ValueError(f"mode must be 'T' or 'M', got {mode!r}")
    if constraint not in CONSTRAINT_SCOPES:
        raise ValueError(f"unknown constraint scope {constraint!r}")

    rng = np.random.default_rng(rng_seed)
    tree = DecisionTree(depth=depth, mode=mode, constraint=constraint)

    def build(level: int, excluded: frozenset[AttrKind]) -> ChildRef:
        truncated = constraint == "true_chain" and len(excluded) == len(ALL_KINDS)
        if level == depth or truncated:
            leaf = Leaf(leaf_id=len(tree.leaves), label=f"Case {len(tree.leaves)}")
            tree.leaves.append(leaf)
            return ("leaf", leaf.leaf_id)
        node = DecisionNode(
            node_id=len(tree.nodes),
            condition=_draw_condition(rng, excluded, mode, visual_prob),
            on_true=("leaf", -1),
            on_false=("leaf", -1),
        )
        tree.nodes.append(node)
        kind = node.condition.kind
        if constraint == "true_chain":
            true_excl = excluded | {kind}
        else:
            true_excl = frozenset({kind})
        node.on_true = build(level + 1, true_excl)
        node.on_false = build(level + 1, frozenset())
        return ("node", node.node_id)

    build(0, frozenset())
    return tree


def enumerate_outcomes(tree: DecisionTree) -> list[str]:
    """All reachable leaf labels in left-to-right (TRUE-branch-first) order."""
    labels: list[str] = []

    def walk(ref: ChildRef) -> None:
        if ref[0] == "leaf":
            labels.append(tree.leaves[ref[1]].label)
            return
        node = tree.nodes[ref[1]]
        walk(node.on_true)
        walk(node.on_false)

    walk(tree.root)
    return labels


def count_leaves(depth: int, constraint: str) -> int:
    """Structural leaf count for a tree of the given depth and constraint scope.

    Under ``parent`` scope the tree is always full binary (2^depth leaves);
    under ``true_chain`` branches truncate once four consecutive TRUE edges
    exhaust the attribute kinds. The count depends only on the structure,
    not on the sampled conditions.
    """
    if constraint == "parent":
        return 2**depth

    def f(level: int, run: int) -> int:
        if level == depth or run == len(ALL_KINDS):
            return 1
        return f(level + 1, run + 1) + f(level + 1, 0)

    return f(0, 0)


def validate_tree(tree: DecisionTree) -> list[str]:
    """Return the list of violated invariants (empty means valid)."""
    findings: list[str] = []
    n_nodes, n_leaves = len(tree.nodes), len(tree.leaves)
    if n_nodes > 2**tree.depth - 1:
        findings.append(f"too many decision nodes: {n_nodes} > {2**tree.depth - 1}")
    if n_leaves > 2**tree.depth:
        findings.append(f"too many leaves: {n_leaves} > {2**tree.depth}")

    labels = [lf.label for lf in tree.leaves]
    if len(set(labels)) != len(labels):
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        findings.append(f"duplicate leaf labels: {dupes}")

    seen_nodes: set[int] = set()
    seen_leaves: set[int] = set()

    def walk(ref: ChildRef, level: int, parent_kind: AttrKind | None) -> None:
        tag, idx = ref
        if tag == "leaf":
            if idx < 0 or idx >= n_leaves:
                findings.append(f"dangling leaf reference {ref}")
                return
            seen_leaves.add(idx)
            return
        if idx < 0 or idx >= n_nodes:
            findings.append(f"dangling node reference {ref}")
            return
        if idx in seen_nodes:
            findings.append(f"node {idx} reachable twice (not a tree)")
            return
        seen_nodes.add(idx)
        node = tree.nodes[idx]
        if level >= tree.depth:
            findings.append(f"decision node {idx} below depth {tree.depth}")
            return
        if parent_kind is not None and node.condition.kind == parent_kind:
            findings.append(
                f"node {idx} repeats parent attribute kind {parent_kind.value} on a TRUE edge"
            )
        if tree.mode != "M" and node.condition.presentation is Presentation.VISUAL_DEMO:
            findings.append(f"node {idx} uses a visual demo in a text-only tree")
        walk(node.on_true, level + 1, node.condition.kind)
        walk(node.on_false, level + 1, None)

    if n_nodes == 0:
        findings.append("tree has no decision nodes")
    else:
        walk(tree.root, 0, None)
        if seen_nodes != set(range(n_nodes)):
            findings.append("unreachable decision nodes present")
        if seen_leaves != set(range(n_leaves)):
            findings.append("unreachable leaves present")
    return findings


def resample_conditions(tree: DecisionTree, rng_seed: int) -> DecisionTree:
    """Same structure and leaf labels, freshly sampled conditions.

    Used to build override policies: the policy name and shape stay fixed
    while every tested condition changes. Node presentations are preserved.
    """
    rng = np.random.default_rng(rng_seed)
    new = DecisionTree(
        depth=tree.depth,
        mode=tree.mode,
        constraint=tree.constraint,
        leaves=[Leaf(lf.leaf_id, lf.label) for lf in tree.leaves],
    )
    new.nodes = [
        DecisionNode(n.node_id, n.condition, n.on_true, n.on_false) for n in tree.nodes
    ]

    def walk(ref: ChildRef, excluded: frozenset[AttrKind]) -> None:
        if ref[0] == "leaf":
            return
        node = new.nodes[ref[1]]
        kinds = [k for k in ALL_KINDS if k not in excluded]
        kind = kinds[rng.integers(len(kinds))]
        values = ATTRIBUTE_VALUES[kind]
        node.condition = AttributeCondition(
            kind=kind,
            value=values[rng.integers(len(values))],
            presentation=node.condition.presentation,
        )
        if tree.constraint == "true_chain":
            true_excl = excluded | {kind}
        else:
            true_excl = frozenset({kind})
        walk(node.on_true, true_excl)
        walk(node.on_false, frozenset())

    walk(new.root, frozenset())
    return new
