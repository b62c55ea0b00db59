"""Synthetic scene graphs and the exact policy-evaluation oracle.

A scene is an ordered list of objects, each carrying one value per
attribute kind. Policies are evaluated by walking the decision tree from
the root: at each node an existence test runs against the scene and the
verdict selects the next child. The resulting trace is the ground truth
for both answers and templated chain-of-thought.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ontology import ATTRIBUTE_VALUES, AttrKind, AttributeCondition
from .render import PolicyDoc
from .trees import ChildRef, DecisionTree

SCENE_OPEN = "<scene>"
SCENE_CLOSE = "</scene>"
VISUAL_TOKEN_PREFIX = "v:"

# attribute order inside each object's token group
OBJECT_TOKEN_ORDER = (AttrKind.SHAPE, AttrKind.COLOR, AttrKind.SIZE, AttrKind.MATERIAL)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    material: str

    def value(self, kind: AttrKind) -> str:
        return getattr(self, kind.value)


@dataclass
class Scene:
    objects: list[SceneObject]

    def to_list(self) -> list[dict]:
        return [
            {"shape": o.shape, "color": o.color, "size": o.size, "material": o.material}
            for o in self.objects
        ]

    @classmethod
    def from_list(cls, items: list[dict]) -> "Scene":
        return cls([SceneObject(**it) for it in items])

    def canonical(self) -> str:
        """Stable serialization used for train/test split hygiene."""
        return json.dumps(self.to_list(), sort_keys=True, separators=(",", ":"))

    def tokens(self) -> list[str]:
        toks = [SCENE_OPEN]
        for obj in self.objects:
            toks.extend(VISUAL_TOKEN_PREFIX + obj.value(kind) for kind in OBJECT_TOKEN_ORDER)
        toks.append(SCENE_CLOSE)
        return toks


def sample_scene(rng_seed: int, min_objects: int = 3, max_objects: int = 10) -> Scene:
    """Deterministic scene with between min_objects and max_objects objects."""
    if not 1 <= min_objects <= max_objects:
        raise ValueError(f"need 1 <= min <= max, got ({min_objects}, {max_objects})")
    rng = np.random.default_rng(rng_seed)
    return _draw_scene(rng, min_objects, max_objects)


def _draw_scene(rng: np.random.Generator, min_objects: int, max_objects: int) -> Scene:
    count = int(rng.integers(min_objects, max_objects + 1))
    objects = []
    for _ in range(count):
        attrs = {}
        for kind in OBJECT_TOKEN_ORDER:
            values = ATTRIBUTE_VALUES[kind]
            attrs[kind.value] = values[rng.integers(len(values))]
        objects.append(SceneObject(**attrs))
    return Scene(objects)


def eval_condition(scene: Scene, condition: AttributeCondition) -> bool:
    """True iff some object in the scene carries the tested attribute value."""
    return any(obj.value(condition.kind) == condition.value for obj in scene.objects)


@dataclass
class TraceStep:
    node_id: int
    condition: AttributeCondition
    verdict: bool
    target: ChildRef  # child selected by the verdict


@dataclass
class Trace:
    steps: list[TraceStep] = field(default_factory=list)
    outcome: str = ""
    policy_name: str | None = None


def trace(tree: DecisionTree, scene: Scene, policy_name: str | None = None) -> Trace:
    """Walk the tree against the scene; the ground-truth oracle."""
    tr = Trace(policy_name=policy_name)
    ref = tree.root
    while ref[0] == "node":
        node = tree.nodes[ref[1]]
        verdict = eval_condition(scene, node.condition)
        target = node.on_true if verdict else node.on_false
        tr.steps.append(TraceStep(node.node_id, node.condition, verdict, target))
        ref = target
    tr.outcome = tree.leaves[ref[1]].label
    return tr


def synth_cot(tr: Trace, doc: PolicyDoc) -> list[str]:
    """Templated chain-of-thought tokens for a trace, in think/boxed format.

    One fixed-arity clause per step naming the section, the tested
    condition, and the verdict, then the boxed outcome. Raises ValueError
    when the trace does not belong to the policy document.
    """
    if tr.policy_name is not None and tr.policy_name != doc.name:
        raise ValueError(f"trace is for policy {tr.policy_name!r}, doc is {doc.name!r}")
    n_sections = len(doc.body) - 1  # minus the general-instruction section
    toks = ["<think>"]
    for step in tr.steps:
        if not 0 <= step.node_id < n_sections:
            raise ValueError(f"trace step references unknown section {step.node_id}")
        toks += ["Condition", str(step.node_id), ":"]
        toks += [step.condition.kind.value, step.condition.value, "?"]
        toks += ["yes" if step.verdict else "no", "->"]
        if step.target[0] == "node":
            toks += ["Condition", str(step.target[1])]
        else:
            toks += tr.outcome.split()
        toks += ["."]
    toks += ["</think>", "\\boxed{", *tr.outcome.split(), "}"]
    return toks
