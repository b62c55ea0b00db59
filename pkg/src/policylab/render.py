"""Render decision trees as structured natural-language policy documents.

The rendered body is a sequence of sections: one general instruction naming
the policy, then one section per decision node. Sections reference each
other ("go to Condition 7") so answering requires multi-hop reading across
sections rather than following adjacent text. Rendering is a pure function
of (tree, name, mode): equal inputs give byte-identical bodies.

In mode M a condition whose presentation is a visual demo appears in the
body only as a placeholder token (e.g. ``<demo_2>``); the hidden condition
is recoverable solely through ``visual_assets``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .ontology import AttributeCondition, Presentation
from .trees import ChildRef, DecisionTree


class PolicyGenerationError(Exception):
    """Raised when a tree cannot be rendered (signals tree corruption)."""


@dataclass
class PolicyDoc:
    name: str
    mode: str
    depth: int
    body: list[str] = field(default_factory=list)  # ordered sections
    visual_assets: dict[str, AttributeCondition] = field(default_factory=dict)

    @property
    def text(self) -> str:
        return "\n".join(self.body)

    def tokens(self) -> list[str]:
        return self.text.split()

    def metadata(self, tree: DecisionTree) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "depth": self.depth,
            "visual_assets": {k: c.to_dict() for k, c in self.visual_assets.items()},
            "tree": tree.to_dict(),
        }


def _ref_phrase(tree: DecisionTree, ref: ChildRef) -> str:
    if ref[0] == "node":
        return f"go to Condition {ref[1]}"
    return f"respond {tree.leaves[ref[1]].label}"


def render_policy(tree: DecisionTree, name: str, mode: str) -> PolicyDoc:
    """Render ``tree`` as a policy document named ``name``.

    ``mode`` "T" renders every condition textually; "M" replaces visual-demo
    conditions with placeholder tokens recorded in ``visual_assets``. Each
    section asks whether the scene contains an object with the tested
    attribute and routes by identifier to another section or to a case.
    """
    if not name:
        raise ValueError("policy name must be non-empty")
    if mode not in ("T", "M"):
        raise ValueError(f"mode must be 'T' or 'M', got {mode!r}")

    seen_ids: set[int] = set()
    doc = PolicyDoc(name=name, mode=mode, depth=tree.depth)
    doc.body.append(
        f"POLICY {name} . Check the scene for the asked object , starting at "
        f"Condition 0 . Respond with exactly one case ."
    )
    for node in tree.nodes:
        if node.node_id in seen_ids:
            raise PolicyGenerationError(f"duplicate section identifier Condition {node.node_id}")
        seen_ids.add(node.node_id)
        cond = node.condition
        if mode == "M" and cond.presentation is Presentation.VISUAL_DEMO:
            placeholder = f"<demo_{len(doc.visual_assets)}>"
            doc.visual_assets[placeholder] = cond
            test = placeholder
        else:
            test = f"{cond.kind.value} {cond.value}"
        doc.body.append(
            f"Condition {node.node_id} : {test} ? "
            f"If yes , {_ref_phrase(tree, node.on_true)} . "
            f"If no , {_ref_phrase(tree, node.on_false)} ."
        )
    return doc


def save_policy(doc: PolicyDoc, tree: DecisionTree, stem: Path) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (body) and ``<stem>.json`` (sidecar metadata)."""
    txt = stem.with_suffix(".txt")
    meta = stem.with_suffix(".json")
    txt.write_text(doc.text + "\n", encoding="utf-8")
    meta.write_text(
        json.dumps(doc.metadata(tree), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return txt, meta


def load_policy(meta_path: Path) -> tuple[PolicyDoc, DecisionTree]:
    """Rebuild (doc, tree) from a sidecar metadata file."""
    meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    tree = DecisionTree.from_dict(meta["tree"])
    doc = render_policy(tree, meta["name"], meta["mode"])
    return doc, tree
