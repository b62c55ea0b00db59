"""Dataset emission: JSONL records pairing scenes with oracle answers.

Records are generated independently with per-record derived seeds
(blake2b of run seed, policy id, and global record index) and written in
index order, so output bytes are identical regardless of worker count.

With balancing on, outcomes are assigned round-robin over the policy's
*reachable* leaves and scenes are rejection-sampled (capped at 10,000
draws per record) from a proposal guided by the target path's
constraints: objects never carry a value denied by a FALSE edge, and each
TRUE edge's value is planted on a randomly chosen object. Every candidate
is still verified against the oracle before acceptance. A leaf is
unreachable when its path denies a value it also requires, denies every
value of some attribute kind, or needs more distinct objects than the
scene size allows; such leaves get frequency zero.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ontology import ATTRIBUTE_VALUES, AttrKind
from .render import PolicyDoc, render_policy
from .scenes import (
    OBJECT_TOKEN_ORDER,
    Scene,
    SceneObject,
    _draw_scene,
    eval_condition,
    synth_cot,
    trace,
)
from .trees import ChildRef, DecisionTree, enumerate_outcomes, sample_decision_tree
from .seeding import derive_seed
from .vocab import build_vocab

QUERY_TEMPLATE = "Follow policy {name} . Which case applies ?"

REJECTION_CAP = 10_000


class BalanceError(Exception):
    """Rejection sampling exhausted its retry cap for some outcome."""


@dataclass
class PolicyBundle:
    doc: PolicyDoc
    tree: DecisionTree

    def __post_init__(self) -> None:
        self._policy_tokens = self.doc.tokens()
        self._pc_cache: dict[int, "PathConstraints"] = {}

    @property
    def name(self) -> str:
        return self.doc.name

    @property
    def policy_tokens(self) -> list[str]:
        return self._policy_tokens

    def constraints_for(self, leaf_id: int) -> "PathConstraints":
        pc = self._pc_cache.get(leaf_id)
        if pc is None:
            pc = self._pc_cache[leaf_id] = path_constraints(self.tree, leaf_id)
        return pc


def make_policies(
    n: int, depth: int, mode: str, rng_seed: int, constraint: str = "parent"
) -> list[PolicyBundle]:
    """Sample n policies with distinct names and derived seeds."""
    bundles = []
    for k in range(n):
        tree = sample_decision_tree(depth, mode, derive_seed(rng_seed, "tree", k), constraint)
        doc = render_policy(tree, f"policy_{k}", mode)
        bundles.append(PolicyBundle(doc=doc, tree=tree))
    return bundles


# ---------------------------------------------------------------------------
# path constraints and leaf reachability
# ---------------------------------------------------------------------------


@dataclass
class PathConstraints:
    required: dict[AttrKind, list[str]]  # values some object must carry
    denied: dict[AttrKind, set[str]]  # values no object may carry
    contradiction: bool

    def min_objects_needed(self) -> int:
        return max((len(v) for v in self.required.values()), default=0)


def path_constraints(tree: DecisionTree, leaf_id: int) -> PathConstraints:
    """Existence constraints along the root-to-leaf path."""
    path: list[tuple] = []

    def find(ref: ChildRef, acc: list) -> bool:
        if ref[0] == "leaf":
            if ref[1] == leaf_id:
                path.extend(acc)
                return True
            return False
        node = tree.nodes[ref[1]]
        if find(node.on_true, acc + [(node.condition, True)]):
            return True
        return find(node.on_false, acc + [(node.condition, False)])

    if not find(tree.root, []):
        raise ValueError(f"leaf {leaf_id} not in tree")

    required: dict[AttrKind, list[str]] = {}
    denied: dict[AttrKind, set[str]] = {}
    contradiction = False
    for cond, verdict in path:
        if verdict:
            vals = required.setdefault(cond.kind, [])
            if cond.value not in vals:
                vals.append(cond.value)
        else:
            denied.setdefault(cond.kind, set()).add(cond.value)
    for kind, vals in required.items():
        if denied.get(kind, set()) & set(vals):
            contradiction = True
    for kind, vals in denied.items():
        if len(vals) >= len(ATTRIBUTE_VALUES[kind]):
            contradiction = True
    return PathConstraints(required=required, denied=denied, contradiction=contradiction)


def reachable_leaves(tree: DecisionTree, min_objects: int, max_objects: int) -> list[int]:
    """Leaf ids whose path predicate some legal scene can satisfy."""
    out = []
    for leaf in tree.leaves:
        pc = path_constraints(tree, leaf.leaf_id)
        if not pc.contradiction and pc.min_objects_needed() <= max_objects:
            out.append(leaf.leaf_id)
    return out


def _guided_scene(
    rng: np.random.Generator, pc: PathConstraints, min_objects: int, max_objects: int
) -> Scene:
    lo = max(min_objects, pc.min_objects_needed())
    count = int(rng.integers(lo, max_objects + 1))
    allowed = {
        kind: [v for v in ATTRIBUTE_VALUES[kind] if v not in pc.denied.get(kind, set())]
        for kind in OBJECT_TOKEN_ORDER
    }
    attrs = []
    for _ in range(count):
        attrs.append(
            {k.value: allowed[k][rng.integers(len(allowed[k]))] for k in OBJECT_TOKEN_ORDER}
        )
    for kind in OBJECT_TOKEN_ORDER:  # fixed kind order keeps the stream stable
        values = pc.required.get(kind)
        if not values:
            continue
        slots = rng.permutation(count)[: len(values)]
        for slot, value in zip(slots, values):
            attrs[int(slot)][kind.value] = value
    return Scene([SceneObject(**a) for a in attrs])


def _leaf_label(tree: DecisionTree, scene: Scene) -> str:
    ref = tree.root
    while ref[0] == "node":
        node = tree.nodes[ref[1]]
        ref = node.on_true if eval_condition(scene, node.condition) else node.on_false
    return tree.leaves[ref[1]].label


def _sample_record_scene(
    bundle: PolicyBundle,
    rng: np.random.Generator,
    min_objects: int,
    max_objects: int,
    target_leaf: int | None,
    excluded_canons: frozenset[str],
) -> Scene:
    tree = bundle.tree
    pc = bundle.constraints_for(target_leaf) if target_leaf is not None else None
    target_label = tree.leaves[target_leaf].label if target_leaf is not None else None
    for _ in range(REJECTION_CAP):
        if pc is not None:
            scene = _guided_scene(rng, pc, min_objects, max_objects)
        else:
            scene = _draw_scene(rng, min_objects, max_objects)
        if target_label is not None and _leaf_label(tree, scene) != target_label:
            continue
        if scene.canonical() in excluded_canons:
            continue
        return scene
    label = target_label if target_label is not None else "any"
    raise BalanceError(f"no qualifying scene for outcome {label!r} in {REJECTION_CAP} draws")


# ---------------------------------------------------------------------------
# record assembly
# ---------------------------------------------------------------------------


def build_record(
    bundle: PolicyBundle,
    run_seed: int,
    index: int,
    min_objects: int,
    max_objects: int,
    target_leaf: int | None,
    excluded_canons: frozenset[str] = frozenset(),
) -> dict:
    """One dataset record; pure function of its arguments."""
    rng = np.random.default_rng(derive_seed(run_seed, bundle.name, index))
    scene = _sample_record_scene(
        bundle, rng, min_objects, max_objects, target_leaf, excluded_canons
    )
    tr = trace(bundle.tree, scene, policy_name=bundle.name)
    query = QUERY_TEMPLATE.format(name=bundle.name)
    policy_toks = bundle.policy_tokens
    scene_toks = scene.tokens()
    query_toks = query.split()
    without = scene_toks + query_toks
    with_policy = policy_toks + without
    demo_tokens = set(bundle.doc.visual_assets)
    mask = [t in demo_tokens for t in policy_toks]
    mask += [True] * len(scene_toks)
    mask += [False] * len(query_toks)
    return {
        "policy_id": bundle.name,
        "scene": scene.to_list(),
        "query": query,
        "tokens_with_policy": with_policy,
        "tokens_without_policy": without,
        "visual_mask": mask,
        "cot": synth_cot(tr, bundle.doc),
        "answer": tr.outcome,
    }


def _records_for_range(
    tree_dict: dict,
    name: str,
    mode: str,
    run_seed: int,
    indices: list[int],
    targets: list[int | None],
    min_objects: int,
    max_objects: int,
    excluded_canons: frozenset[str],
) -> list[dict]:
    tree = DecisionTree.from_dict(tree_dict)
    bundle = PolicyBundle(doc=render_policy(tree, name, mode), tree=tree)
    return [
        build_record(bundle, run_seed, idx, min_objects, max_objects, tgt, excluded_canons)
        for idx, tgt in zip(indices, targets)
    ]


def _generate_split(
    bundle: PolicyBundle,
    run_seed: int,
    start_index: int,
    count: int,
    balance: bool,
    min_objects: int,
    max_objects: int,
    excluded_canons: frozenset[str],
    workers: int,
) -> list[dict]:
    if balance:
        reachable = reachable_leaves(bundle.tree, min_objects, max_objects)
        if not reachable:
            raise BalanceError(f"policy {bundle.name!r} has no reachable outcomes")
        targets: list[int | None] = [reachable[i % len(reachable)] for i in range(count)]
    else:
        targets = [None] * count
    indices = list(range(start_index, start_index + count))
    if workers <= 1 or count < 2 * workers:
        return _records_for_range(
            bundle.tree.to_dict(), bundle.name, bundle.doc.mode, run_seed,
            indices, targets, min_objects, max_objects, excluded_canons,
        )
    chunks = np.array_split(np.arange(count), workers)
    futures = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk in chunks:
            if len(chunk) == 0:
                continue
            futures.append(
                pool.submit(
                    _records_for_range,
                    bundle.tree.to_dict(), bundle.name, bundle.doc.mode, run_seed,
                    [indices[i] for i in chunk], [targets[i] for i in chunk],
                    min_objects, max_objects, excluded_canons,
                )
            )
        parts = [f.result() for f in futures]
    return [rec for part in parts for rec in part]


def gen_dataset(
    policies: list[PolicyBundle],
    per_policy_train: int,
    per_policy_test: int,
    balance: bool,
    rng_seed: int,
    out_dir: Path,
    min_objects: int = 3,
    max_objects: int = 10,
    workers: int = 1,
) -> dict:
    """Emit train/test JSONL files, a vocabulary, and a manifest.

    Train and test scenes are disjoint per policy (by canonical scene
    serialization). Returns the manifest dict.
    """
    if not policies:
        raise ValueError("need at least one policy")
    if per_policy_train < 1 or per_policy_test < 0:
        raise ValueError("per-policy counts must be >= 1 train / >= 0 test")
    names = [b.name for b in policies]
    if len(set(names)) != len(names):
        raise ValueError("policy names must be unique within a dataset run")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records: list[dict] = []
    test_records: list[dict] = []
    for bundle in policies:
        train_part = _generate_split(
            bundle, rng_seed, 0, per_policy_train, balance,
            min_objects, max_objects, frozenset(), workers,
        )
        canons = frozenset(
            Scene.from_list(rec["scene"]).canonical() for rec in train_part
        )
        test_part = _generate_split(
            bundle, rng_seed, per_policy_train, per_policy_test, balance,
            min_objects, max_objects, canons, workers,
        )
        train_records.extend(train_part)
        test_records.extend(test_part)

    train_path = out_dir / "train.jsonl"
    test_path = out_dir / "test.jsonl"
    write_jsonl(train_path, train_records)
    write_jsonl(test_path, test_records)

    vocab = build_vocab([train_path] + ([test_path] if test_records else []))
    vocab.save(out_dir / "vocab.json")

    manifest = {
        "format_version": 1,
        "run_seed": rng_seed,
        "per_policy_train": per_policy_train,
        "per_policy_test": per_policy_test,
        "balance": bool(balance),
        "min_objects": min_objects,
        "max_objects": max_objects,
        "query_template": QUERY_TEMPLATE,
        "counts": {"train": len(train_records), "test": len(test_records)},
        "policies": [
            {
                "name": b.name,
                "mode": b.doc.mode,
                "depth": b.tree.depth,
                "constraint": b.tree.constraint,
                "outcomes": enumerate_outcomes(b.tree),
                "reachable_outcomes": [
                    b.tree.leaves[i].label
                    for i in reachable_leaves(b.tree, min_objects, max_objects)
                ],
                "tree": b.tree.to_dict(),
            }
            for b in policies
        ],
        "vocab_hash": vocab.hash(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class PromptStats:
    n_records: int
    mean_with_policy: float
    mean_without_policy: float
    reduction: float


def prompt_stats(dataset_file: Path) -> PromptStats:
    """Mean prompt-token counts with/without the policy prefix.

    reduction = 1 - mean(without) / mean(with), exact over the file.
    """
    records = read_jsonl(dataset_file)
    if not records:
        raise ValueError(f"empty dataset file: {dataset_file}")
    with_lens = [len(r["tokens_with_policy"]) for r in records]
    without_lens = [len(r["tokens_without_policy"]) for r in records]
    mean_with = sum(with_lens) / len(records)
    mean_without = sum(without_lens) / len(records)
    return PromptStats(
        n_records=len(records),
        mean_with_policy=mean_with,
        mean_without_policy=mean_without,
        reduction=1.0 - mean_without / mean_with,
    )
