"""Versioned tool schemas, user-conditional rules, and tool-call scoring.

A rule set pairs tool specs (base name, version, argument metric kinds)
with ordered user-conditional rules: the first rule whose profile
predicate matches decides which version of a tool must be called,
otherwise the per-tool default applies. Predicted calls are scored as
0.5 * exact-name accuracy + 0.5 * mean per-argument score, where each
argument is scored by the metric kind assigned to its name.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exprcalc import ExpressionError, eval_expression

# default argument-name -> metric-kind table; shipped as data in rule-set files
METRIC_KINDS: dict[str, tuple[str, ...]] = {
    "exact": ("position", "color", "image", "k", "top1"),
    "text": ("attribute", "text", "query", "command", "annotation", "keywords", "instruction"),
    "expression": ("expression",),
    "bbox": ("bbox",),
}

_KIND_BY_ARG = {name: kind for kind, names in METRIC_KINDS.items() for name in names}


class ToolCallError(Exception):
    pass


@dataclass(frozen=True)
class ToolSpec:
    base_name: str
    version: str
    description: str
    args: tuple[tuple[str, str], ...]  # (arg name, metric kind)

    @property
    def full_name(self) -> str:
        return f"{self.base_name}_{self.version}"


@dataclass(frozen=True)
class Rule:
    base_name: str
    predicate: dict  # conjunction of profile-attribute equality tests
    version: str

    def matches(self, profile: dict) -> bool:
        return all(profile.get(k) == v for k, v in self.predicate.items())


@dataclass
class ToolRuleSet:
    tools: list[ToolSpec]
    rules: list[Rule]
    defaults: dict[str, str]

    def __post_init__(self) -> None:
        keys = [(t.base_name, t.version) for t in self.tools]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (base_name, version) in tool specs")
        for rule in self.rules:
            if rule.base_name not in self.defaults:
                raise ValueError(f"rule references {rule.base_name!r} with no default version")

    def spec_for(self, full_name: str) -> ToolSpec:
        for t in self.tools:
            if t.full_name == full_name:
                return t
        raise ToolCallError(f"unknown tool {full_name!r}")

    def to_dict(self) -> dict:
        return {
            "tools": [
                {
                    "base": t.base_name,
                    "version": t.version,
                    "description": t.description,
                    "args": [{"name": n, "kind": k} for n, k in t.args],
                }
                for t in self.tools
            ],
            "rules": [
                {"base": r.base_name, "predicate": r.predicate, "version": r.version}
                for r in self.rules
            ],
            "defaults": dict(self.defaults),
            "metric_kinds": {k: list(v) for k, v in METRIC_KINDS.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolRuleSet":
        return cls(
            tools=[
                ToolSpec(
                    base_name=t["base"],
                    version=t["version"],
                    description=t.get("description", ""),
                    args=tuple((a["name"], a["kind"]) for a in t["args"]),
                )
                for t in d["tools"]
            ],
            rules=[Rule(r["base"], dict(r["predicate"]), r["version"]) for r in d["rules"]],
            defaults=dict(d["defaults"]),
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "ToolRuleSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ToolCall:
    name: str  # "base_vX"
    arguments: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "arguments": self.arguments}

    def split_name(self) -> tuple[str, str]:
        base, _, version = self.name.rpartition("_")
        if not base or not version.startswith("v"):
            raise ToolCallError(f"tool name {self.name!r} has no version suffix")
        return base, version


@dataclass
class CallScore:
    tool_acc: float
    per_arg: dict[str, float] = field(default_factory=dict)

    @property
    def arg_score(self) -> float:
        if not self.per_arg:
            return 1.0
        return sum(self.per_arg.values()) / len(self.per_arg)

    @property
    def overall(self) -> float:
        return 0.5 * self.tool_acc + 0.5 * self.arg_score


def parse_tool_call(text: str) -> ToolCall:
    """Extract the first well-formed JSON object with "name" and "arguments".

    Raises ToolCallError when no such object exists (parse error) or the
    first parseable object is missing the required fields (schema error).
    """
    decoder = json.JSONDecoder()
    start = text.find("{")
    found_object = False
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except ValueError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            found_object = True
            if "name" in obj and "arguments" in obj:
                args = obj["arguments"]
                if not isinstance(args, dict):
                    raise ToolCallError("'arguments' must be a JSON object")
                return ToolCall(name=str(obj["name"]), arguments=args)
        start = text.find("{", start + 1)
    if found_object:
        raise ToolCallError("JSON object lacks 'name'/'arguments' fields")
    raise ToolCallError("no JSON tool call found")


def resolve_required_version(rules: ToolRuleSet, profile: dict, base_name: str) -> str:
    """First matching rule (in listed order) wins; otherwise the default."""
    if base_name not in rules.defaults:
        raise ToolCallError(f"unknown tool base name {base_name!r}")
    for rule in rules.rules:
        if rule.base_name == base_name and rule.matches(profile):
            return rule.version
    return rules.defaults[base_name]


# ---------------------------------------------------------------------------
# per-argument metrics
# ---------------------------------------------------------------------------

_PUNCT = str.maketrans("", "", r"""!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~""")


def text_similarity(a: str, b: str) -> float:
    """Token-level F1 after lowercasing and punctuation stripping."""
    ta = str(a).lower().translate(_PUNCT).split()
    tb = str(b).lower().translate(_PUNCT).split()
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    overlap = 0
    counts: dict[str, int] = {}
    for t in tb:
        counts[t] = counts.get(t, 0) + 1
    for t in ta:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(ta)
    recall = overlap / len(tb)
    return 2 * precision * recall / (precision + recall)


def bbox_iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    try:
        ax1, ay1, ax2, ay2 = (float(v) for v in a)
        bx1, by1, bx2, by2 = (float(v) for v in b)
    except (TypeError, ValueError):
        warnings.warn("malformed bounding box scored as 0")
        return 0.0
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        warnings.warn("degenerate bounding box scored as 0")
        return 0.0
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _exact_match(pred, gold) -> float:
    return 1.0 if pred == gold or str(pred) == str(gold) else 0.0


def _expression_match(pred, gold, tol: float = 1e-6) -> float:
    try:
        return 1.0 if abs(eval_expression(pred) - eval_expression(gold)) <= tol else 0.0
    except ExpressionError:
        return 0.0


def score_argument(kind: str, pred, gold) -> float:
    if kind == "exact":
        return _exact_match(pred, gold)
    if kind == "text":
        return text_similarity(pred, gold)
    if kind == "expression":
        return _expression_match(pred, gold)
    if kind == "bbox":
        return bbox_iou(pred, gold)
    raise ToolCallError(f"unknown metric kind {kind!r}")


def score_call(pred: ToolCall, gold: ToolCall, specs: ToolRuleSet) -> CallScore:
    """Score a predicted call against gold: exact-name accuracy + arg scores.

    Missing predicted arguments score 0; extra predicted arguments are
    ignored. Argument metric kinds come from the gold tool's spec.
    """
    spec = specs.spec_for(gold.name)
    kind_of = dict(spec.args)
    tool_acc = 1.0 if pred.name == gold.name else 0.0
    per_arg: dict[str, float] = {}
    for arg_name, gold_value in gold.arguments.items():
        kind = kind_of.get(arg_name, _KIND_BY_ARG.get(arg_name))
        if kind is None:
            raise ToolCallError(f"gold argument {arg_name!r} has no metric kind")
        if arg_name not in pred.arguments:
            per_arg[arg_name] = 0.0
        else:
            per_arg[arg_name] = score_argument(kind, pred.arguments[arg_name], gold_value)
    return CallScore(tool_acc=tool_acc, per_arg=per_arg)


# ---------------------------------------------------------------------------
# synthetic rule-set and record generation
# ---------------------------------------------------------------------------

_TOOL_NAME_POOL = (
    "OCR", "ImageDescription", "RegionAttribute", "TextToBbox", "DrawBox",
    "AddText", "GoogleSearch", "Calculator", "Plot", "MathOCR",
    "CountGivenObject", "ImageStylization", "PathPlanning",
)
_PROFILE_ATTRS = {
    "premium": (True, False),
    "region": ("us", "eu", "apac"),
    "tier": ("free", "pro", "enterprise"),
    "beta_opt_in": (True, False),
}
_ARG_NAME_POOL = tuple(_KIND_BY_ARG)
_QUERY_NOUNS = ("receipt", "poster", "chart", "street sign", "menu", "screenshot",
                "invoice", "diagram", "photo", "whiteboard")
_QUERY_VERBS = ("read", "describe", "locate", "count", "compare", "summarize")


def _rand_choice(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _rand_arg_value(rng: np.random.Generator, kind: str):
    if kind == "exact":
        return _rand_choice(rng, ("top-left", "center", "red", "blue", "image1.jpg",
                                  "image2.jpg", "3", "5", "dog", "car"))
    if kind == "text":
        return f"{_rand_choice(rng, _QUERY_VERBS)} the {_rand_choice(rng, _QUERY_NOUNS)}"
    if kind == "expression":
        a, b, c = (int(rng.integers(1, 20)) for _ in range(3))
        op1, op2 = _rand_choice(rng, ("+", "-", "*")), _rand_choice(rng, ("+", "*"))
        return f"{a} {op1} {b} {op2} {c}"
    if kind == "bbox":
        x1, y1 = int(rng.integers(0, 200)), int(rng.integers(0, 200))
        return [x1, y1, x1 + int(rng.integers(10, 120)), y1 + int(rng.integers(10, 120))]
    raise ToolCallError(f"unknown metric kind {kind!r}")


def gen_ruleset(rng: np.random.Generator, n_tools: int, n_rules: int) -> ToolRuleSet:
    """Synthesize versioned tool specs and user-conditional rules."""
    if n_tools < 1:
        raise ValueError("need at least one tool")
    tools: list[ToolSpec] = []
    defaults: dict[str, str] = {}
    base_names = []
    for i in range(n_tools):
        base = _TOOL_NAME_POOL[i] if i < len(_TOOL_NAME_POOL) else f"Tool{i}"
        base_names.append(base)
        n_versions = 2 + int(rng.integers(2))  # 2 or 3 versions
        n_args = 1 + int(rng.integers(3))
        arg_names = sorted(
            {_rand_choice(rng, _ARG_NAME_POOL) for _ in range(n_args)} or {"text"}
        )
        args = tuple((name, _KIND_BY_ARG[name]) for name in arg_names)
        for v in range(1, n_versions + 1):
            tools.append(
                ToolSpec(
                    base_name=base,
                    version=f"v{v}",
                    description=f"{base} tool, revision {v}",
                    args=args,
                )
            )
        defaults[base] = "v1"

    versions_of: dict[str, list[str]] = {}
    for t in tools:
        versions_of.setdefault(t.base_name, []).append(t.version)
    rules: list[Rule] = []
    for _ in range(n_rules):
        base = _rand_choice(rng, base_names)
        attr = _rand_choice(rng, sorted(_PROFILE_ATTRS))
        value = _rand_choice(rng, _PROFILE_ATTRS[attr])
        version = _rand_choice(rng, versions_of[base])
        rules.append(Rule(base_name=base, predicate={attr: value}, version=version))

    return ToolRuleSet(tools=tools, rules=rules, defaults=defaults)


def gen_gta_records(ruleset: ToolRuleSet, rng: np.random.Generator, n_records: int) -> list[dict]:
    """Single-turn tool-call records whose gold version obeys rule resolution."""
    base_names = sorted(ruleset.defaults)
    records: list[dict] = []
    for _ in range(n_records):
        profile = {
            attr: _rand_choice(rng, _PROFILE_ATTRS[attr]) for attr in sorted(_PROFILE_ATTRS)
        }
        base = _rand_choice(rng, base_names)
        version = resolve_required_version(ruleset, profile, base)
        spec = ruleset.spec_for(f"{base}_{version}")
        gold = ToolCall(
            name=spec.full_name,
            arguments={name: _rand_arg_value(rng, kind) for name, kind in spec.args},
        )
        n_images = 1 + int(rng.integers(2))
        history_len = int(rng.integers(3))
        records.append(
            {
                "profile": profile,
                "query": f"please {_rand_choice(rng, _QUERY_VERBS)} the "
                         f"{_rand_choice(rng, _QUERY_NOUNS)} in the image",
                "history": [
                    f"called {_rand_choice(rng, base_names)} and got result {int(rng.integers(100))}"
                    for _ in range(history_len)
                ],
                "images": [f"<image_{k}>" for k in range(n_images)],
                "gold_call": gold.to_dict(),
            }
        )
    return records


def write_gta_records(records: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def gen_gta_like(
    rng_seed: int,
    n_tools: int,
    n_rules: int,
    n_records: int,
    out_dir: Path,
    records_name: str = "records.jsonl",
    n_test_records: int = 0,
) -> tuple[ToolRuleSet, list[dict]]:
    """Synthesize a rule set plus tool-call records and write them out.

    Every record's gold call uses the version required by rule resolution
    on the record's user profile. Writes ``ruleset.json``, the records
    JSONL, and (when requested) a ``test.jsonl`` drawn from the same rule
    set but an independent stream. Deterministic given the seed.
    """
    rng = np.random.default_rng(rng_seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ruleset = gen_ruleset(rng, n_tools, n_rules)
    ruleset.save(out_dir / "ruleset.json")
    records = gen_gta_records(ruleset, rng, n_records)
    write_gta_records(records, out_dir / records_name)
    if n_test_records > 0:
        test_rng = np.random.default_rng(rng_seed + 1_000_003)
        write_gta_records(
            gen_gta_records(ruleset, test_rng, n_test_records), out_dir / "test.jsonl"
        )
    return ruleset, records
