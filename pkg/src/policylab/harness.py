"""Training-stage orchestration, evaluation modes, and experiment grids.

Stages: masked continual pretraining on policy+reasoning sequences
(visual tokens excluded from the loss), supervised finetuning on either
direct answers or reasoning-plus-answer targets, and group-based RL.
During RL the policy-aware algorithm variants additionally sample G
responses with the policy prefix inserted, but every response — whatever
prompted it — is scored and differentiated under no-policy conditioning,
so training matches the internalized inference distribution.

Evaluation modes: ``internalized`` (no policy in the prompt),
``in_context`` (training policy prepended), ``override`` (a modified
policy prepended; answers re-derived from the override oracle).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .configio import ExperimentConfig, StageConfig
from .datagen import read_jsonl
from .model import (
    ModelConfig,
    Optimizer,
    TokenLossTerm,
    ToyModel,
    backward,
    backward_terms,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    _seq_logprob_batch,
)
from .render import render_policy
from .rewards import RewardBreakdown, parse_response, reward_clevr, reward_gta
from .rl import (
    ClipConfig,
    RolloutRecord,
    RolloutSource,
    build_group,
    dapo_dynamic_filter,
    merge_policy_rollouts,
    rl_objective,
)
from .scenes import Scene, trace
from .seeding import derive_seed
from .tools import (
    ToolCall,
    ToolCallError,
    ToolRuleSet,
    parse_tool_call,
    resolve_required_version,
    score_call,
)
from .trees import DecisionTree, resample_conditions
from .vocab import Vocab, build_vocab_from_texts

EVAL_MODES = ("internalized", "in_context", "override")

METRICS_COLUMNS = (
    "step", "stage", "loss", "reward_mean", "reward_std", "acc", "kl",
    "clip_frac", "groups_filtered", "early_stop", "wall_ms",
)

METHODS: dict[str, tuple[str, ...]] = {
    "direct_sft": ("sft_direct",),
    "cot_sft": ("sft_cot",),
    "cot_sft+grpo": ("sft_cot", "rl:grpo"),
    "cot_sft+dapo": ("sft_cot", "rl:dapo"),
    "cpt+cot_sft": ("cpt", "sft_cot"),
    "full+grpo": ("cpt", "sft_cot", "rl:grpo"),
    "full+dapo": ("cpt", "sft_cot", "rl:dapo"),
    "full+poro_grpo": ("cpt", "sft_cot", "rl:poro_grpo"),
    "full+poro_dapo": ("cpt", "sft_cot", "rl:poro_dapo"),
}


class HarnessError(Exception):
    pass


# ---------------------------------------------------------------------------
# task loading: decision-policy datasets and tool-call datasets
# ---------------------------------------------------------------------------


@dataclass
class ClevrTask:
    kind = "clevr"
    data_dir: Path
    manifest: dict
    train: list[dict]
    test: list[dict]
    vocab: Vocab
    trees: dict[str, DecisionTree]
    policy_tokens: dict[str, list[str]]
    outcomes: dict[str, list[str]]

    def prompt_tokens(self, record: dict, mode: str, override: dict | None = None) -> list[str]:
        if mode == "internalized":
            return list(record["tokens_without_policy"])
        if mode == "in_context":
            return list(record["tokens_with_policy"])
        if mode == "override":
            if override is None:
                raise HarnessError("override mode requires an override policy")
            return override["tokens"][record["policy_id"]] + list(record["tokens_without_policy"])
        raise HarnessError(f"unknown eval mode {mode!r}")

    def gold_answer(self, record: dict, mode: str, override: dict | None = None) -> str:
        if mode != "override":
            return record["answer"]
        tree = override["trees"][record["policy_id"]]
        return trace(tree, Scene.from_list(record["scene"])).outcome

    def reward(self, response: list[str], record: dict, format_weight: float) -> RewardBreakdown:
        return reward_clevr(parse_response(response), record["answer"], format_weight)

    def direct_target(self, record: dict) -> list[str]:
        return ["\\boxed{", *str(record["answer"]).split(), "}"]

    def make_override(self, seed: int) -> dict:
        tokens: dict[str, list[str]] = {}
        trees: dict[str, DecisionTree] = {}
        for pol in self.manifest["policies"]:
            name = pol["name"]
            new_tree = resample_conditions(self.trees[name], derive_seed(seed, "override", name))
            doc = render_policy(new_tree, name, pol["mode"])
            tokens[name] = doc.tokens()
            trees[name] = new_tree
        return {"tokens": tokens, "trees": trees}


@dataclass
class GtaTask:
    kind = "gta"
    data_dir: Path
    ruleset: ToolRuleSet
    train: list[dict]
    test: list[dict]
    vocab: Vocab
    rules_tokens: list[str] = field(default_factory=list)

    def prompt_tokens(self, record: dict, mode: str, override: dict | None = None) -> list[str]:
        base = _gta_prompt_tokens(record)
        if mode == "internalized":
            return base
        if mode == "in_context":
            return self.rules_tokens + base
        if mode == "override":
            if override is None:
                raise HarnessError("override mode requires an override rule set")
            return override["tokens"] + base
        raise HarnessError(f"unknown eval mode {mode!r}")

    def gold_call(self, record: dict, mode: str, override: dict | None = None) -> ToolCall:
        gold = ToolCall(name=record["gold_call"]["name"], arguments=record["gold_call"]["arguments"])
        if mode != "override":
            return gold
        ruleset: ToolRuleSet = override["ruleset"]
        base, _ = gold.split_name()
        version = resolve_required_version(ruleset, record["profile"], base)
        return ToolCall(name=f"{base}_{version}", arguments=gold.arguments)

    def gold_answer(self, record: dict, mode: str, override: dict | None = None) -> str:
        return _call_blob(self.gold_call(record, mode, override))

    def reward(self, response: list[str], record: dict, format_weight: float) -> RewardBreakdown:
        gold = ToolCall(name=record["gold_call"]["name"], arguments=record["gold_call"]["arguments"])
        return reward_gta(parse_response(response), gold, self.ruleset, format_weight)

    def direct_target(self, record: dict) -> list[str]:
        return ["\\boxed{", self.gold_answer(record, "internalized"), "}"]

    def cot_target(self, record: dict) -> list[str]:
        call = ToolCall(record["gold_call"]["name"], record["gold_call"]["arguments"])
        base, version = call.split_name()
        return ["<think>", "tool", base, "requires", version, ".", "</think>",
                "\\boxed{", _call_blob(call), "}"]

    def make_override(self, seed: int) -> dict:
        ruleset = _flip_rule_versions(self.ruleset)
        return {"ruleset": ruleset, "tokens": _ruleset_tokens(ruleset)}


def _call_blob(call: ToolCall) -> str:
    return json.dumps(call.to_dict(), separators=(",", ":"), sort_keys=True)


def _gta_prompt_tokens(record: dict) -> list[str]:
    toks = ["<profile>"]
    for key in sorted(record["profile"]):
        toks += [key, str(record["profile"][key])]
    toks.append("</profile>")
    toks += list(record["images"])
    toks.append("<history>")
    for entry in record["history"]:
        toks += str(entry).split()
        toks.append(";")
    toks.append("</history>")
    toks += str(record["query"]).split()
    toks += "Respond with one tool call . Which tool applies ?".split()
    return toks


def _ruleset_tokens(ruleset: ToolRuleSet) -> list[str]:
    lines = ["TOOLS :"]
    for t in ruleset.tools:
        arg_names = " ".join(n for n, _ in t.args)
        lines.append(f"{t.base_name} {t.version} : {t.description} . args : {arg_names} .")
    lines.append("RULES :")
    for r in ruleset.rules:
        pred = " and ".join(f"{k} = {v}" for k, v in sorted(r.predicate.items()))
        lines.append(f"if {pred} use {r.base_name} {r.version} .")
    lines.append("DEFAULTS :")
    for base in sorted(ruleset.defaults):
        lines.append(f"{base} defaults to {ruleset.defaults[base]} .")
    return " ".join(lines).split()


def _flip_rule_versions(ruleset: ToolRuleSet) -> ToolRuleSet:
    """Deterministically rotate every rule's required version."""
    versions_of: dict[str, list[str]] = {}
    for t in ruleset.tools:
        versions_of.setdefault(t.base_name, []).append(t.version)
    new_rules = []
    for r in ruleset.rules:
        versions = sorted(versions_of[r.base_name])
        idx = versions.index(r.version) if r.version in versions else 0
        new_rules.append(
            type(r)(r.base_name, dict(r.predicate), versions[(idx + 1) % len(versions)])
        )
    return ToolRuleSet(tools=list(ruleset.tools), rules=new_rules, defaults=dict(ruleset.defaults))


def load_task(data_dir: Path):
    data_dir = Path(data_dir)
    if (data_dir / "manifest.json").exists():
        manifest = json.loads((data_dir / "manifest.json").read_text(encoding="utf-8"))
        vocab = Vocab.load(data_dir / "vocab.json")
        if vocab.hash() != manifest["vocab_hash"]:
            raise HarnessError("dataset vocab.json does not match the manifest hash")
        trees = {p["name"]: DecisionTree.from_dict(p["tree"]) for p in manifest["policies"]}
        policy_tokens = {
            p["name"]: render_policy(trees[p["name"]], p["name"], p["mode"]).tokens()
            for p in manifest["policies"]
        }
        return ClevrTask(
            data_dir=data_dir,
            manifest=manifest,
            train=read_jsonl(data_dir / "train.jsonl"),
            test=read_jsonl(data_dir / "test.jsonl"),
            vocab=vocab,
            trees=trees,
            policy_tokens=policy_tokens,
            outcomes={p["name"]: list(p["outcomes"]) for p in manifest["policies"]},
        )
    if (data_dir / "ruleset.json").exists():
        ruleset = ToolRuleSet.load(data_dir / "ruleset.json")
        train = read_jsonl(data_dir / "train.jsonl")
        test_path = data_dir / "test.jsonl"
        test = read_jsonl(test_path) if test_path.exists() else []
        task = GtaTask(
            data_dir=data_dir, ruleset=ruleset, train=train, test=test,
            vocab=Vocab(tokens=["<pad>"], visual=[False]),  # replaced below
        )
        task.rules_tokens = _ruleset_tokens(ruleset)
        texts = [" ".join(task.rules_tokens)]
        override = task.make_override(0)
        texts.append(" ".join(override["tokens"]))
        for rec in train + test:
            texts.append(" ".join(_gta_prompt_tokens(rec)))
            texts.append(" ".join(task.cot_target(rec)))
            override_gold = task.gold_answer(rec, "override", override)
            texts.append(f"<think> </think> \\boxed{{ {override_gold} }}")
        task.vocab = build_vocab_from_texts(texts)
        return task
    raise HarnessError(f"no manifest.json or ruleset.json under {data_dir}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRICS_COLUMNS)

    def row(self, **values) -> None:
        unknown = set(values) - set(METRICS_COLUMNS)
        if unknown:
            raise HarnessError(f"unknown metrics columns: {sorted(unknown)}")
        self._writer.writerow([values.get(col, "") for col in METRICS_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class StageResult:
    checkpoint: Path
    metrics: Path
    steps_taken: int
    early_stop: bool


# ---------------------------------------------------------------------------
# supervised stages
# ---------------------------------------------------------------------------


def _supervised_items(task, cfg: StageConfig) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(prompt_ids, output_ids, loss_mask) per record for the cfg.stage."""
    records = task.train
    if cfg.opt.max_records > 0:
        records = records[: cfg.opt.max_records]
    encode = task.vocab.encode
    items = []
    for rec in records:
        if cfg.stage == "cpt":
            if task.kind == "clevr":
                seq = list(rec["tokens_with_policy"]) + list(rec["cot"])
                visual = list(rec["visual_mask"]) + [False] * len(rec["cot"])
            else:
                seq = task.rules_tokens + _gta_prompt_tokens(rec) + task.cot_target(rec)
                visual = [False] * len(seq)
                for i, t in enumerate(seq):
                    if t.startswith("<image_"):
                        visual[i] = True
            prompt = np.zeros(0, dtype=np.int64)
            output = np.array(encode(seq), dtype=np.int64)
            mask = ~np.array(visual, dtype=bool)
            if not mask.any():
                raise HarnessError("record has no unmasked tokens for pretraining")
        elif cfg.stage == "sft_cot":
            prompt = np.array(encode(task.prompt_tokens(rec, "internalized")), dtype=np.int64)
            target = rec["cot"] if task.kind == "clevr" else task.cot_target(rec)
            output = np.array(encode(list(target)), dtype=np.int64)
            mask = np.ones(len(output), dtype=bool)
        elif cfg.stage == "sft_direct":
            prompt = np.array(encode(task.prompt_tokens(rec, "internalized")), dtype=np.int64)
            output = np.array(encode(task.direct_target(rec)), dtype=np.int64)
            mask = np.ones(len(output), dtype=bool)
        else:
            raise HarnessError(f"not a supervised stage: {cfg.stage}")
        items.append((prompt, output, mask))
    return items


def _run_supervised(model: ToyModel, task, cfg: StageConfig, metrics: MetricsWriter) -> int:
    items = _supervised_items(task, cfg)
    opt = Optimizer(cfg.learning_rate, cfg.opt.optimizer)
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", cfg.stage))
    step = 0
    for epoch in range(cfg.opt.epochs):
        order = rng.permutation(len(items))
        for lo in range(0, len(order), cfg.opt.batch_size):
            batch = [items[i] for i in order[lo : lo + cfg.opt.batch_size]]
            t0 = time.perf_counter()
            terms = []
            for prompt, output, mask in batch:
                n_active = int(mask.sum())
                coeffs = np.where(mask, -1.0 / (n_active * len(batch)), 0.0)
                terms.append(TokenLossTerm(prompt=prompt, output=output, coeffs=coeffs))
            grad, loss = backward_terms(model, terms)
            opt.step(model, grad)
            step += 1
            metrics.row(
                step=step, stage=cfg.stage, loss=f"{loss:.10f}", early_stop=0,
                wall_ms=f"{(time.perf_counter() - t0) * 1000:.1f}",
            )
    return step




# ---------------------------------------------------------------------------
# rl stage
# ---------------------------------------------------------------------------


@dataclass
class _Rollout:
    record: dict
    prompt_ids: np.ndarray  # no-policy conditioning, used for all scoring
    group: object


def _score_logprobs(model: ToyModel, prompt_ids: np.ndarray, outputs: list[list[int]]):
    items = [(prompt_ids, np.array(o, dtype=np.int64)) for o in outputs]
    return _seq_logprob_batch(model, items)


def _run_rl(model: ToyModel, task, cfg: StageConfig, metrics: MetricsWriter):
    rl = cfg.rl
    poro = rl.algorithm.startswith("poro")
    dapo = "dapo" in rl.algorithm
    clip_cfg = ClipConfig(
        eps_low=rl.eps_low,
        eps_high=rl.eps_high,
        beta_kl=0.0 if dapo else rl.beta_kl,
        aggregation="token_mean" if dapo else "sequence_mean",
    )
    records = task.train
    if cfg.opt.max_records > 0:
        records = records[: cfg.opt.max_records]
    encode = task.vocab.encode
    opt = Optimizer(cfg.learning_rate, cfg.opt.optimizer)
    rng = np.random.default_rng(derive_seed(cfg.seed, "rl-prompts"))
    ref_model = model.copy() if clip_cfg.beta_kl > 0 else None

    steps_taken = 0
    early_stop = False
    for step in range(rl.steps):
        t0 = time.perf_counter()
        old_model = model.copy()
        draw_counter = [0]

        def draw_group() -> object:
            j = draw_counter[0]
            draw_counter[0] += 1
            rec = records[int(rng.integers(len(records)))]
            prompt_np = np.array(encode(task.prompt_tokens(rec, "internalized")), dtype=np.int64)
            seeds = [derive_seed(cfg.seed, "roll", step, j, g) for g in range(rl.group_size)]
            outs = sample_batch(old_model, [prompt_np] * rl.group_size,
                                rl.max_new_tokens, rl.temperature, seeds)
            sources = [RolloutSource.NO_POLICY] * rl.group_size
            if poro:
                prompt_pa = np.array(
                    encode(task.prompt_tokens(rec, "in_context")), dtype=np.int64
                )
                pa_seeds = [derive_seed(cfg.seed, "roll-pa", step, j, g)
                            for g in range(rl.group_size)]
                outs += sample_batch(old_model, [prompt_pa] * rl.group_size,
                                     rl.max_new_tokens, rl.temperature, pa_seeds)
                sources += [RolloutSource.POLICY_AWARE] * rl.group_size
            rewards = [
                task.reward(task.vocab.decode(o), rec, rl.format_weight) for o in outs
            ]
            # all log-probabilities are no-policy-conditioned, old and ref alike
            lp_old = _score_logprobs(old_model, prompt_np, outs)
            lp_ref = _score_logprobs(ref_model, prompt_np, outs) if ref_model else [None] * len(outs)
            rollouts = [
                RolloutRecord(
                    source=src, tokens=o, logprob_old=lo, logprob_new=lo.copy(),
                    reward=rw.total, logprob_ref=lr,
                )
                for src, o, lo, lr, rw in zip(sources, outs, lp_old, lp_ref, rewards)
            ]
            if poro:
                g = rl.group_size
                group = merge_policy_rollouts(
                    f"step{step}-{j}", rollouts[:g], rollouts[g:]
                )
            else:
                group = build_group(f"step{step}-{j}", rollouts)
            group._acc = float(np.mean([rw.acc for rw in rewards]))  # diagnostics only
            group._prompt_ids = prompt_np
            return group

        groups_filtered = 0
        if dapo:
            stream = iter(draw_group, object())  # infinite callable iterator
            result = dapo_dynamic_filter(stream, rl.rollout_batch, rl.max_retries)
            groups = result.groups
            groups_filtered = result.discarded
            if result.early_stop:
                early_stop = True
                metrics.row(
                    step=steps_taken + 1, stage="rl", groups_filtered=groups_filtered,
                    early_stop=1, wall_ms=f"{(time.perf_counter() - t0) * 1000:.1f}",
                )
                break
        else:
            groups = [draw_group() for _ in range(rl.rollout_batch)]

        loss_val = 0.0
        diag_acc: dict[str, float] = {"kl": 0.0, "clip_frac": 0.0}
        all_rewards: list[float] = []
        accs: list[float] = []
        for update in range(max(1, rl.updates_per_batch)):
            terms = []
            loss_val = 0.0
            diag_acc = {"kl": 0.0, "clip_frac": 0.0}
            all_rewards = []
            accs = []
            for group in groups:
                if update > 0:  # before the first update logprob_new == logprob_old
                    lp_new = _score_logprobs(model, group._prompt_ids,
                                             [r.tokens for r in group.records])
                    for rec_r, lp in zip(group.records, lp_new):
                        rec_r.logprob_new = lp
                obj = rl_objective(group, clip_cfg, rl.algorithm)
                loss_val += obj.loss / len(groups)
                diag_acc["kl"] += obj.diagnostics["kl"] / len(groups)
                diag_acc["clip_frac"] += obj.diagnostics["clip_frac"] / len(groups)
                all_rewards.extend(r.reward for r in group.records)
                accs.append(group._acc)
                for rec_r, g in zip(group.records, obj.logprob_grads):
                    terms.append(
                        TokenLossTerm(
                            prompt=group._prompt_ids,
                            output=np.array(rec_r.tokens, dtype=np.int64),
                            coeffs=g / len(groups),
                        )
                    )
            grad = backward(model, terms)
            opt.step(model, grad)

        steps_taken += 1
        rewards_arr = np.array(all_rewards)
        metrics.row(
            step=steps_taken, stage="rl", loss=f"{loss_val:.10f}",
            reward_mean=f"{rewards_arr.mean():.6f}", reward_std=f"{rewards_arr.std():.6f}",
            acc=f"{float(np.mean(accs)):.6f}", kl=f"{diag_acc['kl']:.10f}",
            clip_frac=f"{diag_acc['clip_frac']:.6f}", groups_filtered=groups_filtered,
            early_stop=0, wall_ms=f"{(time.perf_counter() - t0) * 1000:.1f}",
        )
    return steps_taken, early_stop


# ---------------------------------------------------------------------------
# stage driver
# ---------------------------------------------------------------------------


def run_stage(cfg: StageConfig, init_checkpoint: Path | None = None) -> StageResult:
    """Run one training stage; writes checkpoint.ckpt and metrics.csv."""
    cfg.validate()
    task = load_task(cfg.data)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    init_path = init_checkpoint or cfg.init
    if init_path is not None:
        model = load_checkpoint(init_path)
        if model.vocab.hash() != task.vocab.hash():
            raise HarnessError(
                "checkpoint vocabulary does not match the dataset vocabulary"
            )
    else:
        model = ToyModel(
            task.vocab,
            ModelConfig(
                k=cfg.model.window, d=cfg.model.embed, h=cfg.model.hidden,
                init_seed=derive_seed(cfg.seed, "init"),
            ),
        )

    metrics = MetricsWriter(out_dir / "metrics.csv")
    early_stop = False
    try:
        if cfg.stage == "rl":
            steps, early_stop = _run_rl(model, task, cfg, metrics)
        else:
            steps = _run_supervised(model, task, cfg, metrics)
    finally:
        metrics.close()

    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(model, ckpt)
    return StageResult(
        checkpoint=ckpt, metrics=out_dir / "metrics.csv",
        steps_taken=steps, early_stop=early_stop,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    kind: str
    n: int
    format_rate: float
    accuracy: float | None = None
    tool_acc: float | None = None
    arg_score: float | None = None
    overall: float | None = None
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


class OracleAgent:
    """Answers through the evaluation oracle; pipeline self-test agent."""

    def __init__(self, task, mode: str, override: dict | None = None):
        self.task = task
        self.mode = mode
        self.override = override

    def __call__(self, record: dict, prompt_tokens: list[str]) -> list[str]:
        answer = self.task.gold_answer(record, self.mode, self.override)
        return ["<think>", "oracle", "</think>", "\\boxed{", *str(answer).split(), "}"]


class RandomAnswerAgent:
    """Uniform guess over a policy's outcome labels; chance-level baseline."""

    def __init__(self, task, seed: int = 0):
        self.task = task
        self.seed = seed
        self._i = 0

    def __call__(self, record: dict, prompt_tokens: list[str]) -> list[str]:
        outcomes = self.task.outcomes[record["policy_id"]]
        rng = np.random.default_rng(derive_seed(self.seed, "guess", self._i))
        self._i += 1
        answer = outcomes[int(rng.integers(len(outcomes)))]
        return ["<think>", "guess", "</think>", "\\boxed{", *answer.split(), "}"]


def evaluate(
    model: ToyModel | None,
    task,
    mode: str,
    split: str = "test",
    override: dict | None = None,
    max_new_tokens: int = 64,
    limit: int = 0,
    agent=None,
    format_weight: float = 0.1,
    out_dir: Path | None = None,
) -> EvalReport:
    """Greedy evaluation of a checkpointed model (or a pluggable agent)."""
    if mode not in EVAL_MODES:
        raise HarnessError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    if mode == "override" and override is None:
        raise HarnessError("override mode requires an override policy document")
    records = task.test if split == "test" else task.train
    if limit > 0:
        records = records[:limit]
    if not records:
        raise HarnessError(f"no records in split {split!r}")

    t0 = time.perf_counter()
    prompts = [task.prompt_tokens(rec, mode, override) for rec in records]
    if agent is not None:
        responses = [agent(rec, prompt) for rec, prompt in zip(records, prompts)]
    else:
        if model is None:
            raise HarnessError("either a model or an agent is required")
        prompt_ids = [np.array(task.vocab.encode(p), dtype=np.int64) for p in prompts]
        outs = sample_batch(model, prompt_ids, max_new_tokens, 0.0, [0] * len(prompt_ids))
        responses = [task.vocab.decode(o) for o in outs]

    n = len(records)
    fmt_hits = 0
    if task.kind == "clevr":
        acc_hits = 0
        for rec, resp in zip(records, responses):
            parsed = parse_response(resp)
            fmt_hits += parsed.format_ok
            acc_hits += parsed.answer == task.gold_answer(rec, mode, override)
        report = EvalReport(
            mode=mode, kind=task.kind, n=n, format_rate=fmt_hits / n,
            accuracy=acc_hits / n, runtime_s=time.perf_counter() - t0,
        )
    else:
        tool_accs, arg_scores, overalls = [], [], []
        for rec, resp in zip(records, responses):
            parsed = parse_response(resp)
            fmt_hits += parsed.format_ok
            gold = task.gold_call(rec, mode, override)
            try:
                pred = parse_tool_call(parsed.answer)
                cs = score_call(pred, gold, task.ruleset)
                tool_accs.append(cs.tool_acc)
                arg_scores.append(cs.arg_score)
                overalls.append(cs.overall)
            except ToolCallError:
                tool_accs.append(0.0)
                arg_scores.append(0.0)
                overalls.append(0.0)
        report = EvalReport(
            mode=mode, kind=task.kind, n=n, format_rate=fmt_hits / n,
            tool_acc=float(np.mean(tool_accs)), arg_score=float(np.mean(arg_scores)),
            overall=float(np.mean(overalls)), runtime_s=time.perf_counter() - t0,
        )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"eval_{mode}.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        with open(out_dir / f"eval_prompts_{mode}.txt", "w", encoding="utf-8") as fh:
            for p in prompts:
                fh.write(" ".join(p) + "\n")
    return report


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------


def _stage_config(exp: ExperimentConfig, stage_spec: str, seed: int, out_dir: Path) -> StageConfig:
    if ":" in stage_spec:
        stage, algorithm = stage_spec.split(":", 1)
    else:
        stage, algorithm = stage_spec, exp.rl.algorithm
    opt = {"cpt": exp.cpt_opt, "sft_cot": exp.sft_opt, "sft_direct": exp.sft_opt,
           "rl": exp.rl_opt}[stage]
    cfg = StageConfig(
        stage=stage, seed=seed, data=exp.data, out=out_dir,
        model=exp.model, opt=opt, rl=replace(exp.rl, algorithm=algorithm),
    )
    cfg.validate()
    return cfg


def run_method(
    exp: ExperimentConfig, method: str, seed: int
) -> tuple[Path, dict]:
    """Run a method's stage chain for one seed; returns (checkpoint, info)."""
    if method not in METHODS:
        raise HarnessError(f"unknown method {method!r}; known: {sorted(METHODS)}")
    base = Path(exp.out) / method.replace("+", "_") / f"seed{seed}"
    ckpt: Path | None = None
    rl_steps = 0
    early_stop = False
    for stage_spec in METHODS[method]:
        stage_dir = base / stage_spec.replace(":", "_")
        cfg = _stage_config(exp, stage_spec, seed, stage_dir)
        result = run_stage(cfg, init_checkpoint=ckpt)
        ckpt = result.checkpoint
        if cfg.stage == "rl":
            rl_steps = result.steps_taken
            early_stop = result.early_stop
    assert ckpt is not None
    return ckpt, {"rl_steps": rl_steps, "early_stop": early_stop, "run_dir": base}


COMPARISON_COLUMNS = (
    "method", "seed", "accuracy", "tool_acc", "arg_score", "overall",
    "format_rate", "samples", "rl_steps", "early_stop", "error",
)


def compare_experiment(exp: ExperimentConfig) -> list[dict]:
    """Run every (method, seed) cell and emit a comparison CSV."""
    task = load_task(exp.data)
    rows: list[dict] = []
    for method in exp.methods:
        for seed in exp.seeds:
            row = {c: "" for c in COMPARISON_COLUMNS}
            row.update({"method": method, "seed": seed})
            try:
                ckpt, info = run_method(exp, method, seed)
                model = load_checkpoint(ckpt)
                report = evaluate(
                    model, task, "internalized",
                    max_new_tokens=exp.rl.max_new_tokens, limit=exp.eval_limit,
                    format_weight=exp.rl.format_weight,
                    out_dir=info["run_dir"],
                )
                row["samples"] = report.n
                row["format_rate"] = f"{report.format_rate:.6f}"
                if report.accuracy is not None:
                    row["accuracy"] = f"{report.accuracy:.6f}"
                if report.tool_acc is not None:
                    row["tool_acc"] = f"{report.tool_acc:.6f}"
                    row["arg_score"] = f"{report.arg_score:.6f}"
                    row["overall"] = f"{report.overall:.6f}"
                row["rl_steps"] = info["rl_steps"]
                row["early_stop"] = int(info["early_stop"])
            except Exception as exc:  # row-level failure keeps the table
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    rows.sort(key=lambda r: (str(r["method"]), int(r["seed"])))
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows
