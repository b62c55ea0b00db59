"""Group-based RL numerics: advantages, clipped surrogate, KL, filtering.

Rollout groups hold per-response output tokens, rewards, and per-token
log-probabilities. Log-probabilities are always conditioned WITHOUT the
policy prefix, for old and current parameters alike; sampling a response
with the policy in-context changes only which tokens were drawn. The
objective therefore optimizes exactly the distribution used at inference,
while policy-aware responses enrich the rollout group.

Algorithm variants: ``grpo`` (clipped surrogate + reference KL),
``dapo`` (asymmetric clip, no KL, token-mean aggregation, dynamic
sampling), and ``poro_grpo`` / ``poro_dapo`` which additionally require
merged no-policy + policy-aware groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

ALGORITHMS = ("grpo", "dapo", "poro_grpo", "poro_dapo")
ADVANTAGE_EPS = 1e-6


class RolloutSource(str, Enum):
    NO_POLICY = "no_policy"
    POLICY_AWARE = "policy_aware"


@dataclass
class RolloutRecord:
    source: RolloutSource
    tokens: list[int]
    logprob_old: np.ndarray  # no-policy-conditioned, old parameters
    logprob_new: np.ndarray  # no-policy-conditioned, current parameters
    reward: float
    logprob_ref: np.ndarray | None = None  # reference model; old params if None

    def __post_init__(self) -> None:
        self.logprob_old = np.asarray(self.logprob_old, dtype=np.float64)
        self.logprob_new = np.asarray(self.logprob_new, dtype=np.float64)
        if self.logprob_ref is not None:
            self.logprob_ref = np.asarray(self.logprob_ref, dtype=np.float64)
        n = len(self.tokens)
        if len(self.logprob_old) != n or len(self.logprob_new) != n:
            raise ValueError("log-probability arrays must match the token count")
        if self.logprob_ref is not None and len(self.logprob_ref) != n:
            raise ValueError("reference log-probabilities must match the token count")

    @property
    def ref(self) -> np.ndarray:
        return self.logprob_ref if self.logprob_ref is not None else self.logprob_old


@dataclass
class RolloutGroup:
    prompt_id: str
    records: list[RolloutRecord]
    advantages: np.ndarray | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=np.float64)


@dataclass
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.3
    beta_kl: float = 0.01
    aggregation: str = "sequence_mean"  # or "token_mean"

    def __post_init__(self) -> None:
        if not (0 < self.eps_low < 1 and 0 < self.eps_high < 1):
            raise ValueError("clip ranges must lie in (0, 1)")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")
        if self.aggregation not in ("sequence_mean", "token_mean"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


def group_advantages(rewards, eps: float = ADVANTAGE_EPS) -> np.ndarray:
    """Mean/std-normalized advantages (population std); all-equal -> zeros."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError("need at least 2 rewards for group normalization")
    mean = rewards.mean()
    std = rewards.std()
    return (rewards - mean) / (std + eps)


def build_group(prompt_id: str, records: list[RolloutRecord]) -> RolloutGroup:
    """Group the records and fill normalized advantages."""
    group = RolloutGroup(prompt_id=prompt_id, records=list(records))
    group.advantages = group_advantages(group.rewards)
    return group


def merge_policy_rollouts(
    prompt_id: str,
    no_policy: list[RolloutRecord],
    policy_aware: list[RolloutRecord],
) -> RolloutGroup:
    """Concatenate both rollout sets and normalize advantages jointly."""
    if not no_policy or not policy_aware:
        raise ValueError("both rollout sets must be non-empty")
    if len(no_policy) != len(policy_aware):
        raise ValueError("rollout sets must have equal size G")
    if any(r.source is not RolloutSource.NO_POLICY for r in no_policy):
        raise ValueError("no_policy set contains policy-aware records")
    if any(r.source is not RolloutSource.POLICY_AWARE for r in policy_aware):
        raise ValueError("policy_aware set contains no-policy records")
    return build_group(prompt_id, no_policy + policy_aware)


def clipped_surrogate(ratio: float, advantage: float, cfg: ClipConfig) -> float:
    """min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A)."""
    if ratio <= 0:
        raise ValueError("probability ratio must be positive")
    clipped = min(max(ratio, 1.0 - cfg.eps_low), 1.0 + cfg.eps_high)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty(logp_new: np.ndarray, logp_ref: np.ndarray) -> float:
    """Per-token k3 estimator exp(d) - d - 1 with d = ref - new, averaged."""
    logp_new = np.asarray(logp_new, dtype=np.float64)
    logp_ref = np.asarray(logp_ref, dtype=np.float64)
    if logp_new.shape != logp_ref.shape:
        raise ValueError("log-probability arrays must have equal length")
    delta = logp_ref - logp_new
    return float(np.mean(np.exp(delta) - delta - 1.0))


@dataclass
class RlObjective:
    loss: float
    # d(loss)/d(logprob_new) per record, aligned with group.records
    logprob_grads: list[np.ndarray]
    diagnostics: dict = field(default_factory=dict)


def _validate_group(group: RolloutGroup, algorithm: str) -> None:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if group.advantages is None or len(group.advantages) != len(group.records):
        raise ValueError("group advantages not filled")
    if not group.records:
        raise ValueError("empty rollout group")
    sources = {r.source for r in group.records}
    if algorithm.startswith("poro"):
        if sources != {RolloutSource.NO_POLICY, RolloutSource.POLICY_AWARE}:
            raise ValueError(f"{algorithm} requires both rollout sources in the group")
    elif RolloutSource.POLICY_AWARE in sources:
        raise ValueError(f"{algorithm} group contains policy-aware records")


def rl_objective(group: RolloutGroup, cfg: ClipConfig, algorithm: str) -> RlObjective:
    """Loss, exact per-token loss gradients w.r.t. logprob_new, diagnostics.

    Every record contributes through its no-policy-conditioned
    log-probabilities; dapo variants drop the reference KL entirely.
    """
    _validate_group(group, algorithm)
    beta = 0.0 if "dapo" in algorithm else cfg.beta_kl

    n = len(group.records)
    total_tokens = sum(len(r.tokens) for r in group.records)
    if total_tokens == 0:
        raise ValueError("group has no output tokens")

    surrogate = 0.0
    kl_total = 0.0
    clipped_tokens = 0
    ratio_sum = 0.0
    grads: list[np.ndarray] = []

    for rec, adv in zip(group.records, group.advantages):
        t_i = len(rec.tokens)
        if t_i == 0:
            grads.append(np.zeros(0, dtype=np.float64))
            continue
        if cfg.aggregation == "sequence_mean":
            w = 1.0 / (n * t_i)
        else:
            w = 1.0 / total_tokens
        ratio = np.exp(rec.logprob_new - rec.logprob_old)
        clipped = np.clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
        s_plain = ratio * adv
        s_clip = clipped * adv
        take_plain = s_plain <= s_clip
        terms = np.where(take_plain, s_plain, s_clip)
        surrogate += w * terms.sum()
        clipped_tokens += int((~take_plain).sum())
        ratio_sum += float(ratio.sum())

        grad = -w * np.where(take_plain, ratio * adv, 0.0)
        if beta > 0.0:
            delta = rec.ref - rec.logprob_new
            kl_total += w * float(np.sum(np.exp(delta) - delta - 1.0))
            grad += beta * w * (1.0 - np.exp(delta))
        grads.append(grad)

    loss = -(surrogate - beta * kl_total)
    rewards = group.rewards
    diagnostics = {
        "surrogate": surrogate,
        "kl": kl_total,
        "beta_kl": beta,
        "clip_frac": clipped_tokens / total_tokens,
        "mean_ratio": ratio_sum / total_tokens,
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "n_records": n,
        "n_tokens": total_tokens,
    }
    return RlObjective(loss=float(loss), logprob_grads=grads, diagnostics=diagnostics)


@dataclass
class FilterResult:
    groups: list[RolloutGroup]
    early_stop: bool
    discarded: int


def dapo_dynamic_filter(
    candidates: Iterator[RolloutGroup], needed: int, max_retries: int
) -> FilterResult:
    """Keep drawing groups until ``needed`` have nonzero reward variance.

    A drawn group whose rewards are all equal is discarded and consumes one
    retry; once ``max_retries`` groups have been discarded (or the stream is
    exhausted) before the quota is met, early_stop is set.
    """
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    kept: list[RolloutGroup] = []
    discarded = 0
    while len(kept) < needed and discarded < max_retries:
        try:
            group = next(candidates)
        except StopIteration:
            break
        if group.rewards.std() > 0.0:
            kept.append(group)
        else:
            discarded += 1
    return FilterResult(groups=kept, early_stop=len(kept) < needed, discarded=discarded)
