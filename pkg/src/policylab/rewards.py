"""Response-format parsing, accuracy/format rewards, and supervised losses.

Responses follow the think/boxed contract: one reasoning block inside
``<think>``/``</think>`` followed by one answer inside ``\\boxed{...}``.
Accuracy and format are scored independently; the combined reward is
``acc + format_weight * format``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tools import ToolCall, ToolCallError, ToolRuleSet, parse_tool_call, score_call
from .vocab import BOXED_OPEN, THINK_CLOSE, THINK_OPEN

DEFAULT_FORMAT_WEIGHT = 0.1


@dataclass
class ParsedResponse:
    think: str
    answer: str
    format_ok: bool


def _first_boxed_span(text: str) -> tuple[int, int] | None:
    """(start, end) of the first balanced \\boxed{...} content, or None."""
    start = text.find(BOXED_OPEN)
    if start == -1:
        return None
    depth = 1
    pos = start + len(BOXED_OPEN)
    while pos < len(text):
        ch = text[pos]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return (start + len(BOXED_OPEN), pos)
        pos += 1
    return None


def parse_response(response: str | list[str]) -> ParsedResponse:
    """Extract the think span and the boxed answer; never raises.

    format_ok holds iff exactly one think block precedes exactly one boxed
    answer. With duplicate boxes the first one supplies the answer and the
    format is penalized.
    """
    text = " ".join(response) if isinstance(response, list) else str(response)

    n_open = text.count(THINK_OPEN)
    n_close = text.count(THINK_CLOSE)
    think = ""
    think_end = -1
    if n_open >= 1 and n_close >= 1:
        open_pos = text.find(THINK_OPEN)
        close_pos = text.find(THINK_CLOSE, open_pos + len(THINK_OPEN))
        if close_pos != -1:
            think = text[open_pos + len(THINK_OPEN) : close_pos].strip()
            think_end = close_pos + len(THINK_CLOSE)

    span = _first_boxed_span(text)
    answer = text[span[0] : span[1]].strip() if span else ""

    format_ok = (
        n_open == 1
        and n_close == 1
        and think_end != -1
        and span is not None
        and text.count(BOXED_OPEN) == 1
        and think_end <= span[0] - len(BOXED_OPEN)
    )
    return ParsedResponse(think=think, answer=answer, format_ok=bool(format_ok))


@dataclass
class RewardBreakdown:
    acc: float
    format: float
    total: float


def reward_clevr(
    parsed: ParsedResponse, gold: str, format_weight: float = DEFAULT_FORMAT_WEIGHT
) -> RewardBreakdown:
    """Exact-match accuracy (case/whitespace sensitive after trimming)."""
    acc = 1.0 if parsed.answer == gold else 0.0
    fmt = 1.0 if parsed.format_ok else 0.0
    return RewardBreakdown(acc=acc, format=fmt, total=acc + format_weight * fmt)


def reward_gta(
    parsed: ParsedResponse,
    gold: ToolCall,
    specs: ToolRuleSet,
    format_weight: float = DEFAULT_FORMAT_WEIGHT,
) -> RewardBreakdown:
    """Tool-call reward: scored call overall + weighted format reward."""
    fmt = 1.0 if parsed.format_ok else 0.0
    try:
        pred = parse_tool_call(parsed.answer)
        overall = score_call(pred, gold, specs).overall
    except ToolCallError:
        overall = 0.0
    return RewardBreakdown(acc=overall, format=fmt, total=overall + format_weight * fmt)


# ---------------------------------------------------------------------------
# supervised losses over token log-probability sequences
# ---------------------------------------------------------------------------


@dataclass
class MaskedSequence:
    logprobs: np.ndarray  # per-token log-probabilities under the model
    mask: np.ndarray  # True where the token contributes to the loss

    def __post_init__(self) -> None:
        self.logprobs = np.asarray(self.logprobs, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.logprobs.shape != self.mask.shape:
            raise ValueError(
                f"logprobs/mask length mismatch: {self.logprobs.shape} vs {self.mask.shape}"
            )


def vm_cpt_loss(seq: MaskedSequence) -> float:
    """Mean negative log-probability over unmasked (non-visual) tokens."""
    n = int(seq.mask.sum())
    if n == 0:
        raise ValueError("all tokens masked: loss undefined")
    return float(-(seq.logprobs[seq.mask].sum()) / n)


@dataclass
class SftLoss:
    total: float  # summed NLL over the CoT-plus-answer span
    mean: float


def cot_sft_loss(logprobs: np.ndarray) -> SftLoss:
    """NLL over the chain-of-thought-plus-answer tokens (prompt excluded)."""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if logprobs.size == 0:
        raise ValueError("empty target span: loss undefined")
    total = float(-logprobs.sum())
    return SftLoss(total=total, mean=total / logprobs.size)
