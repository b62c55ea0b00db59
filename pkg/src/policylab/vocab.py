"""Closed whitespace-token vocabulary with per-token visual flags.

Built deterministically from dataset files: reserved specials first, then
all remaining corpus tokens sorted lexicographically. Visual flags mark
scene-surrogate tokens and visual-demo placeholders; those are exactly the
tokens excluded from the masked continual-pretraining loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

PAD = "<pad>"
BOS = "<bos>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
BOXED_OPEN = "\\boxed{"
BOXED_CLOSE = "}"

# (token, visual flag); scene delimiters count as scene-surrogate tokens
SPECIALS: tuple[tuple[str, bool], ...] = (
    (PAD, False),
    (BOS, False),
    ("<scene>", True),
    ("</scene>", True),
    (THINK_OPEN, False),
    (THINK_CLOSE, False),
    (BOXED_OPEN, False),
    (BOXED_CLOSE, False),
)


class VocabError(Exception):
    pass


@dataclass
class Vocab:
    tokens: list[str]
    visual: list[bool]

    def __post_init__(self) -> None:
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def stop_id(self) -> int:
        return self.token_to_id[BOXED_CLOSE]

    def hash(self) -> str:
        payload = json.dumps(
            [[t, bool(v)] for t, v in zip(self.tokens, self.visual)],
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "visual": [bool(v) for v in self.visual]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tokens=list(d["tokens"]), visual=[bool(v) for v in d["visual"]])

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _merge_flag(flags: dict[str, bool], token: str, visual: bool) -> None:
    prev = flags.get(token)
    if prev is None:
        flags[token] = visual
    elif prev != visual:
        raise VocabError(f"token {token!r} appears both as visual and non-visual")


def build_vocab(corpus_files: list[Path]) -> Vocab:
    """Deterministic vocabulary over dataset JSONL files.

    Tokens sort lexicographically after the reserved specials; visual flags
    come from the per-record masks. Raises on an empty corpus or on a token
    whose visual flag is inconsistent across occurrences.
    """
    pairs: set[tuple[str, bool]] = set()
    n_records = 0
    for path in corpus_files:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                n_records += 1
                toks = rec["tokens_with_policy"]
                mask = rec["visual_mask"]
                if len(toks) != len(mask):
                    raise VocabError(f"mask length mismatch in {path}")
                pairs.update(zip(toks, map(bool, mask)))
                pairs.update((t, False) for t in rec.get("cot") or [])
                pairs.update((t, False) for t in str(rec["answer"]).split())
    if n_records == 0:
        raise VocabError("empty corpus: no records found")
    flags: dict[str, bool] = {}
    for token, visual in sorted(pairs):
        _merge_flag(flags, token, visual)
    return _assemble(flags)


def build_vocab_from_texts(texts: list[str]) -> Vocab:
    """Vocabulary over plain whitespace-tokenized texts (no visual tokens)."""
    flags: dict[str, bool] = {}
    for text in texts:
        for t in text.split():
            _merge_flag(flags, t, False)
    if not flags:
        raise VocabError("empty corpus: no tokens found")
    return _assemble(flags)


def _assemble(flags: dict[str, bool]) -> Vocab:
    special_names = {t for t, _ in SPECIALS}
    for tok, fixed in SPECIALS:
        if tok in flags and flags[tok] != fixed:
            raise VocabError(f"special token {tok!r} observed with wrong visual flag")
    rest = sorted(t for t in flags if t not in special_names)
    tokens = [t for t, _ in SPECIALS] + rest
    visual = [v for _, v in SPECIALS] + [flags[t] for t in rest]
    return Vocab(tokens=tokens, visual=visual)
