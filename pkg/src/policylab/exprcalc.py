"""Safe recursive-descent evaluator for arithmetic expressions.

Grammar (whitespace insignificant)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('**' unary)?
    atom   := NUMBER | '(' expr ')'

Sums and products associate left, exponentiation right; unary minus binds
looser than '**' (so ``-2**2 == -4``). Division by zero and non-finite
results raise; callers score such expressions as 0.
"""

from __future__ import annotations

import math
import re

_TOKEN_RE = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)|(\*\*)|([+\-*/()]))")


class ExpressionError(ValueError):
    pass


def _tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            if text[pos:].strip() == "":
                break
            raise ExpressionError(f"bad character at offset {pos}: {text[pos:pos + 8]!r}")
        tokens.append(m.group(m.lastindex))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ExpressionError("unexpected end of expression")
        self.pos += 1
        return tok

    def expr(self) -> float:
        value = self.term()
        while self.peek() in ("+", "-"):
            if self.take() == "+":
                value = value + self.term()
            else:
                value = value - self.term()
        return value

    def term(self) -> float:
        value = self.unary()
        while self.peek() in ("*", "/"):
            if self.take() == "*":
                value = value * self.unary()
            else:
                rhs = self.unary()
                if rhs == 0:
                    raise ExpressionError("division by zero")
                value = value / rhs
        return value

    def unary(self) -> float:
        if self.peek() == "-":
            self.take()
            return -self.unary()
        return self.power()

    def power(self) -> float:
        base = self.atom()
        if self.peek() == "**":
            self.take()
            exponent = self.unary()
            try:
                result = base**exponent
            except (OverflowError, ZeroDivisionError) as exc:
                raise ExpressionError(str(exc)) from None
            if isinstance(result, complex):
                raise ExpressionError("complex result")
            return float(result)
        return base

    def atom(self) -> float:
        tok = self.take()
        if tok == "(":
            value = self.expr()
            if self.take() != ")":
                raise ExpressionError("expected ')'")
            return value
        if tok in ("+", "-", "*", "/", "**", ")"):
            raise ExpressionError(f"unexpected operator {tok!r}")
        return float(tok)


def eval_expression(text: str) -> float:
    """Evaluate an arithmetic expression; raises ExpressionError on failure."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        value = float(text)
    else:
        tokens = _tokenize(str(text))
        if not tokens:
            raise ExpressionError("empty expression")
        parser = _Parser(tokens)
        value = parser.expr()
        if parser.peek() is not None:
            raise ExpressionError(f"trailing input: {parser.tokens[parser.pos:]!r}")
    if isinstance(value, complex) or not math.isfinite(value):
        raise ExpressionError(f"non-finite result: {value!r}")
    return value
