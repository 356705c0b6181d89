"""Digit maps: parsing and incremental matching of collected DTMF strings.

Supported grammar (a subset of the MGCP digit map syntax)::

    map   := alt | "(" alt ("|" alt)* ")"
    alt   := token+
    token := "0"-"9" | "*" | "#" | "x" | token "." | "T"

``x`` matches any digit 0-9, ``.`` repeats the preceding token zero or more
times and ``T`` (inter-digit timer) may only close an alternative. Ranges in
square brackets are not supported.
"""

from __future__ import annotations

import dataclasses
import enum

DIGITS = frozenset("0123456789")
DTMF = DIGITS | {"*", "#"}
TIMER = "T"


class MalformedDigitMap(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Token:
    symbol: str  # a literal, "x" or "T"
    repeat: bool = False

    def accepts(self, ch: str) -> bool:
        if self.symbol == "x":
            return ch in DIGITS
        return ch == self.symbol

    def __str__(self) -> str:
        return self.symbol + ("." if self.repeat else "")


@dataclasses.dataclass(frozen=True)
class DigitMap:
    alternatives: tuple[tuple[Token, ...], ...]
    parenthesized: bool = True

    def __str__(self) -> str:
        body = "|".join("".join(str(t) for t in alt) for alt in self.alternatives)
        return f"({body})" if self.parenthesized else body

    @property
    def uses_timer(self) -> bool:
        return any(alt and alt[-1].symbol == TIMER for alt in self.alternatives)


class MatchKind(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    NONE = "none"


@dataclasses.dataclass(frozen=True)
class MatchResult:
    kind: MatchKind
    matched: str | None = None


PARTIAL = MatchResult(MatchKind.PARTIAL)
NO_MATCH = MatchResult(MatchKind.NONE)


def parse_digitmap(text: str) -> DigitMap:
    src = "".join(text.split())
    if not src:
        raise MalformedDigitMap("empty digit map")
    parenthesized = src.startswith("(")
    if parenthesized:
        if not src.endswith(")"):
            raise MalformedDigitMap(f"unbalanced parenthesis in {text!r}")
        src = src[1:-1]
    if "(" in src or ")" in src:
        raise MalformedDigitMap(f"nested parenthesis in {text!r}")
    if not parenthesized and "|" in src:
        raise MalformedDigitMap(f"alternatives need parentheses: {text!r}")

    alternatives = []
    for raw in src.split("|"):
        tokens: list[Token] = []
        for ch in raw:
            if ch == ".":
                if not tokens or tokens[-1].repeat or tokens[-1].symbol == TIMER:
                    raise MalformedDigitMap(f"misplaced '.' in {raw!r}")
                tokens[-1] = Token(tokens[-1].symbol, True)
                continue
            if tokens and tokens[-1].symbol == TIMER:
                raise MalformedDigitMap(f"'T' must end an alternative: {raw!r}")
            if ch in ("x", "X"):
                tokens.append(Token("x"))
            elif ch in ("T", "t"):
                tokens.append(Token(TIMER))
            elif ch in DTMF:
                tokens.append(Token(ch))
            else:
                raise MalformedDigitMap(f"unsupported character {ch!r} in {text!r}")
        if not tokens:
            raise MalformedDigitMap(f"empty alternative in {text!r}")
        alternatives.append(tuple(tokens))
    return DigitMap(tuple(alternatives), parenthesized)


def _closure(alt: tuple[Token, ...], positions: set[int]) -> set[int]:
    out = set(positions)
    stack = list(positions)
    while stack:
        p = stack.pop()
        if p < len(alt) and alt[p].repeat and p + 1 not in out:
            out.add(p + 1)
            stack.append(p + 1)
    return out


def _reachable(alt: tuple[Token, ...], symbols: str) -> set[int]:
    states = _closure(alt, {0})
    for ch in symbols:
        nxt = set()
        for p in states:
            if p < len(alt) and alt[p].accepts(ch):
                nxt.add(p if alt[p].repeat else p + 1)
        if not nxt:
            return set()
        states = _closure(alt, nxt)
    return states


def digitmap_match(dmap: DigitMap, digits: str, timer_expired: bool = False) -> MatchResult:
    """Classify ``digits`` against ``dmap``.

    FULL when an alternative consumes the whole string and no alternative
    could still consume more; PARTIAL when some alternative could; NONE
    otherwise. With ``timer_expired`` the string is terminated by a ``T``
    event, so only alternatives ending in ``T`` can complete.
    """
    for ch in digits:
        if ch not in DTMF:
            raise ValueError(f"not a DTMF symbol: {ch!r}")
    symbols = digits + TIMER if timer_expired else digits
    full = False
    extendable = False
    for alt in dmap.alternatives:
        states = _reachable(alt, symbols)
        if len(alt) in states:
            full = True
        if any(p < len(alt) for p in states):
            extendable = True
    if extendable and not timer_expired:
        return PARTIAL
    if full:
        return MatchResult(MatchKind.FULL, digits)
    return NO_MATCH
