"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

DIGITS = set("0123456789")


def _accepts(symbol: str, ch: str) -> bool:
    return ch in DIGITS if symbol == "x" else ch == symbol


def _tokens(alt: str) -> list[tuple[str, bool]]:
    out: list[tuple[str, bool]] = []
    for ch in alt:
        if ch == ".":
            out[-1] = (out[-1][0], True)
        else:
            out.append((ch, False))
    return out


def brute_force_digitmap(map_text: str, digits: str, timer_expired: bool = False) -> tuple[str, str | None]:
    """Enumerate every expansion of every alternative and compare directly.

    Each repeated token is expanded to 0..n+1 copies (n = input length incl.
    the timer event): enough copies to cover the input and one symbol past it.
    """
    body = map_text.strip()
    if body.startswith("("):
        body = body[1:-1]
    symbols = list(digits) + (["T"] if timer_expired else [])
    n = len(symbols)
    full = False
    extendable = False
    for alt in body.split("|"):
        toks = _tokens(alt)
        choices = [range(0, n + 2) if rep else range(1, 2) for _, rep in toks]
        for counts in itertools.product(*choices):
            expansion = [sym for (sym, _), c in zip(toks, counts) for _ in range(c)]
            prefix_ok = all(_accepts(expansion[i], symbols[i]) for i in range(min(n, len(expansion))))
            if not prefix_ok:
                continue
            if len(expansion) == n:
                full = True
            elif len(expansion) > n:
                extendable = True
    if extendable and not timer_expired:
        return "partial", None
    if full:
        return "full", digits
    return "none", None


def nearest_rank(values: list[float], pct: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100 * len(ordered)))
    return ordered[rank - 1]
