"""Subscriber profiles behind a narrow query/update interface.

The backing file is a JSON array of ``{card, pin, credit_seconds, rate}``
objects. Reads come from an in-memory cache and updates are written back on
:meth:`SubscriberStore.flush` (or immediately with ``write_through``).
"""

from __future__ import annotations

import dataclasses
import json
import threading
from pathlib import Path
from typing import Iterable


class AuthDenied(Exception):
    status = 403


class UnknownCard(AuthDenied):
    pass


class BadPin(AuthDenied):
    pass


class NoCredit(AuthDenied):
    status = 402


class StoreUnavailable(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class SubscriberProfile:
    card_number: str
    pin: str
    credit_seconds: float
    rate: float = 1.0

    def __post_init__(self) -> None:
        if self.credit_seconds < 0:
            raise ValueError("credit_seconds must be non-negative")
        if not (self.card_number.isdigit() and self.pin.isdigit()):
            raise ValueError("card and pin are digit strings")


def _number(x: float) -> float | int:
    return int(x) if float(x).is_integer() else x


class SubscriberStore:
    def __init__(self, profiles: Iterable[SubscriberProfile] = (), *, path: str | Path | None = None, write_through: bool = False):
        self.path = Path(path) if path else None
        self.write_through = write_through
        self.available = True
        self._lock = threading.Lock()
        self._cache: dict[str, SubscriberProfile] = {}
        for p in profiles:
            if p.card_number in self._cache:
                raise ValueError(f"duplicate card {p.card_number}")
            self._cache[p.card_number] = p

    @classmethod
    def load(cls, path: str | Path, **kw) -> "SubscriberStore":
        rows = json.loads(Path(path).read_text())
        profiles = [
            SubscriberProfile(str(r["card"]), str(r["pin"]), r["credit_seconds"], r.get("rate", 1.0)) for r in rows
        ]
        return cls(profiles, path=path, **kw)

    def _check(self) -> None:
        if not self.available:
            raise StoreUnavailable("subscriber store is unavailable")

    def get(self, card: str) -> SubscriberProfile | None:
        self._check()
        return self._cache.get(card)

    def update_credit(self, card: str, credit_seconds: float) -> SubscriberProfile:
        self._check()
        with self._lock:
            profile = dataclasses.replace(self._cache[card], credit_seconds=_number(max(0, credit_seconds)))
            self._cache[card] = profile
        if self.write_through:
            self.flush()
        return profile

    def profiles(self) -> list[SubscriberProfile]:
        return list(self._cache.values())

    def flush(self) -> None:
        if self.path is None:
            return
        rows = [
            {"card": p.card_number, "pin": p.pin, "credit_seconds": _number(p.credit_seconds), "rate": _number(p.rate)}
            for p in self._cache.values()
        ]
        with self._lock:
            self.path.write_text(json.dumps(rows, indent=2) + "\n")


def authenticate(store: SubscriberStore, card: str, pin: str) -> SubscriberProfile:
    profile = store.get(card)
    if profile is None:
        raise UnknownCard(card)
    if profile.pin != pin:
        raise BadPin(card)
    if profile.credit_seconds <= 0:
        raise NoCredit(card)
    return profile
