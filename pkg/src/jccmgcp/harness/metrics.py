"""Per-call records and run-level metrics: SRD, loss, MCT."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from typing import Iterable, Sequence

LOSS_LIMIT = 0.01
SRD_P95_LIMIT_MS = 500.0


class NoneQualify(ValueError):
    pass


@dataclasses.dataclass
class CallRecord:
    call_id: str
    t_invite: float
    provisionals: list[tuple[float, int]] = dataclasses.field(default_factory=list)
    t_answered: float | None = None
    t_released: float | None = None
    outcome: str | None = None  # completed | lost | rejected
    final_status: int | None = None
    released_by: str | None = None

    @property
    def t_first_non100_provisional(self) -> float | None:
        for t, status in self.provisionals:
            if status != 100:
                return t
        return None


def compute_srd(rec: CallRecord) -> float | None:
    """Milliseconds from INVITE to the first provisional other than 100, or None."""
    t = rec.t_first_non100_provisional
    if t is None:
        return None
    return (t - rec.t_invite) * 1000.0


def nearest_rank_percentile(values: Sequence[float], pct: float) -> float:
    if not values:
        raise ValueError("no samples")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclasses.dataclass
class MetricsReport:
    offered_rate: float
    attempted: int = 0
    completed: int = 0
    lost: int = 0
    rejected: int = 0
    loss_fraction: float = 0.0
    srd_avg_ms: float | None = None
    srd_p95_ms: float | None = None
    app_interactions_per_call: float | None = None  # call setup: trigger until both legs connected
    wire_messages_per_call: float | None = None  # whole call
    app_interactions_total_per_call: float | None = None
    wire_messages_setup_per_call: float | None = None
    ms_peak_connections: int = 0
    ms_final_connections: int = 0
    duration: float = 0.0
    call_length: float = 0.0
    seed: int = 0

    def as_dict(self) -> dict:
        out = {}
        for key, value in dataclasses.asdict(self).items():
            out[key] = round(value, 6) if isinstance(value, float) else value
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        row = self.as_dict()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def summarize(
    records: Iterable[CallRecord],
    offered_rate: float,
    *,
    per_call_counts: Sequence[tuple[int, int, int, int]] = (),
    **extra,
) -> MetricsReport:
    """Aggregate call records.

    ``per_call_counts`` holds (app_total, wire_total, app_setup, wire_setup)
    for each successful call.
    """
    records = list(records)
    report = MetricsReport(offered_rate=offered_rate, **extra)
    report.attempted = len(records)
    report.completed = sum(r.outcome == "completed" for r in records)
    report.lost = sum(r.outcome not in ("completed", "rejected") for r in records)
    report.rejected = sum(r.outcome == "rejected" for r in records)
    report.loss_fraction = report.lost / report.attempted if report.attempted else 0.0
    srds = [s for s in (compute_srd(r) for r in records) if s is not None]
    if srds:
        report.srd_avg_ms = sum(srds) / len(srds)
        report.srd_p95_ms = nearest_rank_percentile(srds, 95)
    if per_call_counts:
        n = len(per_call_counts)
        report.app_interactions_total_per_call = sum(c[0] for c in per_call_counts) / n
        report.wire_messages_per_call = sum(c[1] for c in per_call_counts) / n
        report.app_interactions_per_call = sum(c[2] for c in per_call_counts) / n
        report.wire_messages_setup_per_call = sum(c[3] for c in per_call_counts) / n
    return report


def find_mct(results: Iterable[tuple[float, MetricsReport]]) -> float:
    """Highest offered rate whose loss fraction stays below 1 %."""
    ok = [rate for rate, rep in results if rep.loss_fraction < LOSS_LIMIT]
    if not ok:
        raise NoneQualify("no rate has loss below 1%")
    return max(ok)


def find_mct95(results: Iterable[tuple[float, MetricsReport]]) -> float:
    """Like :func:`find_mct`, but the p95 SRD must also be at most 500 ms."""
    ok = [
        rate
        for rate, rep in results
        if rep.loss_fraction < LOSS_LIMIT and rep.srd_p95_ms is not None and rep.srd_p95_ms <= SRD_P95_LIMIT_MS
    ]
    if not ok:
        raise NoneQualify("no rate meets both the loss and the p95 SRD limit")
    return max(ok)
