"""Censoring-aware survival statistics.

Kaplan-Meier curves, the two-group log-rank test, Harrell's concordance
index, median risk stratification and a token-overlap F1 used to score
generated answers.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SurvivalRecord",
    "StepFunction",
    "RiskGroup",
    "km_estimate",
    "log_rank_test",
    "concordance_index",
    "stratify_median",
    "token_f1",
    "read_cohort_csv",
    "write_cohort_csv",
    "write_km_csv",
]


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: bool

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if not (self.time >= 0) or math.isinf(self.time):
            raise ValueError(f"time must be finite and >= 0, got {self.time!r}")
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "event", bool(self.event))


def check_cohort(records: Sequence[SurvivalRecord]) -> None:
    seen = set()
    for r in records:
        if r.patient_id in seen:
            raise ValueError(f"duplicate patient_id {r.patient_id!r}")
        seen.add(r.patient_id)


def _arrays(records: Sequence[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=bool)
    return times, events


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous survival curve with knots at distinct event times.

    ``at_risk`` and ``events`` hold the risk-set size and event count at each
    knot (used for export only).
    """

    times: np.ndarray
    values: np.ndarray
    value_at_zero: float = 1.0
    at_risk: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[self.value_at_zero], self.values])[idx]
        return vals if vals.ndim else float(vals)

    def __len__(self) -> int:
        return len(self.times)


def km_estimate(records: Sequence[SurvivalRecord]) -> StepFunction:
    """Product-limit estimate of S(t).

    Events sharing a time share one risk set. Censored records leave the risk
    set after their time but create no knot.
    """
    if len(records) == 0:
        raise ValueError("empty cohort")
    times, events = _arrays(records)
    event_times = np.unique(times[events])
    at_risk = np.array([(times >= t).sum() for t in event_times], dtype=np.int64)
    deaths = np.array([(events & (times == t)).sum() for t in event_times], dtype=np.int64)
    values = np.cumprod(1.0 - deaths / at_risk) if len(event_times) else np.zeros(0)
    return StepFunction(event_times, values, 1.0, at_risk, deaths)


def _chi2_1_sf(x: float) -> float:
    # upper tail of chi-square(1): P(Z^2 > x) = erfc(sqrt(x / 2))
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


def log_rank_test(
    group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]
) -> tuple[float, float]:
    """Two-group log-rank chi-square statistic (1 df) and its p-value."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise ValueError("both groups must be nonempty")
    ta, ea = _arrays(group_a)
    tb, eb = _arrays(group_b)
    all_t = np.concatenate([ta, tb])
    all_e = np.concatenate([ea, eb])
    event_times = np.unique(all_t[all_e])
    if len(event_times) == 0:
        raise ValueError("degenerate test")
    o_minus_e = 0.0
    var = 0.0
    for t in event_times:
        n_a = float((ta >= t).sum())
        n = n_a + float((tb >= t).sum())
        d_a = float((ea & (ta == t)).sum())
        d = d_a + float((eb & (tb == t)).sum())
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0)
    if var <= 0.0:
        return 0.0, 1.0
    stat = o_minus_e * o_minus_e / var
    return stat, _chi2_1_sf(stat)


def concordance_index(records: Sequence[SurvivalRecord], risks: Sequence[float]) -> float:
    """Harrell's c-index; higher risk should mean earlier event.

    A pair is comparable when the earlier time is an event.  Equal-time pairs
    are comparable only when both are events, and then score 0.5 since
    neither member precedes the other.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if len(records) != len(risks):
        raise ValueError("records and risks differ in length")
    if len(records) < 2:
        raise ValueError("need at least two records")
    times, events = _arrays(records)
    earlier = (times[:, None] < times[None, :]) & events[:, None]
    concordant = np.where(
        risks[:, None] > risks[None, :], 1.0, np.where(risks[:, None] == risks[None, :], 0.5, 0.0)
    )
    tied = (times[:, None] == times[None, :]) & events[:, None] & events[None, :]
    tied = np.triu(tied, k=1)
    comparable = earlier.sum() + tied.sum()
    if comparable == 0:
        raise ValueError("no comparable pairs")
    mass = (concordant * earlier).sum() + 0.5 * tied.sum()
    return float(mass / comparable)


class RiskGroup(enum.Enum):
    HIGH = "High"
    LOW = "Low"


def stratify_median(risks: Sequence[float]) -> list[RiskGroup]:
    """Split at the lower median; ties with the median go to Low."""
    risks = np.asarray(risks, dtype=np.float64)
    if risks.size == 0:
        raise ValueError("risks must be nonempty")
    median = np.sort(risks)[(len(risks) - 1) // 2]
    return [RiskGroup.HIGH if r > median else RiskGroup.LOW for r in risks]


def token_f1(prediction: str, reference: str) -> float:
    pred = Counter(prediction.lower().split())
    ref = Counter(reference.lower().split())
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((pred & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(pred.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


# -- file formats ------------------------------------------------------------
COHORT_HEADER = ["patient_id", "time", "event"]
KM_HEADER = ["time", "survival", "at_risk", "events"]


def read_cohort_csv(path) -> list[SurvivalRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != COHORT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(COHORT_HEADER)}, got {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 or row[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}")
            records.append(SurvivalRecord(row[0], float(row[1]), row[2] == "1"))
    check_cohort(records)
    return records


def write_cohort_csv(path, records: Iterable[SurvivalRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COHORT_HEADER)
        for r in records:
            writer.writerow([r.patient_id, repr(r.time), int(r.event)])


def write_km_csv(path, curve: StepFunction) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(KM_HEADER)
        for t, s, n, d in zip(curve.times, curve.values, curve.at_risk, curve.events):
            writer.writerow([repr(float(t)), repr(float(s)), int(n), int(d)])


def km_svg(curves: dict[str, StepFunction], width: int = 480, height: int = 320) -> str:
    """Render step curves as a bare SVG document (one polyline per curve)."""
    t_max = max((float(c.times[-1]) for c in curves.values() if len(c)), default=1.0) or 1.0
    colors = ["#c0392b", "#2471a3", "#1e8449", "#7d3c98"]
    pad = 30
    sx = (width - 2 * pad) / t_max
    sy = height - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{sy}" fill="none" stroke="#888"/>',
    ]
    for i, (name, c) in enumerate(curves.items()):
        x, y, prev = [0.0], [1.0], 1.0
        for t, s in zip(c.times, c.values):
            x += [float(t), float(t)]
            y += [prev, float(s)]
            prev = float(s)
        x.append(t_max)
        y.append(prev)
        pts = " ".join(f"{pad + a * sx:.2f},{pad + (1 - b) * sy:.2f}" for a, b in zip(x, y))
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"><title>{name}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
