"""Stratified selection of a proxy-dataset category subset.

Given per-category statistics (instance count, average box area,
average box-to-image area ratio), the range of one chosen indicator is
split into five equal-width segments and a fixed number of categories
is drawn uniformly from each segment, so the subset tracks the full
dataset's distribution of that indicator. Statistics arrive precomputed
as CSV or JSON lines; no annotation processing happens here.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class Indicator(Enum):
    INSTANCES = "instances"
    AVG_AREA = "area"
    AVG_RATIO = "ratio"


@dataclass(frozen=True)
class CategoryStats:
    id: int
    name: str
    instances: int
    avg_area: float
    avg_ratio: float  # bbox area / image area, percent

    def __post_init__(self):
        if self.instances < 0:
            raise ValueError("instances must be >= 0")
        if not 0.0 <= self.avg_ratio <= 100.0:
            raise ValueError("avg_ratio is a percentage in [0, 100]")

    def indicator_value(self, indicator: Indicator) -> float:
        if indicator is Indicator.INSTANCES:
            return float(self.instances)
        if indicator is Indicator.AVG_AREA:
            return self.avg_area
        return self.avg_ratio


class SegmentShortfallWarning(UserWarning):
    """A segment holds fewer categories than requested."""


@dataclass(frozen=True)
class SegmentPlan:
    """Five half-open equal-width intervals over the indicator range;
    the last interval is closed on the right."""

    indicator: Indicator
    boundaries: tuple[float, ...]
    per_segment: int = 4

    def __post_init__(self):
        if len(self.boundaries) < 2:
            raise ValueError("need at least one interval")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if self.per_segment < 1:
            raise ValueError("per_segment must be >= 1")

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    def segment_of(self, value: float) -> int:
        if value < self.boundaries[0] or value > self.boundaries[-1]:
            raise ValueError(f"value {value} outside the planned range")
        if value == self.boundaries[-1]:
            return self.n_segments - 1
        for k in range(self.n_segments):
            if self.boundaries[k] <= value < self.boundaries[k + 1]:
                return k
        raise AssertionError("unreachable")


def build_segments(stats: list[CategoryStats], indicator: Indicator,
                   n_segments: int = 5, per_segment: int = 4) -> SegmentPlan:
    """Equal-width segmentation of the indicator's [min, max] interval."""
    values = sorted({c.indicator_value(indicator) for c in stats})
    if len(values) < n_segments:
        raise ValueError(
            f"need at least {n_segments} distinct indicator values, got {len(values)}")
    lo, hi = values[0], values[-1]
    bounds = tuple(np.linspace(lo, hi, n_segments + 1).tolist())
    return SegmentPlan(indicator=indicator, boundaries=bounds,
                       per_segment=per_segment)


def sample_categories(stats: list[CategoryStats], plan: SegmentPlan,
                      rng: np.random.Generator) -> list[CategoryStats]:
    """Draw per_segment categories uniformly without replacement from
    each segment, in segment order. A short segment contributes all of
    its members and raises a SegmentShortfallWarning."""
    buckets: list[list[CategoryStats]] = [[] for _ in range(plan.n_segments)]
    for cat in stats:
        buckets[plan.segment_of(cat.indicator_value(plan.indicator))].append(cat)
    picked: list[CategoryStats] = []
    for seg, bucket in enumerate(buckets):
        if len(bucket) < plan.per_segment:
            warnings.warn(
                f"segment {seg} holds {len(bucket)} categories, "
                f"wanted {plan.per_segment}", SegmentShortfallWarning)
            picked.extend(bucket)
            continue
        idx = rng.choice(len(bucket), size=plan.per_segment, replace=False)
        picked.extend(bucket[k] for k in sorted(idx))
    return picked


def summarize(selection: list[CategoryStats]) -> list[CategoryStats]:
    """Selected categories sorted by average ratio, ascending."""
    if not selection:
        raise ValueError("empty selection")
    return sorted(selection, key=lambda c: (c.avg_ratio, c.id))


def format_summary(selection: list[CategoryStats]) -> str:
    rows = summarize(selection)
    lines = ["id | name | instances | avg_area | avg_ratio(%)"]
    for c in rows:
        lines.append(f"{c.id} | {c.name}, {c.instances}, {c.avg_area}, {c.avg_ratio}")
    return "\n".join(lines)


def selection_to_dicts(selection: list[CategoryStats]) -> list[dict]:
    return [{"id": c.id, "name": c.name, "instances": c.instances,
             "avg_area": c.avg_area, "avg_ratio": c.avg_ratio}
            for c in summarize(selection)]


def load_category_stats(path) -> list[CategoryStats]:
    """Read stats from CSV (header: id,name,instances,avg_area,avg_ratio)
    or from JSON lines with the same field names."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows: list[dict] = []
    if path.suffix in (".jsonl", ".json") or text.lstrip().startswith("{"):
        for line in text.splitlines():
            if line.strip():
                rows.append(json.loads(line))
    else:
        rows.extend(csv.DictReader(text.splitlines()))
    return [CategoryStats(id=int(r["id"]), name=str(r["name"]),
                          instances=int(r["instances"]),
                          avg_area=float(r["avg_area"]),
                          avg_ratio=float(r["avg_ratio"]))
            for r in rows]
