"""Interval lists shared by ground truth, detections and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable


@dataclass
class EventList:
    """Sorted, non-overlapping ``(onset_s, offset_s)`` intervals of one utterance."""

    utt_id: str
    events: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.events = [(float(a), float(b)) for a, b in self.events]
        self.validate()

    def validate(self, duration: float | None = None) -> None:
        prev_off = -float("inf")
        for onset, offset in self.events:
            if not onset < offset:
                raise ValueError(f"{self.utt_id}: event ({onset}, {offset}) has onset >= offset")
            if onset < prev_off:
                raise ValueError(f"{self.utt_id}: events unsorted or overlapping")
            if onset < 0 or (duration is not None and offset > duration + 1e-9):
                raise ValueError(f"{self.utt_id}: event ({onset}, {offset}) outside utterance")
            prev_off = offset

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of possibly overlapping intervals, sorted by onset."""
    merged: list[list[float]] = []
    for onset, offset in sorted(intervals):
        if merged and onset <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], offset)
        else:
            merged.append([onset, offset])
    return [(a, b) for a, b in merged]


def read_events_csv(path) -> dict[str, EventList]:
    """Read ``utt_id,onset_s,offset_s,...`` rows into per-utterance event lists.

    Extra columns (type, severity, min_frame_score) are ignored. Comment lines
    starting with ``#`` are skipped.
    """
    per_utt: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as f:
        rows = csv.DictReader(line for line in f if not line.startswith("#"))
        if rows.fieldnames is None or not {"utt_id", "onset_s", "offset_s"} <= set(rows.fieldnames):
            raise ValueError(f"{path}: expected columns utt_id,onset_s,offset_s")
        for row in rows:
            try:
                per_utt.setdefault(row["utt_id"], []).append(
                    (float(row["onset_s"]), float(row["offset_s"]))
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed row {row}") from exc
    return {u: EventList(u, sorted(ev)) for u, ev in per_utt.items()}
