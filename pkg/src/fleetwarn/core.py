"""Domain types and timeline arithmetic shared by the whole pipeline.

A fleet is a collection of :class:`TelemetryPanel` objects, one per unit
(aircraft, engine, ...).  Time is an integer flight counter; there is no
sub-flight resolution.  Missing measurements are IEEE NaN: NaN can never be
confused with a real measurement, and every downstream operation states its
missing policy explicitly.

All types here are immutable after construction and safe to share across
worker threads.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class NoTargetEventsError(ValueError):
    """Raised when an operation requires target events and none are usable."""


def is_missing(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)


@dataclass(frozen=True)
class TelemetryPanel:
    """Per-unit ordered flight records with named real-valued parameters.

    ``values`` is a T x P float matrix aligned with ``flights`` (rows) and
    ``columns`` (columns); NaN marks a missing measurement.  ``phases`` is an
    optional per-record label (e.g. the flight phase a snapshot was taken in).
    """

    unit_id: str
    flights: np.ndarray
    columns: tuple[str, ...]
    values: np.ndarray
    phases: tuple[str | None, ...] | None = None

    def __post_init__(self) -> None:
        flights = np.array(self.flights, dtype=np.int64, copy=True)
        values = np.array(self.values, dtype=np.float64, copy=True)
        columns = tuple(self.columns)
        if flights.ndim != 1:
            raise ValueError("flights must be one-dimensional")
        if values.ndim != 2 or values.shape != (flights.size, len(columns)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{flights.size} flights x {len(columns)} columns"
            )
        if flights.size and np.any(np.diff(flights) <= 0):
            raise ValueError(f"flight indices not strictly increasing for unit {self.unit_id!r}")
        if len(set(columns)) != len(columns):
            raise ValueError("column names must be unique")
        if self.phases is not None and len(self.phases) != flights.size:
            raise ValueError("phases length does not match flight count")
        flights.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "flights", flights)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", columns)
        if self.phases is not None:
            object.__setattr__(self, "phases", tuple(self.phases))

    @property
    def n_flights(self) -> int:
        return int(self.flights.size)

    def observation_range(self) -> tuple[int, int]:
        """Inclusive [first, last] flight of this unit."""
        if self.flights.size == 0:
            raise ValueError(f"unit {self.unit_id!r} has no flights")
        return int(self.flights[0]), int(self.flights[-1])

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r} on unit {self.unit_id!r}") from None

    def subvalues(self, names: Sequence[str]) -> np.ndarray:
        """Columns ``names`` as a T x len(names) view copy."""
        idx = [self.column_index(n) for n in names]
        return self.values[:, idx]

    def with_values(self, values: np.ndarray) -> "TelemetryPanel":
        return replace(self, values=values)


@dataclass(frozen=True)
class EventRecord:
    """A failure occurrence on one unit's timeline, spanning [onset, end)."""

    unit_id: str
    onset: int
    end: int
    code: str

    def __post_init__(self) -> None:
        if self.end <= self.onset:
            raise ValueError(f"event end {self.end} must exceed onset {self.onset}")


@dataclass(frozen=True)
class MatchParams:
    """Event-matching geometry, all in flights.

    ``window`` is the predictive span before the horizon in which a firing
    anticipates an event; ``horizon`` is the minimum actionable distance
    before onset; ``delay`` extends the post-event zone in which firings are
    attributed to the event or its repair.
    """

    window: int = 20
    horizon: int = 0
    delay: int = 0

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.horizon < 0 or self.delay < 0:
            raise ValueError("horizon and delay must be >= 0")


@dataclass(frozen=True)
class AlarmSeries:
    """A named binary signal over the fleet, stored as per-unit firing sets."""

    alarm_id: str
    firings: Mapping[str, frozenset[int]]

    def __post_init__(self) -> None:
        clean = {unit: frozenset(int(t) for t in ts) for unit, ts in self.firings.items()}
        object.__setattr__(self, "firings", clean)

    def units(self) -> tuple[str, ...]:
        return tuple(sorted(self.firings))

    def firings_for(self, unit_id: str) -> frozenset[int]:
        return self.firings.get(unit_id, frozenset())

    def total_firings(self) -> int:
        return sum(len(ts) for ts in self.firings.values())

    def signature(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        """Canonical form of the non-empty firing sets, for deduplication."""
        return tuple(
            (unit, tuple(sorted(ts)))
            for unit, ts in sorted(self.firings.items())
            if ts
        )


class FiringKind(Enum):
    TRUE = "true"
    IRRELEVANT = "irrelevant"
    FALSE = "false"


@dataclass(frozen=True)
class FiringLabel:
    """Classification of one alarm firing against the event layout.

    True and irrelevant firings credit the owning events (``events`` holds
    per-unit event indices; a firing inside two overlapping predictive windows
    credits both).  False firings carry the index of their false segment.
    """

    unit_id: str
    flight: int
    kind: FiringKind
    events: tuple[int, ...] = ()
    segment: int | None = None


# --------------------------------------------------------------------------
# Normalization

@dataclass(frozen=True)
class ColumnStats:
    """Per-parameter location and scale estimated on reference rows.

    ``std`` is the population (1/N) standard deviation.  NaN mean marks a
    column with no reference observations; such columns pass through
    unchanged.  Zero std marks a constant column, which passes through
    centered.
    """

    columns: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64, copy=True)
        std = np.array(self.std, dtype=np.float64, copy=True)
        if mean.shape != (len(self.columns),) or std.shape != (len(self.columns),):
            raise ValueError("stats shape does not match columns")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def fit_column_stats(
    panels: Sequence[TelemetryPanel],
    masks: Sequence[np.ndarray],
) -> ColumnStats:
    """Estimate per-column mean and population std over the masked rows.

    All panels must share the same column tuple.  Missing entries are
    ignored; a column with no observed reference value gets NaN mean.
    """
    if not panels:
        raise ValueError("no reference rows")
    columns = panels[0].columns
    rows = []
    for panel, mask in zip(panels, masks):
        if panel.columns != columns:
            raise ValueError("panels disagree on columns")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (panel.n_flights,):
            raise ValueError("mask length does not match panel")
        rows.append(panel.values[mask])
    stacked = np.vstack(rows) if rows else np.empty((0, len(columns)))
    if stacked.shape[0] == 0:
        raise ValueError("no reference rows")
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        # all-missing columns legitimately yield NaN stats
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(stacked, axis=0)
        std = np.nanstd(stacked, axis=0)  # population (1/N)
    std = np.where(np.isnan(std), 0.0, std)
    return ColumnStats(columns=columns, mean=mean, std=std)


def apply_column_stats(panel: TelemetryPanel, stats: ColumnStats) -> TelemetryPanel:
    """Z-score ``panel`` with precomputed stats; missing stays missing."""
    if panel.columns != stats.columns:
        raise ValueError("stats columns do not match panel columns")
    values = panel.values.copy()
    for j in range(len(stats.columns)):
        m = stats.mean[j]
        s = stats.std[j]
        if math.isnan(m):
            continue  # no reference data for this column
        if s == 0.0:
            values[:, j] = values[:, j] - m
        else:
            values[:, j] = (values[:, j] - m) / s
    return panel.with_values(values)


def normalize_panel(panel: TelemetryPanel, stats_rows: np.ndarray) -> TelemetryPanel:
    """Z-score each column using mean/std estimated only on ``stats_rows``.

    The reference mask lets callers estimate the statistics on a normal
    regime while transforming the whole timeline.  Constant columns pass
    through centered; missing values remain missing.
    """
    mask = np.asarray(stats_rows, dtype=bool)
    if mask.shape != (panel.n_flights,):
        raise ValueError("stats_rows length does not match panel")
    if not mask.any():
        raise ValueError("no reference rows")
    stats = fit_column_stats([panel], [mask])
    return apply_column_stats(panel, stats)


# --------------------------------------------------------------------------
# CSV interchange
#
# Telemetry: header `unit_id,flight,phase,<param>...`; missing = empty cell.
# Events:    header `unit_id,onset,end,code`.
# Scores:    header `unit_id,flight,score`.
# All UTF-8, comma-separated, `.` decimal point.

def _format_value(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_telemetry_csv(path: str | Path, panels: Sequence[TelemetryPanel]) -> None:
    panels = sorted(panels, key=lambda p: p.unit_id)
    if not panels:
        raise ValueError("no panels to write")
    columns = panels[0].columns
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "flight", "phase", *columns])
        for panel in panels:
            if panel.columns != columns:
                raise ValueError("panels disagree on columns")
            phases = panel.phases or (None,) * panel.n_flights
            for i in range(panel.n_flights):
                row = [panel.unit_id, str(int(panel.flights[i])), phases[i] or ""]
                row.extend(_format_value(v) for v in panel.values[i])
                writer.writerow(row)


def read_telemetry_csv(path: str | Path) -> list[TelemetryPanel]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["unit_id", "flight", "phase"]:
            raise ValueError(f"{path}: expected header unit_id,flight,phase,<param>...")
        columns = tuple(header[3:])
        per_unit: dict[str, list[tuple[int, str, list[float]]]] = {}
        order: list[str] = []
        for row in reader:
            if not row:
                continue
            if len(row) != 3 + len(columns):
                raise ValueError(f"{path}: row arity {len(row)} != {3 + len(columns)}")
            unit, flight, phase = row[0], int(row[1]), row[2]
            vals = [float(c) if c != "" else float("nan") for c in row[3:]]
            if unit not in per_unit:
                per_unit[unit] = []
                order.append(unit)
            per_unit[unit].append((flight, phase, vals))
    panels = []
    for unit in order:
        records = per_unit[unit]
        flights = np.array([r[0] for r in records], dtype=np.int64)
        phases = tuple(r[1] or None for r in records)
        values = np.array([r[2] for r in records], dtype=np.float64)
        values = values.reshape(len(records), len(columns))
        panels.append(
            TelemetryPanel(unit_id=unit, flights=flights, columns=columns,
                           values=values, phases=phases)
        )
    return panels


def write_events_csv(path: str | Path, events: Sequence[EventRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "onset", "end", "code"])
        for ev in events:
            writer.writerow([ev.unit_id, str(ev.onset), str(ev.end), ev.code])


def read_events_csv(path: str | Path) -> list[EventRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["unit_id", "onset", "end", "code"]:
            raise ValueError(f"{path}: expected header unit_id,onset,end,code")
        events = []
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: bad event row {row!r}")
            events.append(EventRecord(unit_id=row[0], onset=int(row[1]),
                                      end=int(row[2]), code=row[3]))
    return events


def write_scores_csv(path: str | Path, scores: Mapping[str, Mapping[int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "flight", "score"])
        for unit in sorted(scores):
            for flight in sorted(scores[unit]):
                writer.writerow([unit, str(flight), repr(float(scores[unit][flight]))])


def read_scores_csv(path: str | Path) -> dict[str, dict[int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["unit_id", "flight", "score"]:
            raise ValueError(f"{path}: expected header unit_id,flight,score")
        out: dict[str, dict[int, float]] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: bad score row {row!r}")
            score = float(row[2])
            if not math.isnan(score):
                out.setdefault(row[0], {})[int(row[1])] = score
    return out


def write_alarms_csv(path: str | Path, alarms: Iterable[AlarmSeries]) -> None:
    rows = []
    for alarm in alarms:
        for unit in alarm.units():
            for flight in sorted(alarm.firings_for(unit)):
                rows.append((unit, flight, alarm.alarm_id))
    rows.sort()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "flight", "alarm_id"])
        for unit, flight, alarm_id in rows:
            writer.writerow([unit, str(flight), alarm_id])


def read_alarms_csv(path: str | Path) -> list[AlarmSeries]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["unit_id", "flight", "alarm_id"]:
            raise ValueError(f"{path}: expected header unit_id,flight,alarm_id")
        sets: dict[str, dict[str, set[int]]] = {}
        for row in reader:
            if not row:
                continue
            unit, flight, alarm_id = row[0], int(row[1]), row[2]
            sets.setdefault(alarm_id, {}).setdefault(unit, set()).add(flight)
    return [
        AlarmSeries(alarm_id=aid, firings={u: frozenset(ts) for u, ts in units.items()})
        for aid, units in sorted(sets.items())
    ]
