"""Cross-validation and curve-based evaluation of warning signals.

Leave-one-unit-out: each fold retrains the entire pipeline (normalization,
grouping, detectors, thresholds, combination search) without one unit, then
grades the pooled signal on that unit.  Fold counters are micro-aggregated:
summed first, ratios recomputed from the sums.

Curves: any per-flight score source (the pooled signal, an external
classifier, or the single-parameter thresholding baseline) is swept over its
distinct values; flagged flights match events one-to-one within a flight
tolerance, and each threshold yields a confusion row.
"""

from __future__ import annotations

import csv
import math
from bisect import insort
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fleetwarn.core import (
    EventRecord,
    NoTargetEventsError,
    TelemetryPanel,
)
from fleetwarn.matching import (
    MatchStats,
    layout_periods,
    match_stats,
    significance_samples,
    significance_test,
)
from fleetwarn.pipeline import PipelineConfig, TrainedModel, pooled_on, train_model
from fleetwarn.synth import PrecursorSet


@dataclass(frozen=True)
class FoldResult:
    """One held-out unit's evaluation, or a skip marker.

    ``window_counts`` / ``segment_counts`` are the held-out significance
    samples, kept so the aggregate p-value can be computed from the
    concatenation over folds.
    """

    held_out_unit: str
    skipped: bool
    stats: MatchStats | None = None
    precursors: PrecursorSet | None = None
    window_counts: tuple[int, ...] = ()
    segment_counts: tuple[int, ...] = ()


@dataclass(frozen=True)
class CrossvalResult:
    folds: tuple[FoldResult, ...]
    aggregate: MatchStats
    skipped_units: tuple[str, ...]


def _aggregate(folds: Sequence[FoldResult]) -> MatchStats:
    done = [f for f in folds if not f.skipped]
    k_plus = sum(f.stats.window_events for f in done)
    k_minus = sum(f.stats.false_segments for f in done)
    s_plus = sum(f.stats.true_firings for f in done)
    s_minus = sum(f.stats.false_firings for f in done)
    irrelevant = sum(f.stats.irrelevant_firings for f in done)
    u_plus = sum(f.stats.covered_events for f in done)
    u_minus = sum(f.stats.fired_false_segments for f in done)
    window_counts = [c for f in done for c in f.window_counts]
    segment_counts = [c for f in done for c in f.segment_counts]
    return MatchStats(
        window_events=k_plus,
        false_segments=k_minus,
        true_firings=s_plus,
        false_firings=s_minus,
        irrelevant_firings=irrelevant,
        covered_events=u_plus,
        fired_false_segments=u_minus,
        false_alarm_rate=s_minus / k_plus if k_plus else float("nan"),
        coverage=u_plus / k_plus if k_plus else float("nan"),
        false_to_covered=s_minus / u_plus if u_plus else float("inf"),
        p_value=significance_test(window_counts, segment_counts),
    )


def leave_one_unit_out(
    panels: Sequence[TelemetryPanel],
    events: Sequence[EventRecord],
    cfg: PipelineConfig,
) -> CrossvalResult:
    """One fold per unit: train without it, grade the pooled signal on it.

    A fold whose training units carry no target event is marked skipped.
    ``cfg.workers`` parallelizes over folds; fold training itself then runs
    single-threaded so results are independent of the worker count.
    """
    panels = sorted(panels, key=lambda p: p.unit_id)
    if len(panels) < 2:
        raise ValueError("leave-one-unit-out needs at least 2 units")
    fold_cfg = replace(cfg, workers=1)

    def run_fold(held: TelemetryPanel) -> FoldResult:
        train_panels = [p for p in panels if p.unit_id != held.unit_id]
        train_events = [ev for ev in events if ev.unit_id != held.unit_id]
        try:
            model = train_model(train_panels, train_events, fold_cfg)
        except NoTargetEventsError:
            return FoldResult(held_out_unit=held.unit_id, skipped=True)
        pooled = pooled_on(model, [held])
        held_events = [
            ev
            for ev in events
            if ev.unit_id == held.unit_id and ev.code.startswith(cfg.code_prefix)
        ]
        layout = layout_periods(
            held_events, cfg.match, {held.unit_id: held.observation_range()}
        )
        stats = match_stats(pooled, layout, require_events=False)
        window_counts, segment_counts = significance_samples(pooled, layout)
        return FoldResult(
            held_out_unit=held.unit_id,
            skipped=False,
            stats=stats,
            precursors=model.precursors,
            window_counts=tuple(window_counts),
            segment_counts=tuple(segment_counts),
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            folds = tuple(pool.map(run_fold, panels))
    else:
        folds = tuple(run_fold(p) for p in panels)
    return CrossvalResult(
        folds=folds,
        aggregate=_aggregate(folds),
        skipped_units=tuple(f.held_out_unit for f in folds if f.skipped),
    )


def lag_features(panel: TelemetryPanel, depth: int) -> TelemetryPanel:
    """Append lagged copies p@lag-k (k = 1..depth) of every column.

    The first k rows of a lag-k column are missing; original columns are
    untouched, so dropping the added columns recovers the input exactly.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth == 0:
        return panel
    if depth >= panel.n_flights:
        raise ValueError(f"depth {depth} must be < {panel.n_flights} flights")
    blocks = [panel.values]
    names = list(panel.columns)
    for name in panel.columns:
        j = panel.column_index(name)
        for k in range(1, depth + 1):
            lagged = np.full(panel.n_flights, np.nan)
            lagged[k:] = panel.values[: panel.n_flights - k, j]
            blocks.append(lagged[:, None])
            names.append(f"{name}@lag-{k}")
    return TelemetryPanel(
        unit_id=panel.unit_id,
        flights=panel.flights,
        columns=tuple(names),
        values=np.hstack(blocks),
        phases=panel.phases,
    )


def threshold_baseline(values: np.ndarray, direction: str) -> np.ndarray:
    """Turn raw parameter levels into sweepable scores.

    ``above`` keeps the values; ``below`` negates them, so in both cases a
    larger score means more suspicious and sweeping a threshold over the
    scores enumerates every fixed-level detector.
    """
    values = np.asarray(values, dtype=np.float64)
    if direction == "above":
        return values.copy()
    if direction == "below":
        return -values
    raise ValueError(f"direction must be 'above' or 'below', got {direction!r}")


@dataclass(frozen=True)
class CurvePoint:
    nu: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    fpr: float


def greedy_max_matching(
    flags: Sequence[int], onsets: Sequence[int], tolerance: int
) -> int:
    """Maximum one-to-one matching of flags to onsets within the tolerance.

    Both inputs sorted ascending.  Scanning onsets in order and taking the
    leftmost unmatched flag in [onset - tolerance, onset + tolerance] is
    optimal for equal-width intervals on a line, so this equals the exact
    maximum bipartite matching.
    """
    i = 0
    matched = 0
    for onset in onsets:
        while i < len(flags) and flags[i] < onset - tolerance:
            i += 1
        if i < len(flags) and flags[i] <= onset + tolerance:
            matched += 1
            i += 1
    return matched


def roc_pr_curves(
    scores: Mapping[str, Mapping[int, float]],
    events: Sequence[EventRecord],
    tolerance: int,
    require_events: bool = True,
) -> list[CurvePoint]:
    """Confusion curve over all distinct score thresholds, descending.

    A flight is flagged when its score >= the threshold; the sweep starts at
    +inf (nothing flagged).  Flags match event onsets one-to-one within
    ``tolerance`` flights; unmatched flags are false positives, unmatched
    events false negatives, and remaining scored flights true negatives.
    With no events the PR side is undefined: that raises unless
    ``require_events`` is False, in which case recall is NaN.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    units = sorted(scores)
    for ev in events:
        if ev.unit_id not in scores:
            raise ValueError(f"event on unit {ev.unit_id!r} which has no scores")
    n_events = len(events)
    if n_events == 0 and require_events:
        raise NoTargetEventsError("no events: precision-recall undefined")

    onsets: dict[str, list[int]] = {u: [] for u in units}
    for ev in events:
        onsets[ev.unit_id].append(ev.onset)
    for u in units:
        onsets[u].sort()

    triples: list[tuple[float, str, int]] = []
    relevant: dict[tuple[str, int], bool] = {}
    for u in units:
        near = set()
        for onset in onsets[u]:
            near.update(range(onset - tolerance, onset + tolerance + 1))
        for flight in sorted(scores[u]):
            s = scores[u][flight]
            if math.isnan(s):
                continue
            triples.append((s, u, flight))
            relevant[(u, flight)] = flight in near
    n_scored = len(triples)
    triples.sort(key=lambda t: (-t[0], t[1], t[2]))

    def emit(nu: float, n_flags: int, tp: int) -> CurvePoint:
        fp = n_flags - tp
        fn = n_events - tp
        tn = max(n_scored - tp - fp - fn, 0)
        precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
        recall = tp / n_events if n_events else float("nan")
        fpr = fp / (fp + tn) if fp + tn else 0.0
        return CurvePoint(nu, tp, fp, fn, tn, precision, recall, fpr)

    points = [emit(float("inf"), 0, 0)]
    active: dict[str, list[int]] = {u: [] for u in units}
    n_flags = 0
    tp = 0
    i = 0
    while i < len(triples):
        nu = triples[i][0]
        changed_matching = False
        while i < len(triples) and triples[i][0] == nu:
            _, u, flight = triples[i]
            n_flags += 1
            if relevant[(u, flight)]:
                insort(active[u], flight)
                changed_matching = True
            i += 1
        if changed_matching:
            tp = sum(
                greedy_max_matching(active[u], onsets[u], tolerance)
                for u in units
                if onsets[u]
            )
        points.append(emit(float(nu), n_flags, tp))
    return points


def operating_point(points: Sequence[CurvePoint], nu: float = 0.6) -> CurvePoint:
    """The emitted point whose threshold is nearest nu (ties: larger nu)."""
    if not points:
        raise ValueError("no curve points")
    return min(points, key=lambda p: (abs(p.nu - nu), -p.nu))


def precision_at_recall(points: Sequence[CurvePoint], recall: float) -> float:
    """Best achievable precision at recall >= the requested level."""
    eligible = [p.precision for p in points if not math.isnan(p.recall) and p.recall >= recall]
    if not eligible:
        raise ValueError(f"no curve point reaches recall {recall}")
    return max(eligible)


def write_curves_csv(path: str | Path, points: Sequence[CurvePoint]) -> None:
    def _fmt(x: float) -> str:
        return "" if math.isnan(x) else repr(float(x))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["nu", "tp", "fp", "fn", "tn", "precision", "recall", "fpr"])
        for p in points:
            writer.writerow(
                [
                    _fmt(p.nu),
                    str(p.tp),
                    str(p.fp),
                    str(p.fn),
                    str(p.tn),
                    _fmt(p.precision),
                    _fmt(p.recall),
                    _fmt(p.fpr),
                ]
            )
