"""End-to-end training pipeline shared by the CLI and cross-validation.

One call to :func:`train_model` performs: target-event selection, normal
regime masking, fleet-pooled z-score normalization, dependence grouping,
per-group subspace detectors with quantile thresholds, alarm binarization,
event matching, and the filtered combination search.  The fitted model can
then score any fleet (training or held-out) with :func:`pooled_on`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from fleetwarn.core import (
    AlarmSeries,
    ColumnStats,
    EventRecord,
    MatchParams,
    NoTargetEventsError,
    TelemetryPanel,
    apply_column_stats,
    fit_column_stats,
)
from fleetwarn.detect import (
    NoNormalRegimeError,
    SubspaceDetector,
    binarize,
    fit_subspace_from_rows,
    fit_threshold,
    score_reconstruction,
    select_normal_regime,
)
from fleetwarn.grouping import ParameterGrouping, build_groups, dependence_from_rows
from fleetwarn.matching import PeriodLayout, layout_periods
from fleetwarn.synth import PrecursorSet, SearchConfig, compose_and, search_combinations


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the pipeline needs beyond the data itself.

    ``quantile_overrides`` maps a group's smallest member name to the
    quantile used for that group instead of the default.
    """

    match: MatchParams = MatchParams()
    rank: int = 1
    quantile: float = 0.95
    quantile_overrides: Mapping[str, float] = field(default_factory=dict)
    normal_before: int = 50
    normal_after: int = 30
    measure: str = "pearson"
    rho: float = 0.7
    search: SearchConfig = SearchConfig()
    code_prefix: str = ""
    workers: int = 1

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie in (0, 1)")
        for key, q in self.quantile_overrides.items():
            if not 0.0 < q < 1.0:
                raise ValueError(f"quantile override for {key!r} must lie in (0, 1)")
        if self.normal_before < 0 or self.normal_after < 0:
            raise ValueError("normal_before and normal_after must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "quantile_overrides", dict(self.quantile_overrides))


@dataclass(frozen=True)
class TrainedModel:
    """Everything fitted on a training fleet, ready to score new panels."""

    config: PipelineConfig
    column_stats: ColumnStats
    grouping: ParameterGrouping
    detectors: tuple[SubspaceDetector, ...]
    alarms: tuple[AlarmSeries, ...]
    layout: PeriodLayout
    precursors: PrecursorSet
    target_events: tuple[EventRecord, ...]

    def detector_by_alarm_id(self) -> dict[str, SubspaceDetector]:
        return {det.alarm_id: det for det in self.detectors}


def select_target_events(
    events: Sequence[EventRecord], code_prefix: str
) -> list[EventRecord]:
    """Events whose code starts with the prefix (empty prefix keeps all)."""
    kept = [ev for ev in events if ev.code.startswith(code_prefix)]
    if not kept:
        raise NoTargetEventsError(
            f"no events match code prefix {code_prefix!r}"
        )
    return kept


def normal_masks(
    panels: Sequence[TelemetryPanel],
    events: Sequence[EventRecord],
    before: int,
    after: int,
) -> list[np.ndarray]:
    """Per-panel normal-regime masks; a unit may contribute nothing."""
    masks = []
    for panel in panels:
        try:
            masks.append(select_normal_regime(panel, events, before, after))
        except NoNormalRegimeError:
            masks.append(np.zeros(panel.n_flights, dtype=bool))
    return masks


def _score_map(
    det: SubspaceDetector, panels: Sequence[TelemetryPanel]
) -> dict[str, dict[int, float]]:
    return {
        panel.unit_id: dict(
            zip((int(t) for t in panel.flights), score_reconstruction(det, panel))
        )
        for panel in panels
    }


def _fit_group_detector(
    group: tuple[str, ...],
    normal_rows: np.ndarray,
    cfg: PipelineConfig,
) -> SubspaceDetector:
    rank = min(cfg.rank, len(group))
    det = fit_subspace_from_rows(normal_rows, group, rank)
    q = cfg.quantile_overrides.get(group[0], cfg.quantile)
    if q != det.quantile:
        det = replace(det, quantile=q)
    complete = normal_rows[np.isfinite(normal_rows).all(axis=1)]
    centered = complete - det.mean
    residual = centered - (centered @ det.basis) @ det.basis.T
    training_scores = np.einsum("ij,ij->i", residual, residual)
    return det.with_threshold(fit_threshold(training_scores, q))


def train_model(
    panels: Sequence[TelemetryPanel],
    events: Sequence[EventRecord],
    cfg: PipelineConfig,
) -> TrainedModel:
    """Fit the whole warning pipeline on the given fleet.

    Raises :class:`NoTargetEventsError` when no event matches the target
    prefix, and ValueError when the fleet has no normal-regime rows at all.
    """
    if not panels:
        raise ValueError("no panels")
    panels = sorted(panels, key=lambda p: p.unit_id)
    target_events = select_target_events(events, cfg.code_prefix)

    masks = normal_masks(panels, target_events, cfg.normal_before, cfg.normal_after)
    stats = fit_column_stats(list(panels), masks)
    normalized = [apply_column_stats(p, stats) for p in panels]
    normal_rows = np.vstack([p.values[m] for p, m in zip(normalized, masks)])

    dep = dependence_from_rows(normal_rows, panels[0].columns, cfg.measure)
    grouping = build_groups(dep, cfg.rho)

    col_index = {name: i for i, name in enumerate(panels[0].columns)}

    def fit_one(group: tuple[str, ...]) -> tuple[SubspaceDetector, AlarmSeries]:
        idx = [col_index[name] for name in group]
        det = _fit_group_detector(group, normal_rows[:, idx], cfg)
        alarm = binarize(det, _score_map(det, normalized))
        return det, alarm

    groups = list(grouping.groups)
    if cfg.workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            fitted = list(pool.map(fit_one, groups))
    else:
        fitted = [fit_one(g) for g in groups]
    detectors = tuple(det for det, _ in fitted)
    alarms = tuple(alarm for _, alarm in fitted)

    ranges = {p.unit_id: p.observation_range() for p in panels}
    layout = layout_periods(target_events, cfg.match, ranges)

    precursors = search_combinations(
        list(alarms),
        layout,
        cfg.search,
        target_code=cfg.code_prefix,
        workers=cfg.workers,
    )
    return TrainedModel(
        config=cfg,
        column_stats=stats,
        grouping=grouping,
        detectors=detectors,
        alarms=alarms,
        layout=layout,
        precursors=precursors,
        target_events=tuple(target_events),
    )


def elementary_alarms_on(
    model: TrainedModel, panels: Sequence[TelemetryPanel]
) -> dict[str, AlarmSeries]:
    """Score new panels with the fitted detectors and thresholds."""
    panels = sorted(panels, key=lambda p: p.unit_id)
    normalized = [apply_column_stats(p, model.column_stats) for p in panels]
    out: dict[str, AlarmSeries] = {}
    for det in model.detectors:
        out[det.alarm_id] = binarize(det, _score_map(det, normalized))
    return out


def pooled_on(model: TrainedModel, panels: Sequence[TelemetryPanel]) -> AlarmSeries:
    """The trained warning signal applied to (possibly unseen) panels."""
    alarms = elementary_alarms_on(model, panels)
    units = sorted(p.unit_id for p in panels)
    firings: dict[str, set[int]] = {u: set() for u in units}
    for combo in model.precursors.combinations:
        members = [alarms[mid] for mid in combo.members]
        composed = compose_and(members)
        for unit in composed.units():
            firings[unit].update(composed.firings_for(unit))
    return AlarmSeries(
        alarm_id="pooled", firings={u: frozenset(ts) for u, ts in firings.items()}
    )
