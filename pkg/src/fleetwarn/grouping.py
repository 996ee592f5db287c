"""Split the parameter set into dependence groups.

Parameters that move together (high absolute correlation or high mutual
information) are modelled jointly; unrelated ones are kept apart so that a
deviation in one group cannot be masked by variance in another.  Groups are
the connected components of the graph whose edges join parameter pairs with
dependence at or above a threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from fleetwarn.core import TelemetryPanel

MEASURES = ("pearson", "mutual_info")


@dataclass(frozen=True)
class DependenceMatrix:
    """Symmetric pairwise dependence over named parameters.

    Pearson values lie in [-1, 1] with unit diagonal; mutual information is
    nonnegative (nats) with each parameter's own entropy on the diagonal.
    NaN marks a pair with too little overlapping data to compute.
    """

    columns: tuple[str, ...]
    values: np.ndarray
    measure: str

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.shape != (len(self.columns), len(self.columns)):
            raise ValueError("dependence matrix shape does not match columns")
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}; expected one of {MEASURES}")
        with np.errstate(invalid="ignore"):
            asym = np.abs(values - values.T)
        if np.any(asym[np.isfinite(asym)] > 1e-12):
            raise ValueError("dependence matrix must be symmetric")
        values.setflags(write=False)
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ParameterGrouping:
    """Disjoint parameter-name groups plus the threshold that produced them."""

    groups: tuple[tuple[str, ...], ...]
    rho: float

    def __post_init__(self) -> None:
        flat = [name for group in self.groups for name in group]
        if len(set(flat)) != len(flat):
            raise ValueError("groups must be disjoint")
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))

    def member_names(self) -> tuple[str, ...]:
        return tuple(sorted(n for g in self.groups for n in g))


def _pearson_matrix(data: np.ndarray) -> np.ndarray:
    """Signed Pearson correlation, pairwise-complete over missing entries.

    Pairs with fewer than two complete rows, or a constant column on the
    complete rows, are not computable and get NaN.
    """
    n_cols = data.shape[1]
    out = np.full((n_cols, n_cols), np.nan)
    np.fill_diagonal(out, 1.0)
    finite = np.isfinite(data)
    for i in range(n_cols):
        for j in range(i + 1, n_cols):
            both = finite[:, i] & finite[:, j]
            if both.sum() < 2:
                continue
            x = data[both, i]
            y = data[both, j]
            sx = x.std()
            sy = y.std()
            if sx == 0.0 or sy == 0.0:
                continue
            r = float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))
            out[i, j] = out[j, i] = r
    return out


def _equal_frequency_bins(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign each value a bin index by rank so bins hold ~equal counts."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.int64)
    ranks[order] = np.arange(x.size)
    return (ranks * n_bins) // x.size


def _bin_count(n: int) -> int:
    return math.isqrt(n - 1) + 1 if n > 1 else 1  # ceil(sqrt(n))


def _entropy(x: np.ndarray) -> float:
    n = x.size
    if n < 2:
        return float("nan")
    bins = _equal_frequency_bins(x, _bin_count(n))
    counts = np.bincount(bins).astype(np.float64)
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def _mutual_info_matrix(data: np.ndarray) -> np.ndarray:
    """Plug-in mutual information (nats) on equal-frequency binned values.

    Bins per variable: ceil(sqrt(N)) over the pair's complete rows.  The
    diagonal holds each column's own entropy under the same binning.
    """
    n_cols = data.shape[1]
    out = np.full((n_cols, n_cols), np.nan)
    finite = np.isfinite(data)
    for i in range(n_cols):
        xi = data[finite[:, i], i]
        out[i, i] = _entropy(xi)
        for j in range(i + 1, n_cols):
            both = finite[:, i] & finite[:, j]
            n = int(both.sum())
            if n < 2:
                continue
            n_bins = _bin_count(n)
            bi = _equal_frequency_bins(data[both, i], n_bins)
            bj = _equal_frequency_bins(data[both, j], n_bins)
            joint = np.zeros((n_bins, n_bins))
            np.add.at(joint, (bi, bj), 1.0)
            joint /= n
            pi = joint.sum(axis=1)
            pj = joint.sum(axis=0)
            nz = joint > 0
            mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pi, pj)[nz])))
            out[i, j] = out[j, i] = max(mi, 0.0)
    return out


def dependence_from_rows(
    data: np.ndarray,
    columns: Sequence[str],
    measure: str = "pearson",
) -> DependenceMatrix:
    """Dependence over the columns of a raw N x P row matrix."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != len(columns):
        raise ValueError("data must be N x len(columns)")
    if data.shape[0] < 2:
        raise ValueError("need at least 2 rows to estimate dependence")
    if measure == "pearson":
        values = _pearson_matrix(data)
    elif measure == "mutual_info":
        values = _mutual_info_matrix(data)
    else:
        raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")
    return DependenceMatrix(columns=tuple(columns), values=values, measure=measure)


def compute_dependence(panel: TelemetryPanel, measure: str = "pearson") -> DependenceMatrix:
    """Pairwise dependence between the panel's parameters.

    Pairwise-complete: rows missing either value are dropped per pair.  A
    pair left with fewer than 2 complete rows gets a missing (NaN) entry.
    """
    return dependence_from_rows(panel.values, panel.columns, measure)


def build_groups(dep: DependenceMatrix, rho: float = 0.7) -> ParameterGrouping:
    """Connected components of the thresholded dependence graph.

    Edge (i, j) exists iff |dep[i, j]| >= rho; missing entries are
    non-edges.  Members are listed sorted within each group and groups are
    ordered by their smallest member name.
    """
    if not rho > 0.0:
        raise ValueError("rho must be positive")
    with np.errstate(invalid="ignore"):
        adjacency = (np.abs(dep.values) >= rho).astype(np.int8)  # NaN compares False
    np.fill_diagonal(adjacency, 0)
    _, labels = connected_components(
        csr_matrix(adjacency), directed=False, return_labels=True
    )
    members: dict[int, list[str]] = {}
    for idx, name in enumerate(dep.columns):
        members.setdefault(int(labels[idx]), []).append(name)
    groups = sorted(tuple(sorted(g)) for g in members.values())
    return ParameterGrouping(groups=tuple(groups), rho=rho)


def write_groups_json(path: str | Path, grouping: ParameterGrouping, measure: str) -> None:
    payload = {
        "measure": measure,
        "rho": grouping.rho,
        "groups": [list(g) for g in grouping.groups],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_groups_json(path: str | Path) -> tuple[ParameterGrouping, str]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    grouping = ParameterGrouping(
        groups=tuple(tuple(g) for g in payload["groups"]),
        rho=float(payload["rho"]),
    )
    return grouping, payload["measure"]
