"""Panel data container, CSV ingestion and treated-cell masking.

A panel is an ``N x T`` grid of case counts with matching person-time
offsets, optional covariates, a treatment indicator and a group label per
unit. Treatment is absorbing: once a unit is treated it stays treated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SCHEMA = {
    "unit": "unit",
    "group": "group",
    "time": "time",
    "count": "count",
    "population": "population",
    "treated": "treated",
    "covariate_prefix": "cov_",
}


class PanelError(ValueError):
    """Raised when panel input violates the panel invariants."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelData:
    """Unit x time panel of counts with offsets and a staircase treatment mask.

    Parameters
    ----------
    counts : (N, T) array
        Non-negative case counts. Integer valued unless ``smoothed``.
    populations : (N, T) array
        Strictly positive person-time at risk (the offset).
    covariates : (N, T, P) array
        Time-varying covariates, ``P`` may be zero.
    treated : (N, T) bool array
        Treatment indicator, absorbing in time.
    unit_ids, group_of_unit : sequences of str, length N
    time_labels : sequence of int, length T
    covariate_names : sequence of str, length P
    smoothed : bool
        True when counts were replaced by real-valued smoothed predictions.
    """

    counts: np.ndarray
    populations: np.ndarray
    covariates: np.ndarray
    treated: np.ndarray
    unit_ids: tuple
    group_of_unit: tuple
    time_labels: tuple
    covariate_names: tuple = ()
    smoothed: bool = False

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        pops = np.asarray(self.populations, dtype=float)
        treated = np.asarray(self.treated, dtype=bool)
        if counts.ndim != 2:
            raise PanelError("counts must be a 2-d (unit x time) grid")
        n, t = counts.shape
        cov = self.covariates
        if cov is None:
            cov = np.zeros((n, t, 0))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 2:
            cov = cov[:, :, None]
        if pops.shape != (n, t) or treated.shape != (n, t) or cov.shape[:2] != (n, t):
            raise PanelError("counts, populations, treated and covariates must share an N x T shape")
        unit_ids = tuple(str(u) for u in self.unit_ids)
        groups = tuple(str(g) for g in self.group_of_unit)
        times = tuple(int(x) for x in self.time_labels)
        names = tuple(self.covariate_names) or tuple(f"cov_{j}" for j in range(cov.shape[2]))
        if len(unit_ids) != n or len(groups) != n or len(times) != t or len(names) != cov.shape[2]:
            raise PanelError("label lengths do not match the grid shape")
        if len(set(unit_ids)) != n:
            raise PanelError("unit ids must be unique")
        _validate_grids(counts, pops, cov, treated, unit_ids, times, self.smoothed)
        object.__setattr__(self, "counts", _readonly(counts))
        object.__setattr__(self, "populations", _readonly(pops))
        object.__setattr__(self, "covariates", _readonly(cov))
        object.__setattr__(self, "treated", _readonly(treated))
        object.__setattr__(self, "unit_ids", unit_ids)
        object.__setattr__(self, "group_of_unit", groups)
        object.__setattr__(self, "time_labels", times)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_units(self) -> int:
        return self.counts.shape[0]

    @property
    def n_times(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def treated_units(self) -> np.ndarray:
        """Indices of units treated at any time."""
        return np.flatnonzero(self.treated.any(axis=1))

    @property
    def treated_times(self) -> np.ndarray:
        """Indices of times at which at least one unit is treated."""
        return np.flatnonzero(self.treated.any(axis=0))

    def rates(self, denominator: float = 1.0) -> np.ndarray:
        return self.counts / self.populations * denominator

    def with_counts(self, counts: np.ndarray, smoothed: bool | None = None) -> "PanelData":
        return replace(self, counts=counts, smoothed=self.smoothed if smoothed is None else smoothed)

    def subset_units(self, keep: Sequence[int]) -> "PanelData":
        keep = np.asarray(keep, dtype=int)
        return PanelData(
            counts=self.counts[keep],
            populations=self.populations[keep],
            covariates=self.covariates[keep],
            treated=self.treated[keep],
            unit_ids=[self.unit_ids[i] for i in keep],
            group_of_unit=[self.group_of_unit[i] for i in keep],
            time_labels=self.time_labels,
            covariate_names=self.covariate_names,
            smoothed=self.smoothed,
        )


def _validate_grids(counts, pops, cov, treated, unit_ids, times, smoothed):
    def where(mask):
        i, t = np.argwhere(mask)[0]
        return unit_ids[i], times[t]

    if not np.all(np.isfinite(counts)):
        raise PanelError("non-finite count at (unit, time) = %s" % (where(~np.isfinite(counts)),))
    if np.any(counts < 0):
        raise PanelError("negative count at (unit, time) = %s" % (where(counts < 0),))
    if not smoothed and np.any(counts != np.round(counts)):
        raise PanelError("non-integer count at (unit, time) = %s" % (where(counts != np.round(counts)),))
    bad = ~(pops > 0) | ~np.isfinite(pops)
    if bad.any():
        raise PanelError("non-positive population at (unit, time) = %s" % (where(bad),))
    if not np.all(np.isfinite(cov)):
        raise PanelError("missing covariate at (unit, time) = %s" % (where(~np.isfinite(cov).all(axis=2)),))
    # absorbing treatment: no True -> False transition along time
    drop = treated[:, :-1] & ~treated[:, 1:]
    if drop.any():
        i, t = np.argwhere(drop)[0]
        raise PanelError(
            "staircase violation: unit %s treated at time %s but untreated at (%s, %s)"
            % (unit_ids[i], times[t], unit_ids[i], times[t + 1])
        )


@dataclass(frozen=True)
class MaskedPanel:
    """A panel whose treated cells are hidden from the model.

    ``observed`` is ``~panel.treated``. Grids are shared with the source
    panel unchanged; model code reads counts only where ``observed`` is true
    (see :attr:`observed_counts`).
    """

    counts: np.ndarray
    populations: np.ndarray
    covariates: np.ndarray
    observed: np.ndarray
    unit_ids: tuple
    group_of_unit: tuple
    time_labels: tuple
    covariate_names: tuple = ()

    @property
    def n_units(self) -> int:
        return self.counts.shape[0]

    @property
    def n_times(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]

    @property
    def observed_counts(self) -> np.ndarray:
        """Counts with masked cells set to NaN."""
        return np.where(self.observed, self.counts, np.nan)

    @property
    def masked(self) -> np.ndarray:
        return ~self.observed

    @property
    def masked_cells(self) -> np.ndarray:
        """(n_masked, 2) array of (unit, time) indices in row-major order."""
        return np.argwhere(~self.observed)


def mask_treated(panel: PanelData) -> MaskedPanel:
    """Hide the treated cells: observed = not treated."""
    observed = ~panel.treated
    return MaskedPanel(
        counts=panel.counts,
        populations=panel.populations,
        covariates=panel.covariates,
        observed=_readonly(observed),
        unit_ids=panel.unit_ids,
        group_of_unit=panel.group_of_unit,
        time_labels=panel.time_labels,
        covariate_names=panel.covariate_names,
    )


def pretreatment_totals(panel: PanelData) -> np.ndarray:
    """Case totals over untreated cells per unit (the full period for never-treated units)."""
    return np.where(panel.treated, 0.0, panel.counts).sum(axis=1)


def min_pretreatment_filter(panel: PanelData, min_cases: float) -> PanelData:
    """Keep units with strictly more than ``min_cases`` pre-treatment cases."""
    if min_cases < 0:
        raise ValueError("min_cases must be >= 0")
    keep = np.flatnonzero(pretreatment_totals(panel) > min_cases)
    if keep.size == 0:
        raise PanelError(f"all units dropped by min_cases={min_cases}")
    if keep.size == panel.n_units:
        return panel
    return panel.subset_units(keep)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "t", "yes", "y"):
        return True
    if v in ("0", "false", "f", "no", "n", ""):
        return False
    raise PanelError(f"cannot parse treated flag {s!r}")


def load_panel(path: str | Path, schema: Mapping[str, str] | None = None) -> PanelData:
    """Read a long-format panel CSV (one row per unit and time).

    Lines starting with ``#`` are treated as comments. Rows may come in any
    order; every (unit, time) pair must appear exactly once. Units keep the
    order of their first appearance, times are sorted. Columns whose
    name starts with the covariate prefix become covariates, in header order.
    A ``smoothed`` column with any true value marks the counts as real-valued.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    header = reader.fieldnames or []
    for key in ("unit", "group", "time", "count", "population", "treated"):
        if cols[key] not in header:
            raise PanelError(f"missing column {cols[key]!r} in {path}")
    cov_cols = [c for c in header if c.startswith(cols["covariate_prefix"])]
    smoothed_col = "smoothed" if "smoothed" in header else None

    records = {}
    groups = {}
    unit_order: list[str] = []
    time_set = set()
    smoothed = False
    for lineno, row in enumerate(reader, start=2):
        u = row[cols["unit"]].strip()
        try:
            t = int(float(row[cols["time"]]))
        except ValueError:
            raise PanelError(f"line {lineno}: bad time value {row[cols['time']]!r}") from None
        if (u, t) in records:
            raise PanelError(f"duplicate cell at (unit, time) = ({u}, {t})")
        try:
            count = float(row[cols["count"]])
            pop = float(row[cols["population"]])
            cov = [float(row[c]) if row[c] not in ("", None) else np.nan for c in cov_cols]
        except ValueError as exc:
            raise PanelError(f"line {lineno} at (unit, time) = ({u}, {t}): {exc}") from None
        records[(u, t)] = (count, pop, _parse_bool(row[cols["treated"]]), cov)
        if smoothed_col and _parse_bool(row[smoothed_col] or "0"):
            smoothed = True
        g = row[cols["group"]].strip()
        if u not in groups:
            groups[u] = g
            unit_order.append(u)
        elif groups[u] != g:
            raise PanelError(f"unit {u} has more than one group label")
        time_set.add(t)

    units = unit_order
    times = sorted(time_set)
    n, tt, p = len(units), len(times), len(cov_cols)
    counts = np.empty((n, tt))
    pops = np.empty((n, tt))
    treated = np.zeros((n, tt), dtype=bool)
    covs = np.empty((n, tt, p))
    for i, u in enumerate(units):
        for j, t in enumerate(times):
            rec = records.get((u, t))
            if rec is None:
                raise PanelError(f"incomplete rectangle: missing cell at (unit, time) = ({u}, {t})")
            counts[i, j], pops[i, j], treated[i, j], covs[i, j] = rec
    return PanelData(
        counts=counts,
        populations=pops,
        covariates=covs,
        treated=treated,
        unit_ids=units,
        group_of_unit=[groups[u] for u in units],
        time_labels=times,
        covariate_names=[c for c in cov_cols],
        smoothed=smoothed,
    )


def _fmt(x: float) -> str:
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def write_panel(panel: PanelData, path: str | Path, header: str | None = None) -> None:
    """Write ``panel`` in the long format read by :func:`load_panel`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"{line}\n" if line.startswith("#") else f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        cols = ["unit", "group", "time", "count", "population", "treated", *panel.covariate_names]
        if panel.smoothed:
            cols.append("smoothed")
        w.writerow(cols)
        for i, u in enumerate(panel.unit_ids):
            for j, t in enumerate(panel.time_labels):
                row = [u, panel.group_of_unit[i], t, _fmt(panel.counts[i, j]),
                       _fmt(panel.populations[i, j]), int(panel.treated[i, j])]
                row += [repr(float(v)) for v in panel.covariates[i, j]]
                if panel.smoothed:
                    row.append(1)
                w.writerow(row)
