"""Average treatment effect on the treated from counterfactual predictive draws.

Effects are on the incidence-rate scale: for draw ``m`` and treated time
``t``::

    ATT_t^(m) = mean over units i treated at t of (Y_it - Y_it^(m)(0)) / theta_it * denominator

Draws where the numerical guard fired (rows of ``-1``) are dropped before
any averaging and counted in ``dropped_fraction``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .panel import PanelData
from .plotting import line_band_svg

log = logging.getLogger(__name__)

UNSTABLE_FRACTION = 0.10


class AttError(ValueError):
    pass


@dataclass
class Summary:
    mean: float
    lo: float
    hi: float

    @classmethod
    def of(cls, draws: np.ndarray, level: float = 0.95) -> "Summary":
        q = (1.0 - level) / 2.0
        lo, hi = np.quantile(draws, [q, 1.0 - q])
        return cls(float(np.mean(draws)), float(lo), float(hi))


@dataclass
class AttResult:
    times: list                               # time labels with a treated cell
    per_time: np.ndarray                      # (draws, n_times)
    per_time_summary: list
    overall: np.ndarray | None = None         # (draws,)
    overall_summary: Summary | None = None
    per_group: dict = field(default_factory=dict)   # label -> (draws,)
    per_group_summary: dict = field(default_factory=dict)
    rate_denominator: float = 1e5
    dropped_fraction: float = 0.0

    @property
    def unstable(self) -> bool:
        return self.dropped_fraction > UNSTABLE_FRACTION


def _valid_rows(predictive: np.ndarray):
    """Flatten chains and drop guarded rows -> (rows, dropped fraction)."""
    p = np.asarray(predictive, dtype=float)
    flat = p.reshape(-1, p.shape[-1])
    guarded = np.all(flat == -1.0, axis=1) if flat.shape[1] else np.zeros(len(flat), bool)
    return flat[~guarded], float(guarded.mean()) if len(flat) else 0.0


def _cell_effects(panel: PanelData, predictive, cells, rate_denominator, observed_override):
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    rows, dropped = _valid_rows(predictive)
    if len(rows) == 0:
        raise AttError("every predictive draw is a guard sentinel; no ATT can be computed")
    y1 = panel.counts if observed_override is None else np.asarray(observed_override, dtype=float)
    ii, tt = cells[:, 0], cells[:, 1]
    theta = panel.populations[ii, tt]
    eff = (y1[ii, tt][None, :] - rows) / theta[None, :] * rate_denominator
    return eff, cells, dropped


def _average_over_times(eff, cells, unit_filter=None):
    """Per-time ATT draws, averaging over units at each time."""
    keep = np.ones(len(cells), bool) if unit_filter is None else unit_filter[cells[:, 0]]
    times = np.unique(cells[keep, 1])
    out = np.empty((eff.shape[0], len(times)))
    for j, t in enumerate(times):
        sel = keep & (cells[:, 1] == t)
        out[:, j] = eff[:, sel].mean(axis=1)
    return times, out


def att_per_time(panel: PanelData, predictive: np.ndarray, cells=None,
                 rate_denominator: float = 1e5, observed_override=None) -> AttResult:
    """Time-specific ATT draws over the treated cells.

    ``predictive`` is ``(..., n_cells)`` counterfactual draws for ``cells``
    (default: the treated cells in row-major order). ``observed_override``
    substitutes a different ``Y(1)`` grid, e.g. smoothed outcomes.
    """
    if cells is None:
        cells = np.argwhere(panel.treated)
    eff, cells, dropped = _cell_effects(panel, predictive, cells, rate_denominator,
                                        observed_override)
    times, per_time = _average_over_times(eff, cells)
    if dropped > UNSTABLE_FRACTION:
        log.warning("%.1f%% of predictive draws were guard sentinels; the fit is unstable",
                    100 * dropped)
    return AttResult(
        times=[panel.time_labels[t] for t in times],
        per_time=per_time,
        per_time_summary=[Summary.of(per_time[:, j]) for j in range(len(times))],
        rate_denominator=rate_denominator,
        dropped_fraction=dropped,
    )


def att_overall(result: AttResult) -> AttResult:
    """Overall ATT: unweighted mean of the time-specific ATTs, draw by draw."""
    result.overall = result.per_time.mean(axis=1)
    result.overall_summary = Summary.of(result.overall)
    return result


def att_by_group(panel: PanelData, predictive: np.ndarray, result: AttResult | None = None,
                 cells=None, rate_denominator: float = 1e5, observed_override=None) -> AttResult:
    """Per-group ATT: restrict to each group's treated units, then average over times."""
    if cells is None:
        cells = np.argwhere(panel.treated)
    if result is None:
        result = att_overall(att_per_time(panel, predictive, cells, rate_denominator,
                                          observed_override))
    eff, cells, _ = _cell_effects(panel, predictive, cells, rate_denominator, observed_override)
    groups = np.asarray(panel.group_of_unit)
    for label in dict.fromkeys(panel.group_of_unit):
        members = groups == label
        if not members[cells[:, 0]].any():
            log.info("group %s has no treated units; skipped", label)
            continue
        _, per_time = _average_over_times(eff, cells, members)
        result.per_group[label] = per_time.mean(axis=1)
        result.per_group_summary[label] = Summary.of(result.per_group[label])
    return result


def estimate_att(panel: PanelData, predictive: np.ndarray, cells=None,
                 rate_denominator: float = 1e5, observed_override=None) -> AttResult:
    """Time, group and overall ATT in one call."""
    return att_by_group(panel, predictive, cells=cells, rate_denominator=rate_denominator,
                        observed_override=observed_override)


def pretreatment_att_diagnostic(panel: PanelData, predictive: np.ndarray, cells,
                                rate_denominator: float = 1e5):
    """ATT series at every time for the ever-treated units.

    ``predictive`` must cover every cell of the ever-treated units (pre-period
    cells come from in-sample predictive draws). Returns ``(time_labels,
    summaries)`` of length T; pre-treatment values near zero indicate the
    model reproduces the treated units' untreated trajectory.
    """
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    ever = panel.treated.any(axis=1)
    need = {(i, t) for i in np.flatnonzero(ever) for t in range(panel.n_times)}
    if not need <= set(map(tuple, cells.tolist())):
        raise AttError("predictive draws must cover all cells of the ever-treated units")
    eff, cells, _ = _cell_effects(panel, predictive, cells, rate_denominator, None)
    times, per_time = _average_over_times(eff, cells, ever)
    return [panel.time_labels[t] for t in times], [Summary.of(per_time[:, j])
                                                   for j in range(per_time.shape[1])]


# output ---------------------------------------------------------------------------

def write_att_csv(result: AttResult, path, header: str = "") -> None:
    """One row per time, per group and the overall effect."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", "label", "att_mean", "ci_lo", "ci_hi", "dropped_fraction"])
        rows = [("time", t, s) for t, s in zip(result.times, result.per_time_summary)]
        rows += [("group", g, s) for g, s in result.per_group_summary.items()]
        if result.overall_summary is not None:
            rows.append(("overall", "all", result.overall_summary))
        for scope, label, s in rows:
            w.writerow([scope, label, f"{s.mean:.6g}", f"{s.lo:.6g}", f"{s.hi:.6g}",
                        f"{result.dropped_fraction:.6g}"])


def att_svg(times, summaries, treatment_start=None, title: str = "ATT over time",
            ylabel: str = "ATT per 100,000", width: int = 640, height: int = 360) -> str:
    """Line plot with a shaded interval band and a dashed treatment-start rule."""
    return line_band_svg([float(t) for t in times], [s.mean for s in summaries],
                         [s.lo for s in summaries], [s.hi for s in summaries],
                         vline=treatment_start, title=title, ylabel=ylabel,
                         width=width, height=height)
