"""Plug-in lower/upper bounds on a candidate policy's value and their gap decomposition."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import EmptyDatasetError
from .policy_sets import (
    EvaluationPolicy,
    LowerCell,
    PolicySetsAtX,
    SetMode,
    UpperCell,
    classify,
    sets_at,
)
from .trial_data import Registry, TrialDataset, normalize_code


class Source(enum.Enum):
    CONDITIONAL_MEAN = "conditional_mean"
    Y_MIN = "y_min"
    Y_MAX = "y_max"


class GapComponent(enum.Enum):
    NONE = "none"
    NO_AGREEMENT = "no_agreement"
    BRACKETED = "bracketed"
    ONLY_BELOW = "only_below"
    ONLY_ABOVE = "only_above"


@dataclass(frozen=True)
class CellTable:
    """Per-(covariate, arm) outcome totals and weights, plus covariate masses.

    Built either from trial records (weights are counts) or from population
    quantities (weights proportional to arm probabilities). Pooled means over
    a set of arms are ``sum(sums) / sum(weights)``.
    """

    registry: Registry
    weights: np.ndarray
    sums: np.ndarray
    pmf: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: TrialDataset) -> "CellTable":
        if dataset.n == 0:
            raise EmptyDatasetError("bounds need at least one record")
        counts = dataset.cell_counts.astype(np.float64)
        pmf = np.bincount(dataset.x_idx, minlength=len(dataset.covariate_support)) / dataset.n
        return cls(dataset.registry, counts, np.asarray(dataset.cell_sums, dtype=np.float64), pmf)

    @classmethod
    def from_population(cls, registry: Registry, pmf, cell_means) -> "CellTable":
        """``cell_means[x, arm]`` are population means; arms are weighted by design probability."""
        pmf = np.asarray(pmf, dtype=np.float64)
        means = np.asarray(cell_means, dtype=np.float64)
        probs = np.array([p.arm_prob for p in registry.policies])
        weights = np.broadcast_to(probs, means.shape).copy()
        return cls(registry, weights, weights * means, pmf)

    def pooled_mean(self, xi: int, policy_ids) -> float | None:
        cols = [self.registry.policy_index(pid) for pid in sorted(policy_ids)]
        w = math.fsum(self.weights[xi, cols])
        if w <= 0:
            return None
        return math.fsum(self.sums[xi, cols]) / w


def _table(data: TrialDataset | CellTable) -> CellTable:
    return data if isinstance(data, CellTable) else CellTable.from_dataset(data)


@dataclass(frozen=True)
class HalfBound:
    value: float
    source: Source
    policy_ids: frozenset[str]
    cell: LowerCell | UpperCell
    flagged: bool = False


@dataclass(frozen=True)
class CellBounds:
    x: str
    lower: float
    upper: float
    lower_source: Source
    upper_source: Source
    lower_policy_ids: frozenset[str]
    upper_policy_ids: frozenset[str]
    lower_cell: LowerCell
    upper_cell: UpperCell
    flagged: bool = False

    @property
    def crossed(self) -> bool:
        return self.lower > self.upper


def _half(
    x, pi_e: EvaluationPolicy, table: CellTable, mode: SetMode, perf_eps: float, upper: bool
) -> HalfBound:
    reg = table.registry
    x = normalize_code(x)
    xi = reg.covariate_support.index(x)
    sets = sets_at(reg, pi_e, x, perf_eps)
    lower_cell, upper_cell = classify(sets, pi_e.action(x), reg.neutral_action, mode)
    cell = upper_cell if upper else lower_cell
    fallback, fallback_source = (reg.y_max, Source.Y_MAX) if upper else (reg.y_min, Source.Y_MIN)
    if cell in (LowerCell.NEUTRAL_COVERED, UpperCell.NEUTRAL_COVERED):
        ids = sets.agree
    elif cell is LowerCell.NONNEUTRAL_COVERED_LOW:
        ids = sets.lower_set(mode)
    elif cell is UpperCell.NONNEUTRAL_COVERED_HIGH:
        ids = sets.upper_set(mode)
    else:
        return HalfBound(fallback, fallback_source, frozenset(), cell)
    mean = table.pooled_mean(xi, ids)
    if mean is None:
        # design says covered but no samples landed in the cell
        return HalfBound(fallback, fallback_source, ids, cell, flagged=True)
    return HalfBound(mean, Source.CONDITIONAL_MEAN, ids, cell)


def conditional_lower(
    x, pi_e: EvaluationPolicy, data: TrialDataset | CellTable, set_mode: SetMode = SetMode.TIGHT, perf_eps: float = 0.0
) -> HalfBound:
    return _half(x, pi_e, _table(data), set_mode, perf_eps, upper=False)


def conditional_upper(
    x, pi_e: EvaluationPolicy, data: TrialDataset | CellTable, set_mode: SetMode = SetMode.TIGHT, perf_eps: float = 0.0
) -> HalfBound:
    return _half(x, pi_e, _table(data), set_mode, perf_eps, upper=True)


@dataclass
class BoundsResult:
    policy: str
    L: float
    U: float
    cells: list[CellBounds]
    pmf: dict[str, float]
    crossed: bool = False
    clamped: bool = False

    def __iter__(self) -> Iterator:
        return iter((self.L, self.U, self.cells))


def exact_bounds(
    pi_e: EvaluationPolicy,
    data: TrialDataset | CellTable,
    set_mode: SetMode = SetMode.TIGHT,
    perf_eps: float = 0.0,
    clamp: bool = False,
) -> BoundsResult:
    """Covariate-weighted average of the per-cell lower and upper bounds.

    A lower bound above the upper bound (sampling noise) is reported via
    ``crossed``; with ``clamp`` both are set to their midpoint.
    """
    table = _table(data)
    support = table.registry.covariate_support
    cells = []
    for x in support:
        lo = _half(x, pi_e, table, set_mode, perf_eps, upper=False)
        hi = _half(x, pi_e, table, set_mode, perf_eps, upper=True)
        cells.append(
            CellBounds(
                x=x,
                lower=lo.value,
                upper=hi.value,
                lower_source=lo.source,
                upper_source=hi.source,
                lower_policy_ids=lo.policy_ids,
                upper_policy_ids=hi.policy_ids,
                lower_cell=lo.cell,
                upper_cell=hi.cell,
                flagged=lo.flagged or hi.flagged,
            )
        )
    L = math.fsum(c.lower * m for c, m in zip(cells, table.pmf))
    U = math.fsum(c.upper * m for c, m in zip(cells, table.pmf))
    result = BoundsResult(pi_e.id, L, U, cells, dict(zip(support, table.pmf.tolist())))
    if L > U:
        result.crossed = True
        if clamp:
            mid = 0.5 * (L + U)
            result.L = result.U = mid
            result.clamped = True
    return result


@dataclass(frozen=True)
class GapTerm:
    x: str
    component: GapComponent
    delta: float
    mass: float


@dataclass
class DecompositionReport:
    policy: str
    terms: list[GapTerm] = field(default_factory=list)
    total_gap: float = 0.0

    def by_x(self) -> dict[str, GapTerm]:
        return {t.x: t for t in self.terms}


def _component(cell: CellBounds, sets: PolicySetsAtX, mode: SetMode) -> GapComponent:
    if not sets.agree:
        return GapComponent.NO_AGREEMENT
    if cell.lower_cell is LowerCell.NEUTRAL_COVERED:
        return GapComponent.NONE
    below, above = bool(sets.lower_set(mode)), bool(sets.upper_set(mode))
    if below and above:
        return GapComponent.BRACKETED
    if below:
        return GapComponent.ONLY_BELOW
    if above:
        return GapComponent.ONLY_ABOVE
    return GapComponent.NO_AGREEMENT


def decompose_gap(
    pi_e: EvaluationPolicy,
    data: TrialDataset | CellTable,
    set_mode: SetMode = SetMode.TIGHT,
    perf_eps: float = 0.0,
) -> DecompositionReport:
    """Split ``U - L`` into per-covariate contributions tagged by their cause."""
    table = _table(data)
    bounds = exact_bounds(pi_e, table, set_mode, perf_eps)
    report = DecompositionReport(pi_e.id)
    for cell, mass in zip(bounds.cells, table.pmf):
        sets = sets_at(table.registry, pi_e, cell.x, perf_eps)
        comp = _component(cell, sets, set_mode)
        delta = 0.0 if comp is GapComponent.NONE else cell.upper - cell.lower
        report.terms.append(GapTerm(cell.x, comp, delta, float(mass)))
    report.total_gap = math.fsum(t.delta * t.mass for t in report.terms)
    return report


def bounds_to_json(result: BoundsResult, decomposition: DecompositionReport | None = None) -> dict:
    terms = decomposition.by_x() if decomposition is not None else {}
    cells = []
    for c in result.cells:
        term = terms.get(c.x)
        cells.append(
            {
                "x": c.x,
                "lower": c.lower,
                "upper": c.upper,
                "lower_source": c.lower_source.value,
                "upper_source": c.upper_source.value,
                "delta_component": term.component.value if term else None,
                "delta": term.delta if term else None,
            }
        )
    out = {"policy": result.policy, "L": result.L, "U": result.U, "cells": cells}
    if result.crossed:
        out["crossed"] = True
        out["clamped"] = result.clamped
    flagged = [c.x for c in result.cells if c.flagged]
    if flagged:
        out["empty_cells"] = flagged
    return out
