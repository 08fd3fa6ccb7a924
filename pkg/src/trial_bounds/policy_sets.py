"""Per-covariate sets of trialed policies that agree with a candidate policy.

For a candidate ``pi_e`` and covariate value ``x``:

* ``agree``      trialed policies taking the same action as ``pi_e`` at ``x``
* ``leq``/``geq`` the agreeing policies with performance at most / at least ``pi_e``'s
* ``tilde_leq``  the best performers within ``leq`` (all ties kept)
* ``tilde_geq``  the worst performers within ``geq`` (all ties kept)
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import SchemaError, UndefinedPerformanceError
from .trial_data import Registry, normalize_code, parse_action_map


@dataclass(frozen=True)
class EvaluationPolicy:
    """A candidate policy to evaluate: total action map plus its performance."""

    id: str
    action_map: dict[str, str]
    performance: float

    def __post_init__(self):
        if self.performance is None or not math.isfinite(self.performance):
            raise UndefinedPerformanceError(f"evaluation policy {self.id!r} needs a finite performance")

    def action(self, x: str) -> str:
        return self.action_map[x]

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], support: tuple[str, ...]) -> "EvaluationPolicy":
        for key in ("id", "action_map", "performance"):
            if key not in doc:
                raise SchemaError(f"evaluation policy is missing {key!r}")
        perf = doc["performance"]
        if perf is None:
            raise UndefinedPerformanceError(f"evaluation policy {doc['id']!r} has null performance")
        return cls(
            id=str(doc["id"]),
            action_map=parse_action_map(doc["action_map"], support),
            performance=float(perf),
        )

    @classmethod
    def from_actions(cls, policy_id: str, actions: Mapping[Any, Any], performance: float) -> "EvaluationPolicy":
        return cls(
            id=policy_id,
            action_map={normalize_code(k): normalize_code(v) for k, v in actions.items()},
            performance=float(performance),
        )

    def to_dict(self) -> dict:
        return {"id": self.id, "performance": self.performance, "action_map": dict(self.action_map)}


def load_policies(source: Any, support: tuple[str, ...]) -> list[EvaluationPolicy]:
    """Read one policy object or an array of them from a JSON path/text/mapping."""
    if isinstance(source, (Mapping, list)):
        doc = source
    else:
        text = str(source)
        if not text.lstrip().startswith(("{", "[")):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"policy file is not valid JSON: {exc}") from exc
    docs = doc if isinstance(doc, list) else [doc]
    return [EvaluationPolicy.from_dict(d, support) for d in docs]


class SetMode(enum.Enum):
    TIGHT = "tight"
    RELAXED = "relaxed"


class LowerCell(enum.Enum):
    NONNEUTRAL_COVERED_LOW = "nonneutral_covered_low"
    NONNEUTRAL_UNCOVERED_LOW = "nonneutral_uncovered_low"
    NEUTRAL_COVERED = "neutral_covered"
    NEUTRAL_UNCOVERED = "neutral_uncovered"


class UpperCell(enum.Enum):
    NONNEUTRAL_COVERED_HIGH = "nonneutral_covered_high"
    NONNEUTRAL_UNCOVERED_HIGH = "nonneutral_uncovered_high"
    NEUTRAL_COVERED = "neutral_covered"
    NEUTRAL_UNCOVERED = "neutral_uncovered"


@dataclass(frozen=True)
class PolicySetsAtX:
    agree: frozenset[str]
    leq: frozenset[str]
    geq: frozenset[str]
    tilde_leq: frozenset[str]
    tilde_geq: frozenset[str]

    def lower_set(self, mode: SetMode = SetMode.TIGHT) -> frozenset[str]:
        return self.tilde_leq if mode is SetMode.TIGHT else self.leq

    def upper_set(self, mode: SetMode = SetMode.TIGHT) -> frozenset[str]:
        return self.tilde_geq if mode is SetMode.TIGHT else self.geq


def sets_at(registry: Registry, pi_e: EvaluationPolicy, x: Any, perf_eps: float = 0.0) -> PolicySetsAtX:
    """Compute the agreement sets at ``x``.

    Performances within ``perf_eps`` of each other count as equal. Policies
    without a performance join ``agree`` only.
    """
    x = normalize_code(x)
    action = pi_e.action(x)
    target = pi_e.performance
    agree = [p for p in registry.policies if p.action(x) == action]
    neutral = registry.neutral_action is not None and action == registry.neutral_action
    leq, geq = [], []
    for p in agree:
        if p.performance is None:
            if not neutral:
                raise UndefinedPerformanceError(
                    f"policy {p.id!r} has no performance but agrees with {pi_e.id!r} "
                    f"on non-neutral action {action!r} at x={x!r}"
                )
            continue
        if p.performance <= target + perf_eps:
            leq.append(p)
        if p.performance >= target - perf_eps:
            geq.append(p)
    tilde_leq: list = []
    if leq:
        best = max(p.performance for p in leq)
        tilde_leq = [p for p in leq if p.performance >= best - perf_eps]
    tilde_geq: list = []
    if geq:
        worst = min(p.performance for p in geq)
        tilde_geq = [p for p in geq if p.performance <= worst + perf_eps]

    def ids(ps):
        return frozenset(p.id for p in ps)

    return PolicySetsAtX(ids(agree), ids(leq), ids(geq), ids(tilde_leq), ids(tilde_geq))


def classify(
    sets: PolicySetsAtX,
    pi_e_action: Any,
    neutral: Any | None,
    mode: SetMode = SetMode.TIGHT,
) -> tuple[LowerCell, UpperCell]:
    """Which branch of the lower and upper bound applies at one covariate value."""
    is_neutral = neutral is not None and normalize_code(pi_e_action) == normalize_code(neutral)
    if is_neutral:
        if sets.agree:
            return LowerCell.NEUTRAL_COVERED, UpperCell.NEUTRAL_COVERED
        return LowerCell.NEUTRAL_UNCOVERED, UpperCell.NEUTRAL_UNCOVERED
    lower = LowerCell.NONNEUTRAL_COVERED_LOW if sets.lower_set(mode) else LowerCell.NONNEUTRAL_UNCOVERED_LOW
    upper = UpperCell.NONNEUTRAL_COVERED_HIGH if sets.upper_set(mode) else UpperCell.NONNEUTRAL_UNCOVERED_HIGH
    return lower, upper
