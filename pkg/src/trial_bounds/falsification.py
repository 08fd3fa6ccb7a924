"""Two-sample tests that can refute performance monotonicity or neutral-action invariance.

Both tests compare outcome means of two trial arms restricted to covariate
values where the arms take the same action:

* monotonicity: on the agreement region, the better-performing arm should not
  do worse (one-sided test, rejection means the assumption is falsified);
* neutral action: where both arms take the neutral action, outcomes should not
  differ at all (two-sided test).
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from statsmodels.stats.multitest import multipletests

from .errors import (
    ConfigError,
    InsufficientDataError,
    RegionEmptyError,
    UndefinedPerformanceError,
)
from .trial_data import PolicySpec, TrialDataset, code_sort_key

N_PERMUTATIONS = 10_000


class Assumption(enum.Enum):
    PERFORMANCE_MONOTONICITY = "performance_monotonicity"
    NEUTRAL_ACTIONS = "neutral_actions"


class Method(enum.Enum):
    WELCH_T = "welch_t"
    PERMUTATION = "permutation"


@dataclass(frozen=True)
class TestReport:
    __test__ = False  # keep pytest from collecting this class

    assumption: Assumption
    pair: tuple[str, str]
    region: tuple[str, ...]
    n1: int
    n2: int
    mean1: float
    mean2: float
    statistic: float
    p_value: float
    rejected: bool
    method: Method
    alpha: float

    def to_json(self) -> dict:
        return {
            "assumption": self.assumption.value,
            "pair": list(self.pair),
            "region": list(self.region),
            "n1": self.n1,
            "n2": self.n2,
            "mean1": self.mean1,
            "mean2": self.mean2,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "rejected": self.rejected,
            "method": self.method.value,
        }


def agreement_region(p1: PolicySpec, p2: PolicySpec, support) -> frozenset[str]:
    return frozenset(x for x in support if p1.action(x) == p2.action(x))


def neutral_region(p1: PolicySpec, p2: PolicySpec, neutral, support) -> frozenset[str]:
    if neutral is None:
        raise ConfigError("no neutral action is designated")
    return frozenset(x for x in support if p1.action(x) == neutral and p2.action(x) == neutral)


def _welch(first: np.ndarray, second: np.ndarray, alternative: str) -> tuple[float, float]:
    """Welch t statistic for ``mean(second) - mean(first)``."""
    v1, v2 = first.var(ddof=1), second.var(ddof=1)
    diff = second.mean() - first.mean()
    if v1 == 0.0 and v2 == 0.0:
        # both samples constant: the difference is known exactly
        if diff == 0.0:
            return 0.0, 1.0
        stat = math.copysign(math.inf, diff)
        if alternative == "two-sided":
            return stat, 0.0
        return stat, 0.0 if diff < 0 else 1.0
    res = stats.ttest_ind(second, first, equal_var=False, alternative=alternative)
    return float(res.statistic), float(res.pvalue)


def _permutation(
    first: np.ndarray, second: np.ndarray, alternative: str, seed, n_resamples: int = N_PERMUTATIONS
) -> tuple[float, float]:
    """Permutation test on the mean difference ``mean(second) - mean(first)``."""
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([first, second])
    n1 = len(first)
    observed = second.mean() - first.mean()
    hits = 0
    block = 1000
    total = pooled.sum()
    done = 0
    while done < n_resamples:
        m = min(block, n_resamples - done)
        perms = rng.permuted(np.broadcast_to(pooled, (m, len(pooled))), axis=1)
        s1 = perms[:, :n1].sum(axis=1)
        diffs = (total - s1) / len(second) - s1 / n1
        if alternative == "less":
            hits += int(np.sum(diffs <= observed + 1e-12))
        else:
            hits += int(np.sum(np.abs(diffs) >= abs(observed) - 1e-12))
        done += m
    return float(observed), (hits + 1) / (n_resamples + 1)


def _region_samples(dataset: TrialDataset, policy_id: str, region) -> np.ndarray:
    reg = dataset.registry
    pi = reg.policy_index(policy_id)
    xs = np.array([reg.covariate_support.index(x) for x in region], dtype=np.int64)
    mask = (dataset.policy_idx == pi) & np.isin(dataset.x_idx, xs)
    return dataset.y[mask]


def _run(dataset, assumption, low, high, region, alpha, method, alternative, seed) -> TestReport:
    method = Method(method) if not isinstance(method, Method) else method
    if not region:
        raise RegionEmptyError(f"arms {low!r} and {high!r} share no covariate values for this test")
    first = _region_samples(dataset, low, region)
    second = _region_samples(dataset, high, region)
    if len(first) < 2 or len(second) < 2:
        raise InsufficientDataError(
            f"need at least 2 records per arm in the region, got {len(first)} and {len(second)}"
        )
    if method is Method.WELCH_T:
        stat, p = _welch(first, second, alternative)
    else:
        stat, p = _permutation(first, second, alternative, seed)
    return TestReport(
        assumption=assumption,
        pair=(low, high),
        region=tuple(sorted(region, key=code_sort_key)),
        n1=len(first),
        n2=len(second),
        mean1=float(first.mean()),
        mean2=float(second.mean()),
        statistic=stat,
        p_value=p,
        rejected=p < alpha,
        method=method,
        alpha=alpha,
    )


def _ordered_by_performance(dataset: TrialDataset, id1: str, id2: str) -> tuple[str, str]:
    p1, p2 = dataset.registry.policy(id1), dataset.registry.policy(id2)
    for p in (p1, p2):
        if p.performance is None:
            raise UndefinedPerformanceError(f"policy {p.id!r} has no performance to order by")
    if p1.performance == p2.performance:
        raise ConfigError(f"policies {id1!r} and {id2!r} have equal performance")
    return (id1, id2) if p1.performance < p2.performance else (id2, id1)


def test_monotonicity(
    dataset: TrialDataset, id1: str, id2: str, alpha: float = 0.05,
    method: Method | str = Method.WELCH_T, seed=0,
) -> TestReport:
    """One-sided test of whether the better-performing arm has lower mean outcome on the agreement region."""
    low, high = _ordered_by_performance(dataset, id1, id2)
    reg = dataset.registry
    region = agreement_region(reg.policy(low), reg.policy(high), reg.covariate_support)
    return _run(dataset, Assumption.PERFORMANCE_MONOTONICITY, low, high, region, alpha, method, "less", seed)


def test_neutral_action(
    dataset: TrialDataset, id1: str, id2: str, alpha: float = 0.05,
    method: Method | str = Method.WELCH_T, seed=0,
) -> TestReport:
    """Two-sided test of equal outcomes where both arms take the neutral action."""
    reg = dataset.registry
    p1, p2 = reg.policy(id1), reg.policy(id2)
    if p1.performance is not None and p2.performance is not None and p2.performance < p1.performance:
        id1, id2, p1, p2 = id2, id1, p2, p1
    elif p1.performance is not None and p2.performance is None:
        id1, id2, p1, p2 = id2, id1, p2, p1
    region = neutral_region(p1, p2, reg.neutral_action, reg.covariate_support)
    return _run(dataset, Assumption.NEUTRAL_ACTIONS, id1, id2, region, alpha, method, "two-sided", seed)


test_monotonicity.__test__ = False  # type: ignore[attr-defined]
test_neutral_action.__test__ = False  # type: ignore[attr-defined]


@dataclass
class PairResult:
    assumption: Assumption
    pair: tuple[str, str]
    status: str  # "TESTED" or "SKIPPED"
    reason: str | None = None
    report: TestReport | None = None
    p_adjusted: float | None = None
    rejected_adjusted: bool = False

    def to_json(self) -> dict:
        out = {"assumption": self.assumption.value, "pair": list(self.pair), "status": self.status}
        if self.status == "SKIPPED":
            out["reason"] = self.reason
            return out
        out.update(self.report.to_json())
        out["rejected_raw"] = out.pop("rejected")
        out["p_adjusted"] = self.p_adjusted
        out["rejected_adjusted"] = self.rejected_adjusted
        return out


@dataclass
class FalsificationReport:
    alpha: float
    results: list[PairResult]

    @property
    def any_rejected(self) -> bool:
        return any(r.rejected_adjusted for r in self.results)

    def tested(self) -> list[PairResult]:
        return [r for r in self.results if r.status == "TESTED"]

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.results]


def run_all_pairs(
    dataset: TrialDataset, alpha: float = 0.05, method: Method | str = Method.WELCH_T, seed: int = 0
) -> FalsificationReport:
    """Every applicable test over unordered arm pairs, with Holm adjustment across all p-values."""
    reg = dataset.registry
    results: list[PairResult] = []
    seeds = np.random.SeedSequence(seed)
    pairs = list(itertools.combinations(reg.policy_ids, 2))
    # one child stream per (pair, test) slot, independent of which tests get skipped
    children = seeds.spawn(2 * len(pairs))
    for k, (id1, id2) in enumerate(pairs):
        p1, p2 = reg.policy(id1), reg.policy(id2)
        if p1.performance is None or p2.performance is None:
            results.append(PairResult(Assumption.PERFORMANCE_MONOTONICITY, (id1, id2), "SKIPPED", "performance absent"))
        elif p1.performance == p2.performance:
            results.append(PairResult(Assumption.PERFORMANCE_MONOTONICITY, (id1, id2), "SKIPPED", "equal performance"))
        else:
            results.append(_attempt(test_monotonicity, Assumption.PERFORMANCE_MONOTONICITY,
                                    dataset, id1, id2, alpha, method, children[2 * k]))
        if reg.neutral_action is None:
            results.append(PairResult(Assumption.NEUTRAL_ACTIONS, (id1, id2), "SKIPPED", "no neutral action"))
        else:
            results.append(_attempt(test_neutral_action, Assumption.NEUTRAL_ACTIONS,
                                    dataset, id1, id2, alpha, method, children[2 * k + 1]))
    tested = [r for r in results if r.status == "TESTED"]
    if tested:
        reject, p_adj, _, _ = multipletests([r.report.p_value for r in tested], alpha=alpha, method="holm")
        for r, rej, pa in zip(tested, reject, p_adj):
            r.p_adjusted = float(pa)
            r.rejected_adjusted = bool(rej)
    return FalsificationReport(alpha, results)


def _attempt(fn, assumption, dataset, id1, id2, alpha, method, seed) -> PairResult:
    try:
        report = fn(dataset, id1, id2, alpha, method, seed)
    except RegionEmptyError:
        return PairResult(assumption, (id1, id2), "SKIPPED", "empty region")
    except InsufficientDataError as exc:
        return PairResult(assumption, (id1, id2), "SKIPPED", f"insufficient data: {exc}")
    return PairResult(assumption, report.pair, "TESTED", report=report)
