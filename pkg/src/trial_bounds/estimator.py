"""Inverse-probability-weighted estimators of the bounds, with normal-approximation intervals.

Each record contributes a pseudo-outcome ``psi_L`` (and ``psi_U``): its
outcome reweighted by the design probability of the relevant arm set when the
candidate's action at that covariate is covered by trialed arms, or the
conservative constant ``y_min`` (``y_max``) when it is not. The bound
estimates are the sample means of these pseudo-outcomes.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import DegenerateError, DomainError, EmptyDatasetError
from .policy_sets import EvaluationPolicy, LowerCell, SetMode, UpperCell, classify, sets_at
from .trial_data import TrialDataset, TrialRecord, normalize_code

_STD_NORMAL = NormalDist()


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not (0.0 < p < 1.0) or math.isnan(p):
        raise DomainError(f"normal_quantile needs 0 < p < 1, got {p!r}")
    return _STD_NORMAL.inv_cdf(p)


@dataclass(frozen=True)
class _Plan:
    """Per-covariate weights: ``psi = y * weight[x, arm] + const[x]``."""

    lower_w: np.ndarray
    lower_c: np.ndarray
    upper_w: np.ndarray
    upper_c: np.ndarray


def _set_weights(dataset: TrialDataset, xi: int, ids, arm_probs: str) -> np.ndarray | None:
    """Row of inverse-probability weights for one covariate cell; None if the set has zero probability."""
    reg = dataset.registry
    w = np.zeros(len(reg.policies))
    cols = [reg.policy_index(pid) for pid in sorted(ids)]
    if arm_probs == "design":
        prob = math.fsum(reg.policies[c].arm_prob for c in cols)
    else:
        n_x = int(dataset.cell_counts[xi].sum())
        hits = int(dataset.cell_counts[xi, cols].sum())
        prob = hits / n_x if n_x else 0.0
    if prob <= 0.0:
        return None
    w[cols] = 1.0 / prob
    return w


def _plan(
    dataset: TrialDataset, pi_e: EvaluationPolicy, set_mode: SetMode, arm_probs: str, perf_eps: float
) -> _Plan:
    if arm_probs not in ("design", "empirical"):
        raise ValueError(f"arm_probs must be 'design' or 'empirical', got {arm_probs!r}")
    reg = dataset.registry
    nx, npol = len(reg.covariate_support), len(reg.policies)
    lw, uw = np.zeros((nx, npol)), np.zeros((nx, npol))
    lc, uc = np.zeros(nx), np.zeros(nx)
    for xi, x in enumerate(reg.covariate_support):
        sets = sets_at(reg, pi_e, x, perf_eps)
        lower_cell, upper_cell = classify(sets, pi_e.action(x), reg.neutral_action, set_mode)
        if lower_cell is LowerCell.NEUTRAL_COVERED:
            lower_ids = upper_ids = sets.agree
        else:
            lower_ids = sets.lower_set(set_mode) if lower_cell is LowerCell.NONNEUTRAL_COVERED_LOW else None
            upper_ids = sets.upper_set(set_mode) if upper_cell is UpperCell.NONNEUTRAL_COVERED_HIGH else None
        row = _set_weights(dataset, xi, lower_ids, arm_probs) if lower_ids else None
        if row is None:
            lc[xi] = reg.y_min
        else:
            lw[xi] = row
        row = _set_weights(dataset, xi, upper_ids, arm_probs) if upper_ids else None
        if row is None:
            uc[xi] = reg.y_max
        else:
            uw[xi] = row
    return _Plan(lw, lc, uw, uc)


def _psi_chunk(plan: _Plan, x_idx, p_idx, y) -> tuple[np.ndarray, np.ndarray]:
    psi_l = y * plan.lower_w[x_idx, p_idx] + plan.lower_c[x_idx]
    psi_u = y * plan.upper_w[x_idx, p_idx] + plan.upper_c[x_idx]
    return psi_l, psi_u


def psi_values(
    dataset: TrialDataset,
    pi_e: EvaluationPolicy,
    set_mode: SetMode = SetMode.TIGHT,
    arm_probs: str = "design",
    perf_eps: float = 0.0,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-outcomes for every record, in record order.

    ``arm_probs="empirical"`` replaces the design probabilities by the
    observed arm frequencies within each covariate cell, which makes the
    estimate coincide with the plug-in bounds on the same data.
    """
    plan = _plan(dataset, pi_e, set_mode, arm_probs, perf_eps)
    n = dataset.n
    if workers <= 1 or n < 2 * workers:
        return _psi_chunk(plan, dataset.x_idx, dataset.policy_idx, dataset.y)
    edges = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(
            pool.map(
                lambda lo_hi: _psi_chunk(
                    plan,
                    dataset.x_idx[lo_hi[0]:lo_hi[1]],
                    dataset.policy_idx[lo_hi[0]:lo_hi[1]],
                    dataset.y[lo_hi[0]:lo_hi[1]],
                ),
                zip(edges[:-1], edges[1:]),
            )
        )
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _record_psi(record: TrialRecord, pi_e, dataset, set_mode, perf_eps, upper: bool) -> float:
    reg = dataset.registry
    plan = _plan(dataset, pi_e, set_mode, "design", perf_eps)
    xi = reg.covariate_support.index(normalize_code(record.x))
    pi = reg.policy_index(record.policy_id)
    if upper:
        return float(record.y * plan.upper_w[xi, pi] + plan.upper_c[xi])
    return float(record.y * plan.lower_w[xi, pi] + plan.lower_c[xi])


def psi_lower(
    record: TrialRecord, pi_e: EvaluationPolicy, dataset: TrialDataset,
    set_mode: SetMode = SetMode.TIGHT, perf_eps: float = 0.0,
) -> float:
    return _record_psi(record, pi_e, dataset, set_mode, perf_eps, upper=False)


def psi_upper(
    record: TrialRecord, pi_e: EvaluationPolicy, dataset: TrialDataset,
    set_mode: SetMode = SetMode.TIGHT, perf_eps: float = 0.0,
) -> float:
    return _record_psi(record, pi_e, dataset, set_mode, perf_eps, upper=True)


def _mean_sd(values: np.ndarray) -> tuple[float, float]:
    # fsum keeps the reductions exact, so chunking cannot change the result
    n = len(values)
    mean = math.fsum(values) / n
    dev = values - mean
    return mean, math.sqrt(math.fsum(dev * dev) / (n - 1))


@dataclass
class BoundsReport:
    policy: str
    L_hat: float
    U_hat: float
    sd_psi_L: float
    sd_psi_U: float
    n: int
    alpha: float
    ci_low: float
    ci_high: float
    psi_L: np.ndarray | None = field(default=None, repr=False)
    psi_U: np.ndarray | None = field(default=None, repr=False)

    @property
    def ci(self) -> tuple[float, float]:
        return self.ci_low, self.ci_high

    def to_json(self) -> dict:
        return {
            "policy": self.policy,
            "L_hat": self.L_hat,
            "U_hat": self.U_hat,
            "sd_L": self.sd_psi_L,
            "sd_U": self.sd_psi_U,
            "n": self.n,
            "alpha": self.alpha,
            "ci": [self.ci_low, self.ci_high],
        }


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")


def estimate_bounds(
    dataset: TrialDataset,
    pi_e: EvaluationPolicy,
    alpha: float = 0.05,
    set_mode: SetMode = SetMode.TIGHT,
    arm_probs: str = "design",
    perf_eps: float = 0.0,
    workers: int = 1,
    keep_psi: bool = False,
) -> BoundsReport:
    """Bound estimates and the ``1 - alpha`` interval ``[L - z*sd_L/sqrt(n), U + z*sd_U/sqrt(n)]``."""
    _check_alpha(alpha)
    if dataset.n == 0:
        raise EmptyDatasetError("cannot estimate bounds from an empty dataset")
    if dataset.n < 2:
        raise DegenerateError("need at least 2 records for a standard deviation")
    psi_l, psi_u = psi_values(dataset, pi_e, set_mode, arm_probs, perf_eps, workers)
    L, sd_l = _mean_sd(psi_l)
    U, sd_u = _mean_sd(psi_u)
    z = normal_quantile(1.0 - alpha / 2.0)
    root_n = math.sqrt(dataset.n)
    return BoundsReport(
        policy=pi_e.id,
        L_hat=L,
        U_hat=U,
        sd_psi_L=sd_l,
        sd_psi_U=sd_u,
        n=dataset.n,
        alpha=alpha,
        ci_low=L - z * sd_l / root_n,
        ci_high=U + z * sd_u / root_n,
        psi_L=psi_l if keep_psi else None,
        psi_U=psi_u if keep_psi else None,
    )


@dataclass(frozen=True)
class ArmValue:
    policy: str
    mean: float
    sd: float
    n: int
    ci_low: float
    ci_high: float

    @property
    def ci(self) -> tuple[float, float]:
        return self.ci_low, self.ci_high


def trialed_arm_value(dataset: TrialDataset, policy_id: str, alpha: float = 0.05) -> ArmValue:
    """Mean outcome of one trial arm with a normal-approximation interval."""
    _check_alpha(alpha)
    pi = dataset.registry.policy_index(policy_id)
    y = dataset.y[dataset.policy_idx == pi]
    if len(y) < 2:
        raise DegenerateError(f"arm {policy_id!r} has {len(y)} record(s); need at least 2")
    mean, sd = _mean_sd(y)
    half = normal_quantile(1.0 - alpha / 2.0) * sd / math.sqrt(len(y))
    return ArmValue(policy_id, mean, sd, len(y), mean - half, mean + half)
