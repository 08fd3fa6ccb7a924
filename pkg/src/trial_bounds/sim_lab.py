"""Synthetic alerting trial with known ground truth, and its analytic oracles.

Four baseline-health levels ``x`` (uniform), disease onset ``O ~ Bernoulli(onset[x])``,
and survival ``Y`` whose probability depends on ``x``, whether an alert fires and
the deployed model's accuracy ``m``::

    P(Y=1 | x, a, m) = base[x] + ((1 + m) / 2) * coef[x] * a

Two variants each break one assumption on purpose: ``ANTI_MONOTONE`` uses
``(1 - m) / 2`` so more accurate alerts help less, and ``NEUTRAL_VIOLATING``
adds ``0.2 * m`` to survival whenever a non-control arm does not alert.
"""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .bound_engine import CellTable
from .errors import ConfigError
from .trial_data import PolicySpec, Registry, TrialDataset

SUPPORT = (0, 1, 2, 3)
ONSET = (0.9, 0.7, 0.6, 0.5)
# survival among the diseased: without alert, and the extra gain an alert can bring at m = 1
DISEASED_SURVIVAL = (0.4, 0.1, 0.1, 0.1)
ALERT_GAIN = (0.2, 0.8, 0.8, 0.8)
BASE = (0.46, 0.37, 0.46, 0.55)
COEF = (0.18, 0.56, 0.48, 0.40)
NEUTRAL_SHIFT = 0.2

# stream labels for the three independent noise sources
_STREAM_ASSIGN, _STREAM_ONSET, _STREAM_OUTCOME = 0, 1, 2


class Variant(enum.Enum):
    PAPER = "paper"
    ANTI_MONOTONE = "anti-monotone"
    NEUTRAL_VIOLATING = "neutral-violating"


def indicator_policy(alert_on) -> tuple[int, ...]:
    """Action tuple over the support that alerts exactly on ``alert_on``."""
    alert_on = set(alert_on)
    return tuple(int(x in alert_on) for x in SUPPORT)


PI_0 = indicator_policy(())
PI_1 = indicator_policy({1})
PI_2 = indicator_policy({2, 3})
PI_3 = indicator_policy({1, 2})
PI_E0 = indicator_policy({1, 2, 3})
PI_E1 = indicator_policy({0, 1})
PI_ALWAYS = indicator_policy(SUPPORT)

PAPER_ARMS = (("pi0", PI_0), ("pi1", PI_1), ("pi2", PI_2))
ANTI_MONOTONE_ARMS = (("pi0", PI_0), ("pi1", PI_1), ("pi3", PI_3))


@dataclass(frozen=True)
class DgpSpec:
    arms: tuple[tuple[str, tuple[int, ...]], ...] = PAPER_ARMS
    arm_probs: tuple[float, ...] | None = None
    variant: Variant = Variant.PAPER
    onset: tuple[float, ...] = ONSET
    base: tuple[float, ...] = BASE
    coef: tuple[float, ...] = COEF
    pmf: tuple[float, ...] = field(default=(0.25, 0.25, 0.25, 0.25))

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("a trial needs at least one arm")
        for name, actions in self.arms:
            if len(actions) != len(SUPPORT) or any(a not in (0, 1) for a in actions):
                raise ConfigError(f"arm {name!r} must map each of {SUPPORT} to 0 or 1")
        if self.arm_probs is not None:
            if len(self.arm_probs) != len(self.arms) or abs(math.fsum(self.arm_probs) - 1) > 1e-9:
                raise ConfigError("arm_probs must match the arms and sum to 1")
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", Variant(self.variant))
        for seq in (self.onset, self.base, self.coef, self.pmf):
            if len(seq) != len(SUPPORT):
                raise ConfigError("per-covariate parameters need one value per support point")

    @property
    def probs(self) -> tuple[float, ...]:
        if self.arm_probs is not None:
            return self.arm_probs
        return tuple(1.0 / len(self.arms) for _ in self.arms)


def paper_dgp(variant: Variant | str = Variant.PAPER) -> DgpSpec:
    """The three-arm trial; the anti-monotone fixture swaps in an arm alerting on {1, 2}."""
    variant = Variant(variant)
    arms = ANTI_MONOTONE_ARMS if variant is Variant.ANTI_MONOTONE else PAPER_ARMS
    return DgpSpec(arms=arms, variant=variant)


def _actions(pi) -> tuple[int, ...]:
    if isinstance(pi, Mapping):
        return tuple(int(pi[x] if x in pi else pi[str(x)]) for x in SUPPORT)
    return tuple(int(a) for a in pi)


def true_accuracy(pi, dgp: DgpSpec | None = None) -> float:
    """Probability the policy's alert matches disease onset."""
    dgp = dgp or DgpSpec()
    acts = _actions(pi)
    return math.fsum(
        w * (o if a == 1 else 1.0 - o) for w, a, o in zip(dgp.pmf, acts, dgp.onset)
    )


def survival_probability(x: int, a: int, m: float, dgp: DgpSpec, control: bool = False) -> float:
    if dgp.variant is Variant.ANTI_MONOTONE:
        gain = (1.0 - m) / 2.0
    else:
        gain = (1.0 + m) / 2.0
    p = dgp.base[x] + gain * dgp.coef[x] * a
    if dgp.variant is Variant.NEUTRAL_VIOLATING and a == 0 and not control:
        p = min(1.0, max(0.0, p + NEUTRAL_SHIFT * m))
    if not (0.0 <= p <= 1.0):
        raise ConfigError(f"survival probability {p} out of [0, 1] at x={x}, a={a}, m={m}")
    return p


def _is_control(acts) -> bool:
    return all(a == 0 for a in acts)


def true_policy_value(pi, dgp: DgpSpec | None = None) -> float:
    """Expected survival if ``pi`` were deployed, at its own accuracy."""
    dgp = dgp or DgpSpec()
    acts = _actions(pi)
    m = true_accuracy(acts, dgp)
    control = _is_control(acts)
    return math.fsum(
        w * survival_probability(x, a, m, dgp, control) for x, w, a in zip(SUPPORT, dgp.pmf, acts)
    )


def oracle_exact_bounds(pi_e, dgp: DgpSpec | None = None, relaxed: bool = False) -> tuple[float, float]:
    """Population bounds by direct enumeration, written independently of ``bound_engine``.

    The control arm (all-zero) carries no performance; it only ever matches
    the candidate where the candidate does not alert.
    """
    dgp = dgp or DgpSpec()
    acts = _actions(pi_e)
    m_e = true_accuracy(acts, dgp)
    arm_info = []
    for (name, arm), prob in zip(dgp.arms, dgp.probs):
        m = true_accuracy(arm, dgp)
        control = _is_control(arm)
        arm_info.append((arm, None if control else m, m, control, prob))

    def pooled(x, members):
        num = math.fsum(prob * survival_probability(x, arm[x], m_true, dgp, ctl)
                        for arm, _, m_true, ctl, prob in members)
        return num / math.fsum(prob for *_, prob in members)

    lo_terms, hi_terms = [], []
    for x, w in zip(SUPPORT, dgp.pmf):
        agreeing = [info for info in arm_info if info[0][x] == acts[x]]
        if acts[x] == 0:
            if agreeing:
                v = pooled(x, agreeing)
                lo_terms.append(w * v)
                hi_terms.append(w * v)
            else:
                lo_terms.append(w * 0.0)
                hi_terms.append(w * 1.0)
            continue
        below = [i for i in agreeing if i[1] is not None and i[1] <= m_e]
        above = [i for i in agreeing if i[1] is not None and i[1] >= m_e]
        if below and not relaxed:
            best = max(i[1] for i in below)
            below = [i for i in below if i[1] == best]
        if above and not relaxed:
            worst = min(i[1] for i in above)
            above = [i for i in above if i[1] == worst]
        lo_terms.append(w * (pooled(x, below) if below else 0.0))
        hi_terms.append(w * (pooled(x, above) if above else 1.0))
    return math.fsum(lo_terms), math.fsum(hi_terms)


def registry_for(dgp: DgpSpec) -> Registry:
    """Registry matching the DGP: accuracy as performance, none for the control arm."""
    policies = []
    for (name, arm), prob in zip(dgp.arms, dgp.probs):
        perf = None if _is_control(arm) else true_accuracy(arm, dgp)
        policies.append(
            PolicySpec(
                id=name,
                action_map={str(x): str(a) for x, a in zip(SUPPORT, arm)},
                performance=perf,
                arm_prob=prob,
            )
        )
    return Registry(
        y_min=0.0,
        y_max=1.0,
        neutral_action="0",
        covariate_support=tuple(str(x) for x in SUPPORT),
        action_space=("0", "1"),
        policies=tuple(policies),
    )


def population_cells(dgp: DgpSpec | None = None) -> CellTable:
    """Exact covariate masses and analytic per-arm cell means as a plug-in table."""
    dgp = dgp or DgpSpec()
    means = np.array(
        [
            [survival_probability(x, arm[x], true_accuracy(arm, dgp), dgp, _is_control(arm)) for _, arm in dgp.arms]
            for x in SUPPORT
        ]
    )
    return CellTable.from_population(registry_for(dgp), dgp.pmf, means)


@dataclass(frozen=True, eq=False)
class SimOutput:
    dataset: TrialDataset
    onset: np.ndarray
    seed: int

    def latent_csv(self) -> str:
        buf = io.StringIO()
        buf.write("unit_id,onset\n")
        for uid, o in zip(self.dataset.unit_ids, self.onset):
            buf.write(f"{uid},{int(o)}\n")
        return buf.getvalue()


def _stream(seed: int, label: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), label]))


def simulate_trial(n: int, seed: int, dgp: DgpSpec | None = None) -> SimOutput:
    """Draw ``n`` units: covariate, arm, onset and survival from separate seeded streams."""
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    dgp = dgp or DgpSpec()
    assign = _stream(seed, _STREAM_ASSIGN)
    x = assign.choice(len(SUPPORT), size=n, p=dgp.pmf)
    d = assign.choice(len(dgp.arms), size=n, p=dgp.probs)
    action_table = np.array([arm for _, arm in dgp.arms], dtype=np.int64)
    a = action_table[d, x]
    onset = _stream(seed, _STREAM_ONSET).random(n) < np.asarray(dgp.onset)[x]
    p_y = np.array(
        [
            [[survival_probability(xx, act, true_accuracy(arm, dgp), dgp, _is_control(arm)) for act in (0, 1)]
             for xx in SUPPORT]
            for _, arm in dgp.arms
        ]
    )[d, x, a]
    y = (_stream(seed, _STREAM_OUTCOME).random(n) < p_y).astype(np.float64)
    width = max(5, len(str(n - 1)))
    unit_ids = [f"u{i:0{width}d}" for i in range(n)]
    clusters = [dgp.arms[k][0] for k in d]
    registry = registry_for(dgp)
    dataset = TrialDataset.from_indices(registry, unit_ids, clusters, d, x, a, y)
    return SimOutput(dataset, onset.astype(np.int8), seed)
