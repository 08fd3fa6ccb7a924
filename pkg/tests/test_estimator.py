import math

import mpmath
import numpy as np
import pytest

from conftest import candidate
from test_bound_engine import random_policies
from trial_bounds import sim_lab
from trial_bounds.bound_engine import exact_bounds
from trial_bounds.errors import DegenerateError, DomainError, EmptyDatasetError
from trial_bounds.estimator import (
    estimate_bounds,
    normal_quantile,
    psi_lower,
    psi_upper,
    psi_values,
    trialed_arm_value,
)
from trial_bounds.policy_sets import SetMode
from trial_bounds.trial_data import TrialRecord, load_dataset

E0 = candidate("e0", sim_lab.PI_E0)
E1 = candidate("e1", sim_lab.PI_E1)
HEADER = "unit_id,cluster,policy_id,x,a,y\n"


def mp_quantile(p):
    mpmath.mp.dps = 40
    return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


@pytest.fixture
def small(registry_doc):
    rows = HEADER + "u0,c,pi1,1,1,1\nu1,c,pi0,1,0,1\nu2,c,pi2,0,0,0\nu3,c,pi0,0,0,0\nu4,c,pi2,2,1,1\n"
    return load_dataset(rows, registry_doc)


def test_psi_lower_examples(small):
    assert psi_lower(TrialRecord("u", "c", "pi1", "1", "1", 1.0), E0, small) == pytest.approx(3.0, abs=1e-12)
    assert psi_lower(TrialRecord("u", "c", "pi0", "1", "0", 1.0), E0, small) == 0.0
    assert psi_lower(TrialRecord("u", "c", "pi2", "0", "0", 0.0), E1, small) == 0.0


def test_psi_upper_examples(small):
    assert psi_upper(TrialRecord("u", "c", "pi1", "1", "1", 1.0), E0, small) == 1.0
    assert psi_upper(TrialRecord("u", "c", "pi0", "0", "0", 0.0), E0, small) == 0.0
    same = candidate("pi2", sim_lab.PI_2, 0.375)
    rec = TrialRecord("u", "c", "pi2", "2", "1", 1.0)
    assert psi_lower(rec, same, small) == pytest.approx(3.0, abs=1e-12)
    assert psi_upper(rec, same, small) == pytest.approx(3.0, abs=1e-12)


def test_psi_vector_matches_per_record(small):
    lo, hi = psi_values(small, E0)
    for i, rec in enumerate(small.records):
        assert lo[i] == psi_lower(rec, E0, small)
        assert hi[i] == psi_upper(rec, E0, small)


def test_estimate_on_simulation(sim5000):
    rep = estimate_bounds(sim5000, E0, 0.05)
    assert rep.L_hat == pytest.approx(0.711, abs=0.05)
    assert rep.U_hat == pytest.approx(0.865, abs=0.05)
    z = normal_quantile(0.975)
    assert rep.ci_low == rep.L_hat - z * rep.sd_psi_L / math.sqrt(rep.n)
    assert rep.ci_high == rep.U_hat + z * rep.sd_psi_U / math.sqrt(rep.n)
    assert rep.ci_low <= rep.L_hat <= rep.U_hat <= rep.ci_high


def test_sd_uses_n_minus_one(sim5000):
    rep = estimate_bounds(sim5000, E1, keep_psi=True)
    assert rep.sd_psi_L == pytest.approx(np.std(rep.psi_L, ddof=1), rel=1e-12)


def test_constant_outcomes_neutral_policy(registry_doc):
    rows = HEADER + "".join(
        f"u{i},c,{pid},{x},{1 if (pid == 'pi1' and x == 1) or (pid == 'pi2' and x in (2, 3)) else 0},0.7\n"
        for i, (pid, x) in enumerate((p, x) for p in ("pi0", "pi1", "pi2") for x in range(4) for _ in range(3))
    )
    ds = load_dataset(rows, registry_doc)
    pi0 = candidate("pi0", sim_lab.PI_0)
    rep = estimate_bounds(ds, pi0, arm_probs="empirical")
    assert rep.L_hat == pytest.approx(0.7, abs=1e-12) and rep.U_hat == pytest.approx(0.7, abs=1e-12)


def test_interval_nests_in_alpha(sim5000):
    wide = estimate_bounds(sim5000, E0, 0.05)
    narrow = estimate_bounds(sim5000, E0, 0.32)
    assert wide.ci_low < narrow.ci_low and narrow.ci_high < wide.ci_high


def test_margin_shrinks_with_n():
    small = estimate_bounds(sim_lab.simulate_trial(500, 1).dataset, E0)
    large = estimate_bounds(sim_lab.simulate_trial(8000, 1).dataset, E0)
    assert (large.L_hat - large.ci_low) < (small.L_hat - small.ci_low)


def test_estimator_errors(registry_doc, sim5000):
    empty = load_dataset(HEADER, registry_doc)
    with pytest.raises(EmptyDatasetError):
        estimate_bounds(empty, E0)
    one = load_dataset(HEADER + "u0,c,pi0,0,0,1\n", registry_doc)
    with pytest.raises(DegenerateError):
        estimate_bounds(one, E0)
    with pytest.raises(DomainError):
        estimate_bounds(sim5000, E0, alpha=1.0)


def test_trialed_arm_value(sim5000, registry_doc):
    assert trialed_arm_value(sim5000, "pi0").mean == pytest.approx(0.46, abs=0.04)
    assert trialed_arm_value(sim5000, "pi1").mean == pytest.approx(0.55975, abs=0.04)
    one = load_dataset(HEADER + "u0,c,pi0,0,0,1\nu1,c,pi1,0,0,1\nu2,c,pi1,1,1,0\n", registry_doc)
    with pytest.raises(DegenerateError):
        trialed_arm_value(one, "pi0")
    arm = trialed_arm_value(sim5000, "pi2")
    assert arm.ci_low < arm.mean < arm.ci_high


@pytest.mark.parametrize("p", [1e-10, 1e-4, 0.01, 0.025, 0.3, 0.5, 0.84134, 0.975, 0.999, 1 - 1e-9])
def test_normal_quantile_against_mpmath(p):
    assert normal_quantile(p) == pytest.approx(mp_quantile(p), abs=1e-9)


def test_normal_quantile_examples():
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)
    assert normal_quantile(0.84134) == pytest.approx(1.0, abs=1e-4)
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(DomainError):
            normal_quantile(bad)


def test_psi_is_bounded(sim5000):
    min_prob = min(p.arm_prob for p in sim5000.policies)
    bound = max(abs(sim5000.y_min), abs(sim5000.y_max)) / min_prob
    for pi in random_policies(30, seed=3):
        lo, hi = psi_values(sim5000, pi)
        assert np.all(np.abs(lo) <= bound + 1e-12) and np.all(np.abs(hi) <= bound + 1e-12)


@pytest.mark.parametrize("mode", list(SetMode))
def test_estimator_equals_plugin_with_empirical_probs(mode, sim5000):
    small = sim_lab.simulate_trial(60, 11).dataset  # sparse cells exercise the empty-cell fallback
    for data in (sim5000, small):
        for pi in random_policies(30, seed=4):
            rep = estimate_bounds(data, pi, set_mode=mode, arm_probs="empirical")
            L, U, _ = exact_bounds(pi, data, mode)
            assert rep.L_hat == pytest.approx(L, abs=1e-9)
            assert rep.U_hat == pytest.approx(U, abs=1e-9)


def test_unbiasedness_link():
    pop = sim_lab.population_cells()
    L, U, _ = exact_bounds(E0, pop)
    hits = 0
    seeds = range(200)
    for seed in seeds:
        rep = estimate_bounds(sim_lab.simulate_trial(2000, 1000 + seed).dataset, E0)
        root = math.sqrt(rep.n)
        hits += abs(rep.L_hat - L) <= 4 * rep.sd_psi_L / root and abs(rep.U_hat - U) <= 4 * rep.sd_psi_U / root
    assert hits / len(seeds) >= 0.99


def test_worker_count_does_not_change_results(sim5000):
    one = estimate_bounds(sim5000, E1, workers=1)
    four = estimate_bounds(sim5000, E1, workers=4)
    assert one.to_json() == four.to_json()
