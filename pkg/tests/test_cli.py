import csv
import io
import json

import pytest

from trial_bounds import sim_lab
from trial_bounds.cli import fmt_float, main, to_json_text
from trial_bounds.falsification import run_all_pairs


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--n", "5000", "--seed", "7", "--variant", "paper", "--out-dir", str(d),
                 "--out", str(d / "summary.json")]) == 0
    return d


def data_args(d):
    return ["--dataset", d / "trial.csv", "--registry", d / "registry.json"]


def write_policy(path, name, actions, performance=None):
    doc = {"id": name, "action_map": {str(x): str(a) for x, a in zip(sim_lab.SUPPORT, actions)}}
    if performance is not None:
        doc["performance"] = performance
    path.write_text(json.dumps(doc))
    return path


def test_fmt_float_rounds_to_twelve_digits():
    assert fmt_float(0.1 + 0.2) == 0.3
    assert fmt_float(float("nan")) is None
    assert json.loads(to_json_text({"v": [1 / 3]}))["v"][0] == 0.333333333333


def test_simulate_summary(sim_dir):
    summary = json.loads((sim_dir / "summary.json").read_text())
    assert [a["accuracy"] for a in summary["arms"]] == [0.325, 0.425, 0.375]
    assert sum(a["count"] for a in summary["arms"]) == 5000
    for name in ("trial.csv", "registry.json", "policies.json"):
        assert (sim_dir / name).exists()


def test_simulate_rejects_bad_n(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "--n", 0, "--seed", 1, "--out-dir", tmp_path)
    assert code == 2
    assert json.loads(err)["error"] == "ConfigError"


def test_simulate_requires_seed(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("TRIAL_BOUNDS_SEED", raising=False)
    code, _, _ = run(capsys, "simulate", "--n", 10, "--out-dir", tmp_path)
    assert code == 2


def test_simulate_twice_is_identical(capsys, tmp_path):
    for sub in ("a", "b"):
        assert run(capsys, "simulate", "--n", 300, "--seed", 5, "--emit-latent", "--out-dir", tmp_path / sub)[0] == 0
    for name in ("trial.csv", "registry.json", "policies.json", "latent.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_env_seed_fallback(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("TRIAL_BOUNDS_SEED", "5")
    assert run(capsys, "simulate", "--n", 300, "--out-dir", tmp_path / "env")[0] == 0
    assert run(capsys, "simulate", "--n", 300, "--seed", 5, "--out-dir", tmp_path / "flag")[0] == 0
    assert (tmp_path / "env" / "trial.csv").read_bytes() == (tmp_path / "flag" / "trial.csv").read_bytes()
    monkeypatch.setenv("TRIAL_BOUNDS_SEED", "seven")
    assert run(capsys, "simulate", "--n", 300, "--out-dir", tmp_path / "bad")[0] == 2


def test_evaluate_ipw(capsys, sim_dir, tmp_path):
    pol = write_policy(tmp_path / "e0.json", "pi_e0", sim_lab.PI_E0, 0.475)
    code, out, _ = run(capsys, "evaluate", *data_args(sim_dir), "--policy", pol)
    assert code == 0
    doc = json.loads(out)
    assert set(doc) == {"policy", "L_hat", "U_hat", "sd_L", "sd_U", "n", "alpha", "ci"}
    assert doc["L_hat"] == pytest.approx(0.711, abs=0.05)
    assert doc["U_hat"] == pytest.approx(0.865, abs=0.05)
    assert doc["ci"][0] <= doc["L_hat"] <= doc["U_hat"] <= doc["ci"][1]


def test_evaluate_trialed_arm_collapses(capsys, sim_dir, tmp_path):
    pol = write_policy(tmp_path / "p1.json", "pi1", sim_lab.PI_1, 0.425)
    code, out, _ = run(capsys, "evaluate", *data_args(sim_dir), "--policy", pol)
    doc = json.loads(out)
    assert code == 0 and doc["L_hat"] == doc["U_hat"]
    assert doc["L_hat"] == pytest.approx(sim_lab.true_policy_value(sim_lab.PI_1), abs=0.04)


def test_evaluate_plugin_policy_array(capsys, sim_dir):
    code, out, _ = run(capsys, "evaluate", *data_args(sim_dir), "--policy", sim_dir / "policies.json",
                       "--estimator", "plugin")
    docs = json.loads(out)
    assert code == 0 and [d["policy"] for d in docs] == ["pi0", "pi1", "pi2", "pi_e0", "pi_e1"]
    assert all(len(d["cells"]) == 4 for d in docs)


@pytest.fixture
def population_dir(tmp_path):
    """One record per (x, arm) carrying the analytic cell mean, so plug-in equals population."""
    dgp = sim_lab.paper_dgp()
    rows = ["unit_id,cluster,policy_id,x,a,y"]
    k = 0
    for x in sim_lab.SUPPORT:
        for name, arm in dgp.arms:
            m = sim_lab.true_accuracy(arm)
            y = sim_lab.survival_probability(x, arm[x], m, dgp, control=not any(arm))
            rows.append(f"u{k},{name},{name},{x},{arm[x]},{y!r}")
            k += 1
    (tmp_path / "trial.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "registry.json").write_text(json.dumps(sim_lab.registry_for(dgp).to_dict()))
    return tmp_path


@pytest.mark.parametrize("name, acts", [("pi_e0", sim_lab.PI_E0), ("pi_e1", sim_lab.PI_E1)])
def test_relaxed_contains_tight(capsys, population_dir, name, acts):
    pol = write_policy(population_dir / "p.json", name, acts, sim_lab.true_accuracy(acts))
    docs = {}
    for mode in ("tight", "relaxed"):
        code, out, _ = run(capsys, "evaluate", *data_args(population_dir), "--policy", pol,
                           "--estimator", "plugin", "--set-mode", mode)
        assert code == 0
        docs[mode] = json.loads(out)
    assert docs["relaxed"]["L"] <= docs["tight"]["L"] + 1e-12
    assert docs["tight"]["U"] <= docs["relaxed"]["U"] + 1e-12
    assert (docs["tight"]["L"], docs["tight"]["U"]) == pytest.approx(sim_lab.oracle_exact_bounds(acts), abs=1e-11)


def test_validation_failure_exits_2(capsys, sim_dir, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("unit_id,cluster,policy_id,x,a,y\nu0,c,pi1,1,0,1.0\n")
    pol = write_policy(tmp_path / "p.json", "pi1", sim_lab.PI_1, 0.425)
    code, out, err = run(capsys, "evaluate", "--dataset", bad, "--registry", sim_dir / "registry.json",
                         "--policy", pol)
    assert code == 2 and out == ""
    assert json.loads(err)["error"] == "ConsistencyError"


def test_missing_paths_exit_2(capsys):
    assert run(capsys, "evaluate")[0] == 2
    assert run(capsys, "falsify", "--dataset", "/nonexistent.csv", "--registry", "/nonexistent.json")[0] == 2


def test_bad_alpha_rejected_by_parser(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--alpha", "1.5"])
    assert exc.value.code == 2


def test_decompose_csv(capsys, sim_dir, tmp_path):
    pol = write_policy(tmp_path / "e1.json", "pi_e1", sim_lab.PI_E1, 0.625)
    code, out, _ = run(capsys, "decompose", *data_args(sim_dir), "--policy", pol, "--output", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["x"] for r in rows] == ["0", "1", "2", "3"]


def test_falsify_paper_data(capsys, sim_dir):
    code, out, _ = run(capsys, "falsify", *data_args(sim_dir), "--seed", 1)
    docs = json.loads(out)
    assert code in (0, 3)
    assert code == (3 if any(d.get("rejected_adjusted") for d in docs) else 0)
    tested = [(d["assumption"], tuple(d["pair"])) for d in docs if d["status"] == "TESTED"]
    assert ("performance_monotonicity", ("pi2", "pi1")) in tested
    assert sum(a == "neutral_actions" for a, _ in tested) == 3


def test_falsify_single_arm_is_empty(capsys, tmp_path):
    reg = sim_lab.registry_for(sim_lab.DgpSpec(arms=(("pi1", sim_lab.PI_1),))).to_dict()
    (tmp_path / "registry.json").write_text(json.dumps(reg))
    (tmp_path / "trial.csv").write_text("unit_id,cluster,policy_id,x,a,y\nu0,c,pi1,1,1,1.0\nu1,c,pi1,0,0,0.0\n")
    code, out, _ = run(capsys, "falsify", *data_args(tmp_path))
    assert code == 0 and json.loads(out) == []


def test_falsify_exit_zero_mostly_under_null():
    ok = sum(not run_all_pairs(sim_lab.simulate_trial(5000, s).dataset).any_rejected for s in range(100))
    assert ok >= 95


def test_report_rows_and_formats(capsys, sim_dir, tmp_path):
    svg = tmp_path / "fig.svg"
    code, out_csv, _ = run(capsys, "report", *data_args(sim_dir), "--policies", sim_dir / "policies.json",
                           "--svg", svg)
    assert code == 0 and svg.read_text().startswith("<svg")
    rows = list(csv.DictReader(io.StringIO(out_csv)))
    assert [r["policy"] for r in rows] == ["pi0", "pi1", "pi2", "pi_e0", "pi_e1"]
    acc = {r["policy"]: float(r["accuracy"]) for r in rows}
    lo = {r["policy"]: float(r["L_hat"]) for r in rows}
    assert max(acc, key=acc.get) == "pi_e1"
    assert max(lo, key=lo.get) == "pi_e0"
    assert all(r["arm_mean"] for r in rows[:3]) and not any(r["arm_mean"] for r in rows[3:])

    code, out_json, _ = run(capsys, "report", *data_args(sim_dir), "--policies", sim_dir / "policies.json",
                            "--output", "json")
    for r, d in zip(rows, json.loads(out_json)):
        for col in ("accuracy", "L_hat", "U_hat", "ci_low", "ci_high"):
            assert float(r[col]) == d[col]


def test_report_empty_policy_list(capsys, sim_dir, tmp_path):
    empty = tmp_path / "none.json"
    empty.write_text("[]")
    code, out, _ = run(capsys, "report", *data_args(sim_dir), "--policies", empty)
    assert code == 0
    assert out == "policy,accuracy,L_hat,U_hat,ci_low,ci_high,arm_mean\n"


def test_output_file_is_written_atomically(capsys, sim_dir, tmp_path):
    pol = write_policy(tmp_path / "p.json", "pi2", sim_lab.PI_2, 0.375)
    target = tmp_path / "out" / "res.json"
    code, out, _ = run(capsys, "evaluate", *data_args(sim_dir), "--policy", pol, "--out", target)
    assert code == 0 and out == ""
    assert json.loads(target.read_text())["policy"] == "pi2"
    assert [p.name for p in target.parent.iterdir()] == ["res.json"]
