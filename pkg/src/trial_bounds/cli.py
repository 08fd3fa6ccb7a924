"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 when a
falsification test rejects after multiplicity adjustment.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import warnings
from pathlib import Path

from . import sim_lab
from .bound_engine import bounds_to_json, decompose_gap, exact_bounds
from .errors import ConfigError, TrialBoundsError
from .estimator import estimate_bounds, trialed_arm_value
from .falsification import Method, run_all_pairs
from .policy_sets import EvaluationPolicy, SetMode, load_policies
from .trial_data import TrialDataset, dataset_to_csv, load_dataset, registry_to_json

EXIT_OK, EXIT_CONFIG, EXIT_FALSIFIED = 0, 2, 3
SEED_ENV = "TRIAL_BOUNDS_SEED"
REPORT_COLUMNS = ("policy", "accuracy", "L_hat", "U_hat", "ci_low", "ci_high", "arm_mean")


def fmt_float(x: float) -> float | None:
    """Round to 12 significant digits so serialised output is stable."""
    if x is None or not math.isfinite(x):
        return None
    return float(format(x, ".12g"))


def _round_floats(obj):
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def to_json_text(obj) -> str:
    return json.dumps(_round_floats(obj), indent=2, allow_nan=False) + "\n"


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        r = fmt_float(v)
        return "" if r is None else repr(r)
    return str(v)


def to_csv_text(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _resolve_seed(seed: int | None, required: bool) -> int | None:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    if required:
        raise ConfigError(f"a seed is required: pass --seed or set {SEED_ENV}")
    return None


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, [])]
    if missing:
        raise ConfigError(f"{args.command} requires {', '.join(missing)}")


def _load(args) -> TrialDataset:
    _need(args, "dataset", "registry")
    return load_dataset(args.dataset, args.registry)


def _policies(args, dataset: TrialDataset, attr: str) -> list[EvaluationPolicy]:
    paths = getattr(args, attr) or []
    if isinstance(paths, str):
        paths = [paths]
    out: list[EvaluationPolicy] = []
    for path in paths:
        out.extend(load_policies(path, dataset.covariate_support))
    return out


def _set_mode(args) -> SetMode:
    return SetMode(args.set_mode)


def _estimate(args, dataset, policy):
    arm_probs = "design"
    if args.empirical_arm_probs:
        warnings.warn("using empirical per-covariate arm frequencies instead of design probabilities")
        arm_probs = "empirical"
    report = estimate_bounds(
        dataset, policy, args.alpha, _set_mode(args), arm_probs, args.perf_eps, args.workers
    )
    out = report.to_json()
    if report.L_hat > report.U_hat:
        out["crossed"] = True
        if args.clamp:
            mid = 0.5 * (report.L_hat + report.U_hat)
            out["L_hat"] = out["U_hat"] = mid
            out["clamped"] = True
    return out


def cmd_simulate(args) -> int:
    if args.n is None or args.n < 1:
        raise ConfigError(f"--n must be a positive integer, got {args.n}")
    seed = _resolve_seed(args.seed, required=True)
    dgp = sim_lab.paper_dgp(args.variant)
    sim = sim_lab.simulate_trial(args.n, seed, dgp)
    out_dir = Path(args.out_dir)
    files = {
        "dataset": out_dir / "trial.csv",
        "registry": out_dir / "registry.json",
        "policies": out_dir / "policies.json",
    }
    write_atomic(files["dataset"], dataset_to_csv(sim.dataset))
    write_atomic(files["registry"], registry_to_json(sim.dataset.registry))
    candidates = [(name, arm) for name, arm in dgp.arms] + [("pi_e0", sim_lab.PI_E0), ("pi_e1", sim_lab.PI_E1)]
    policy_docs = [
        {
            "id": name,
            "performance": sim_lab.true_accuracy(arm, dgp),
            "action_map": {str(x): str(a) for x, a in zip(sim_lab.SUPPORT, arm)},
        }
        for name, arm in candidates
    ]
    write_atomic(files["policies"], json.dumps(policy_docs, indent=2) + "\n")
    if args.emit_latent:
        files["latent"] = out_dir / "latent.csv"
        write_atomic(files["latent"], sim.latent_csv())
    counts = {p.id: 0 for p in sim.dataset.policies}
    for i in sim.dataset.policy_idx:
        counts[sim.dataset.policies[i].id] += 1
    summary = {
        "n": args.n,
        "seed": seed,
        "variant": dgp.variant.value,
        "files": {k: str(v) for k, v in files.items()},
        "arms": [
            {"id": name, "count": counts[name], "accuracy": sim_lab.true_accuracy(arm, dgp)}
            for name, arm in dgp.arms
        ],
    }
    if args.output == "csv":
        _emit(to_csv_text(summary["arms"], ("id", "count", "accuracy")), args.out)
    else:
        _emit(to_json_text(summary), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = _load(args)
    _need(args, "policy")
    policies = _policies(args, dataset, "policy")
    results = []
    for policy in policies:
        if args.estimator == "plugin":
            res = exact_bounds(policy, dataset, _set_mode(args), args.perf_eps, args.clamp)
            results.append(bounds_to_json(res, decompose_gap(policy, dataset, _set_mode(args), args.perf_eps)))
        else:
            results.append(_estimate(args, dataset, policy))
    if args.output == "csv":
        if args.estimator == "plugin":
            rows = [{"policy": r["policy"], "L": r["L"], "U": r["U"]} for r in results]
            _emit(to_csv_text(rows, ("policy", "L", "U")), args.out)
        else:
            rows = [dict(r, ci_low=r["ci"][0], ci_high=r["ci"][1]) for r in results]
            cols = ("policy", "L_hat", "U_hat", "sd_L", "sd_U", "n", "alpha", "ci_low", "ci_high")
            _emit(to_csv_text(rows, cols), args.out)
    else:
        _emit(to_json_text(results[0] if len(results) == 1 else results), args.out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    dataset = _load(args)
    _need(args, "policy")
    out = []
    for policy in _policies(args, dataset, "policy"):
        res = exact_bounds(policy, dataset, _set_mode(args), args.perf_eps, args.clamp)
        dec = decompose_gap(policy, dataset, _set_mode(args), args.perf_eps)
        doc = bounds_to_json(res, dec)
        doc["total_gap"] = dec.total_gap
        out.append(doc)
    if args.output == "csv":
        rows = [dict(c, policy=d["policy"]) for d in out for c in d["cells"]]
        cols = ("policy", "x", "lower", "upper", "lower_source", "upper_source", "delta_component", "delta")
        _emit(to_csv_text(rows, cols), args.out)
    else:
        _emit(to_json_text(out[0] if len(out) == 1 else out), args.out)
    return EXIT_OK


def cmd_falsify(args) -> int:
    dataset = _load(args)
    seed = _resolve_seed(args.seed, required=False) or 0
    report = run_all_pairs(dataset, args.alpha, Method(args.method), seed)
    docs = report.to_json()
    if args.output == "csv":
        cols = ("assumption", "pair", "status", "reason", "statistic", "p_value", "p_adjusted",
                "rejected_raw", "rejected_adjusted")
        rows = [dict(d, pair="|".join(d["pair"])) for d in docs]
        _emit(to_csv_text(rows, cols), args.out)
    else:
        _emit(to_json_text(docs), args.out)
    return EXIT_FALSIFIED if report.any_rejected else EXIT_OK


def report_rows(args, dataset: TrialDataset, policies: list[EvaluationPolicy]) -> list[dict]:
    rows = []
    for policy in policies:
        est = _estimate(args, dataset, policy)
        arm_mean = None
        for arm in dataset.policies:
            if arm.action_map == policy.action_map and dataset.n:
                try:
                    arm_mean = trialed_arm_value(dataset, arm.id, args.alpha).mean
                except TrialBoundsError:
                    arm_mean = None
                break
        rows.append(
            {
                "policy": policy.id,
                "accuracy": policy.performance,
                "L_hat": est["L_hat"],
                "U_hat": est["U_hat"],
                "ci_low": est["ci"][0],
                "ci_high": est["ci"][1],
                "arm_mean": arm_mean,
            }
        )
    return rows


def render_svg(rows: list[dict]) -> str:
    """Bar chart: accuracy bars next to the estimated value interval per policy."""
    width, height, pad, slot = 120 * max(len(rows), 1) + 80, 320, 40, 120
    scale = height - 2 * pad

    def ypos(v):
        return height - pad - scale * max(0.0, min(1.0, v))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, r in enumerate(rows):
        x0 = pad + 20 + i * slot
        acc = r["accuracy"]
        parts.append(
            f'<rect x="{x0}" y="{ypos(acc):.2f}" width="30" height="{scale * acc:.2f}" fill="#bbbbbb"/>'
        )
        lo, hi = r["L_hat"], r["U_hat"]
        parts.append(
            f'<rect x="{x0 + 40}" y="{ypos(hi):.2f}" width="30" height="{max(0.0, scale * (hi - lo)):.2f}" '
            f'fill="#4a78c2" fill-opacity="0.6"/>'
        )
        parts.append(
            f'<line x1="{x0 + 55}" y1="{ypos(r["ci_high"]):.2f}" x2="{x0 + 55}" y2="{ypos(r["ci_low"]):.2f}" '
            f'stroke="#1a3a72"/>'
        )
        if r["arm_mean"] is not None:
            y = ypos(r["arm_mean"])
            parts.append(f'<line x1="{x0 + 36}" y1="{y:.2f}" x2="{x0 + 74}" y2="{y:.2f}" stroke="red"/>')
        parts.append(
            f'<text x="{x0 + 35}" y="{height - pad + 16}" font-size="12" text-anchor="middle">{r["policy"]}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    dataset = _load(args)
    policies = _policies(args, dataset, "policies") + _policies(args, dataset, "policy")
    rows = report_rows(args, dataset, policies)
    if args.output == "json":
        _emit(to_json_text(rows), args.out)
    else:
        _emit(to_csv_text(rows, REPORT_COLUMNS), args.out)
    if args.svg:
        write_atomic(args.svg, render_svg(rows))
    return EXIT_OK


def _alpha(text: str) -> float:
    value = float(text)
    if not (0.0 < value < 1.0):
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", help="trial records CSV")
    common.add_argument("--registry", help="policy registry JSON")
    common.add_argument("--policy", action="append", help="evaluation policy JSON (object or array)")
    common.add_argument("--policies", nargs="+", help="evaluation policy files for the report")
    common.add_argument("--alpha", type=_alpha, default=0.05)
    common.add_argument("--set-mode", choices=[m.value for m in SetMode], default="tight")
    common.add_argument("--estimator", choices=["ipw", "plugin"], default="ipw")
    common.add_argument("--seed", type=int)
    common.add_argument("--n", type=int)
    common.add_argument("--variant", choices=[v.value for v in sim_lab.Variant], default="paper")
    common.add_argument("--output", choices=["json", "csv"], help="default: csv for report, json otherwise")
    common.add_argument("--out", help="write the command output here instead of stdout")
    common.add_argument("--out-dir", default=".", help="simulate: directory for generated files")
    common.add_argument("--emit-latent", action="store_true")
    common.add_argument("--perf-eps", type=float, default=0.0)
    common.add_argument("--empirical-arm-probs", action="store_true")
    common.add_argument("--clamp", action="store_true")
    common.add_argument("--method", choices=["welch_t", "permutation"], default="welch_t")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--svg", help="report: also write a bar chart here")

    parser = argparse.ArgumentParser(
        prog="trial-bounds", description="Bounds and assumption checks for untrialed decision policies."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in (
        ("simulate", cmd_simulate, "generate a synthetic three-arm trial"),
        ("evaluate", cmd_evaluate, "bound the value of evaluation policies"),
        ("falsify", cmd_falsify, "test the monotonicity and neutral-action assumptions"),
        ("decompose", cmd_decompose, "explain the width of the bounds per covariate value"),
        ("report", cmd_report, "per-policy accuracy vs. value table (and optional SVG)"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.output is None:
        args.output = "csv" if args.command == "report" else "json"
    try:
        return args.func(args)
    except (TrialBoundsError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(to_json_text({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
