"""Command-line front end: synth, calibrate, run, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 unsatisfiable operating criterion.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import metrics as met
from .cascade import (
    CascadePolicy,
    SingleThreshold,
    Window,
    policy_from_windows,
    run_cascade,
)
from .quantile import QuantileSketch
from .scoretab import (
    MixtureSpec,
    ScoreTableError,
    mix_subsample,
    read_binary,
    split_domains,
    write_binary,
)
from .synth import SynthSpec, generate
from .uncertainty import CombineRule, ScoreKind, ScoreMethod, prefix_evaluate


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _config_header(args, extra=None) -> list[str]:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if extra:
        cfg.update(extra)
    blob = json.dumps(cfg, sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:16]
    return [f"config_sha256: {digest}", f"config: {blob}"]


def _load_table(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"missing file: {p}")
    return read_binary(p)


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_point(text: str, task: cal.Task) -> cal.OperatingPoint:
    m = re.match(r"^(cov|risk|fpr)@([0-9.]+)$", text)
    if not m:
        raise ConfigError(f"bad --point {text!r}, expected cov@R, risk@C or fpr@P")
    kind, pct = m.group(1), float(m.group(2))
    allowed = {cal.Task.SC: ("cov", "risk"), cal.Task.SCOD: ("risk",), cal.Task.OOD: ("fpr",)}
    if kind not in allowed[task]:
        raise ConfigError(f"--point {text!r} is not calibratable for task {task.value}")
    crit = {"cov": cal.RiskAtMost, "risk": cal.CoverageExactly, "fpr": cal.TPRExactly}[kind](pct)
    return cal.OperatingPoint(task=task, criterion=crit)


def _parse_window(text: str, n_exits: int) -> tuple[float, ...]:
    vals = _parse_floats(text.replace("±", "").replace("+-", ""))
    if len(vals) == 1:
        vals = vals * n_exits
    if len(vals) != n_exits:
        raise ConfigError(f"expected 1 or {n_exits} window half-widths, got {len(vals)}")
    return vals


def _method_from_args(args, task: cal.Task) -> ScoreMethod:
    if args.method is None and args.combine is None:
        return cal.default_method(task)
    default = cal.default_method(task)
    kind = ScoreKind(args.method) if args.method else default.kind
    combine = CombineRule(args.combine) if args.combine else default.combine
    if kind is ScoreKind.ENERGY and args.combine is None:
        combine = CombineRule.MEMBER_MEAN
    try:
        return ScoreMethod(kind, combine)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _evaluation_table(table, task: cal.Task, alpha, seed):
    """Test population for the task: ID subset for SC, mixture otherwise."""
    if task is cal.Task.SC:
        if table.ood_mask.any():
            return table.subset(np.flatnonzero(table.id_mask))
        return table
    if not table.ood_mask.any():
        raise ConfigError(f"task {task.value} needs OOD samples in the test table")
    if alpha is None:
        return table
    id_pool, ood_pool = split_domains(table)
    return mix_subsample(id_pool, ood_pool, MixtureSpec(alpha=alpha, seed=seed))


def _id_subset(table):
    if table.ood_mask.any():
        return table.subset(np.flatnonzero(table.id_mask))
    return table


# ---------------------------------------------------------------------------
# calibration pipeline (shared by calibrate / run / sweep)
# ---------------------------------------------------------------------------


def _resolve_exit_taus(val_table, method, point, beta):
    """tau per exit, each resolved independently on ID validation data."""
    id_val = _id_subset(val_table)
    taus, val_uncertainties = [], []
    for m in range(1, id_val.n_stages):
        out = prefix_evaluate(id_val, method, m)
        losses = None
        if isinstance(point.criterion, cal.RiskAtMost):
            losses = met.task_losses(out.prediction, id_val.labels, id_val.ood_mask, point.task, beta)
        taus.append(
            cal.resolve_tau(out.uncertainty, point, losses=losses, id_mask=id_val.id_mask)
        )
        val_uncertainties.append(out.uncertainty)
    return taus, val_uncertainties, id_val


def _calibrate(val_table, method, point, half_widths, window_base, beta) -> cal.Policy:
    taus, val_u, id_val = _resolve_exit_taus(val_table, method, point, beta)
    spec = cal.build_windows(val_u, taus, half_widths, base=window_base)
    trace = run_cascade(id_val, policy_from_windows(spec, method))
    tau_final = cal.refit_final_tau(trace, id_val, point, beta)
    return cal.Policy(
        method=method,
        point=point.with_tau(tau_final),
        n_stages=val_table.n_stages,
        window_spec=spec,
        tau_final=tau_final,
        beta=beta,
    )


def _adjusted_windows(policy: cal.Policy, test_table, window_base: cal.WindowBase):
    """Replace the first window with its deployment-stream adjustment."""
    stream_u = prefix_evaluate(test_table, policy.method, 1).uncertainty
    tau1 = policy.window_spec.taus[0]
    hw1 = policy.window_spec.half_widths[0]
    if window_base is cal.WindowBase.DEPLOYMENT_OFFLINE:
        t1, t2 = cal.adjust_window_offline(stream_u, tau1, hw1)
    else:
        sketch = QuantileSketch()
        sketch.extend(stream_u)
        t1, t2 = cal.adjust_window_stream(sketch, tau1, hw1)
    windows = ((t1, t2),) + policy.window_spec.windows[1:]
    spec = cal.WindowSpec(
        half_widths=policy.window_spec.half_widths,
        base=window_base,
        taus=policy.window_spec.taus,
        windows=windows,
    )
    return spec


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    kwargs = dict(
        n_classes=args.classes,
        n_id=args.n_id,
        n_ood=args.n_ood,
        n_stages=args.stages,
        seed=args.seed,
    )
    if args.signal is not None:
        kwargs["signal"] = _parse_floats(args.signal)
    if args.sigma is not None:
        kwargs["noise_sigma"] = args.sigma
    if args.rho is not None:
        kwargs["stage_correlation"] = args.rho
    if args.ood_shift is not None:
        kwargs["ood_shift"] = args.ood_shift
    if args.costs is not None:
        kwargs["stage_cost"] = _parse_floats(args.costs)
    spec = SynthSpec(**kwargs)
    table = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    write_binary(table, tmp)
    os.replace(tmp, out)
    print(f"wrote {table.n_samples} samples x {table.n_stages} stages x {table.n_classes} classes to {out}")


def cmd_calibrate(args) -> None:
    task = cal.Task(args.task)
    val = _load_table(args.val)
    method = _method_from_args(args, task)
    point = _parse_point(args.point, task)
    point = cal.OperatingPoint(task, point.criterion, cal.CoverageBase(args.coverage_base))
    hw = _parse_window(args.window, val.n_stages - 1)
    policy = _calibrate(val, method, point, hw, cal.WindowBase(args.window_base), args.beta)
    out = Path(args.policy)
    out.parent.mkdir(parents=True, exist_ok=True)
    cal.save_policy(policy, out)
    taus = ", ".join(f"{t:.6g}" for t in policy.window_spec.taus)
    print(f"calibrated {task.value} policy: exit taus [{taus}], final tau {policy.tau_final:.6g} -> {out}")


def cmd_run(args) -> None:
    if not Path(args.policy).exists():
        raise ConfigError(f"missing file: {args.policy}")
    policy = cal.load_policy(args.policy)
    test = _load_table(args.test)
    if test.n_stages != policy.n_stages:
        raise ScoreTableError(
            f"policy expects {policy.n_stages} stages, test table has {test.n_stages}"
        )
    task = policy.point.task
    test_eval = _evaluation_table(test, task, args.alpha, args.seed)

    window_base = cal.WindowBase(args.window_base) if args.window_base else policy.window_spec.base
    spec = policy.window_spec
    tau_final = policy.tau_final
    point = policy.point
    if window_base is not cal.WindowBase.VALIDATION_ID:
        spec = _adjusted_windows(policy, test_eval, window_base)
        if args.val:
            val = _load_table(args.val)
            id_val = _id_subset(val)
            val_trace = run_cascade(id_val, policy_from_windows(spec, policy.method))
            tau_final = cal.refit_final_tau(val_trace, id_val, point, policy.beta)
            point = point.with_tau(tau_final)
        else:
            print("warning: adjusted windows without --val; keeping policy tau", file=sys.stderr)

    trace = run_cascade(test_eval, policy_from_windows(spec, policy.method))

    if point.coverage_base is cal.CoverageBase.ALL_SAMPLES and isinstance(
        point.criterion, cal.CoverageExactly
    ):
        # all-samples coverage: label-free percentile of the deployment stream
        tau_final = cal.resolve_tau(trace.final_uncertainty, point)
        point = point.with_tau(tau_final)

    points = [point]
    if args.point:
        if not args.val:
            raise ConfigError("extra --point values require --val for refitting")
        val = _load_table(args.val)
        id_val = _id_subset(val)
        val_trace = run_cascade(id_val, policy_from_windows(spec, policy.method))
        for text in args.point:
            extra = _parse_point(text, task)
            extra = cal.OperatingPoint(task, extra.criterion, cal.CoverageBase(args.coverage_base))
            tau = cal.refit_final_tau(val_trace, id_val, extra, policy.beta)
            points.append(extra.with_tau(tau))

    rep = met.report(trace, test_eval, points, beta=policy.beta)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = _config_header(args, {"resolved_windows": spec.windows, "tau_final": tau_final})
    metrics_path = out_dir / "metrics.csv"
    tmp = metrics_path.with_name(metrics_path.name + ".tmp")
    rep.write_csv(tmp, header_comments=header)
    os.replace(tmp, metrics_path)

    if args.trace:
        lines = ["sample_id,exit_stage,uncertainty,prediction,accepted"]
        accepted = trace.final_uncertainty <= tau_final
        for i in range(test_eval.n_samples):
            lines.append(
                f"{i},{trace.exit_stage[i]},{float(trace.final_uncertainty[i])!r},"
                f"{trace.final_prediction[i]},{int(accepted[i])}"
            )
        _atomic_write_text(out_dir / "trace.csv", "\n".join(lines) + "\n")

    for row in rep.rows:
        print(f"{row.task} {row.metric} = {row.value:.1f}  avg_cost = {row.avg_cost:.6g}")


def _sweep_metric(outcome, point, task):
    crit = point.criterion
    if task is cal.Task.OOD:
        u_id = outcome.uncertainty[~outcome.ood_mask]
        u_ood = outcome.uncertainty[outcome.ood_mask]
        return f"fpr@{crit.percent:g}", met.fpr_at_tpr(u_id, u_ood, crit.percent)
    if isinstance(crit, cal.RiskAtMost):
        return f"cov@{crit.percent:g}", met.cov_at_risk(outcome, crit.percent, task)
    return (
        f"risk@{crit.percent:g}",
        met.risk_at_cov(outcome, crit.percent, point.coverage_base, task),
    )


def cmd_sweep(args) -> None:
    task = cal.Task(args.task)
    val = _load_table(args.val)
    test = _load_table(args.test)
    method = _method_from_args(args, task)
    point = _parse_point(args.point, task)
    point = cal.OperatingPoint(task, point.criterion, cal.CoverageBase(args.coverage_base))
    test_eval = _evaluation_table(test, task, args.alpha, args.seed)
    widths = _parse_floats(args.widths)

    taus, val_u, id_val = _resolve_exit_taus(val, method, point, args.beta)
    n_exits = val.n_stages - 1

    rows = []
    for w in widths:
        hw = (w,) + (args.fixed_width,) * (n_exits - 1)
        spec = cal.build_windows(val_u, taus, hw)
        trace = run_cascade(test_eval, policy_from_windows(spec, method))
        outcome = met.EvalOutcome.from_trace(trace, test_eval, beta=args.beta)
        name, value = _sweep_metric(outcome, point, task)
        rows.append(("window", w, trace.avg_cost, name, value))

    if args.compare_single:
        sorted_val_u1 = np.sort(val_u[0])
        for w in widths:
            pass_pct = min(100.0, 2.0 * w)
            if pass_pct >= 100.0:
                rules = [Window(-np.inf, np.inf)]
            else:
                t = cal.nearest_rank(sorted_val_u1, 100.0 - pass_pct)
                rules = [SingleThreshold(t)]
            rules += [
                Window(*cal.window_around(val_u[m], taus[m], args.fixed_width))
                for m in range(1, n_exits)
            ]
            trace = run_cascade(test_eval, CascadePolicy(tuple(rules), method))
            outcome = met.EvalOutcome.from_trace(trace, test_eval, beta=args.beta)
            name, value = _sweep_metric(outcome, point, task)
            rows.append(("single", w, trace.avg_cost, name, value))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# {c}" for c in _config_header(args)]
    lines.append("policy_kind,half_width,avg_cost,metric,value")
    for kind, w, cost, name, value in rows:
        lines.append(f"{kind},{w!r},{cost!r},{name},{value!r}")
    _atomic_write_text(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(rows)} sweep rows to {out_dir / 'sweep.csv'}")


def cmd_report(args) -> None:
    path = Path(args.metrics)
    if not path.exists():
        raise ConfigError(f"missing file: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ScoreTableError(f"no rows in {path}")
    header, body = rows[0], rows[1:]
    idx = {name: i for i, name in enumerate(header)}
    print(f"{'task':<6} {'metric':<12} {'value':>8} {'avg_cost':>10} {'coverage':>9}")
    for r in body:
        value = float(r[idx["value"]])
        cost = float(r[idx["avg_cost"]])
        cov = float(r[idx["coverage_percent"]]) if "coverage_percent" in idx else float("nan")
        print(f"{r[idx['task']]:<6} {r[idx['metric']]:<12} {value:>8.1f} {cost:>10.4g} {cov:>9.1f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uqc",
        description="Window-based early-exit cascade calibration and evaluation",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic score table (UQC1)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-id", type=int, default=20000)
    p.add_argument("--n-ood", type=int, default=10000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--signal", help="per-stage class-evidence scales, e.g. 12,13")
    p.add_argument("--sigma", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--ood-shift", type=float)
    p.add_argument("--costs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="resolve taus and windows on validation data")
    p.add_argument("--val", required=True)
    p.add_argument("--task", required=True, choices=["sc", "ood", "scod"])
    p.add_argument("--method", choices=["msp", "energy"])
    p.add_argument("--combine", choices=["pred", "member"])
    p.add_argument("--point", required=True, help="cov@R, risk@C or fpr@P")
    p.add_argument("--window", required=True, help="half-width percentiles, e.g. 10 or 10,5")
    p.add_argument("--window-base", default="id", choices=["id", "mix-offline", "mix-stream"])
    p.add_argument("--coverage-base", default="id", choices=["id", "all"])
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--policy", required=True, help="output policy path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run a calibrated policy on a test table")
    p.add_argument("--policy", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--val", help="validation table, for tau refits")
    p.add_argument("--alpha", type=float, help="ID fraction of the evaluation mixture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-base", choices=["id", "mix-offline", "mix-stream"])
    p.add_argument("--coverage-base", default="id", choices=["id", "all"])
    p.add_argument("--point", action="append", help="extra operating points (repeatable)")
    p.add_argument("--trace", action="store_true", help="also dump per-sample trace.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cost-performance curve over window widths")
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--task", required=True, choices=["sc", "ood", "scod"])
    p.add_argument("--method", choices=["msp", "energy"])
    p.add_argument("--combine", choices=["pred", "member"])
    p.add_argument("--point", required=True)
    p.add_argument("--widths", required=True, help="first-window half-widths, e.g. 0,5,10,25,50")
    p.add_argument("--fixed-width", type=float, default=10.0, help="half-width for later exits")
    p.add_argument("--compare-single", action="store_true")
    p.add_argument("--coverage-base", default="id", choices=["id", "all"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="pretty-print a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        args.func(args)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ScoreTableError, cal.PolicyError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except cal.UnsatisfiableCriterion as e:
        print(f"unsatisfiable criterion: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
