import csv

import numpy as np
import pytest

from uqcascade import calibrate as cal
from uqcascade import metrics as met
from uqcascade.cascade import policy_from_windows, run_cascade
from uqcascade.cli import main
from uqcascade.scoretab import read_binary, write_binary
from uqcascade.synth import SynthSpec, generate, split
from uqcascade.uncertainty import prefix_evaluate


@pytest.fixture(scope="module")
def tables(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    tab = generate(SynthSpec(n_id=2000, n_ood=1000, seed=3))
    val, test = split(tab, (0.5, 0.5), seed=103)
    val_path, test_path = root / "val.uqc", root / "test.uqc"
    write_binary(val, val_path)
    write_binary(test, test_path)
    return root, val_path, test_path


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, data = rows[0], rows[1:]
    return [dict(zip(header, r)) for r in data]


class TestSynthCmd:
    def test_writes_table(self, tmp_path):
        out = tmp_path / "t.uqc"
        rc = main(
            [
                "synth", "--out", str(out), "--n-id", "50", "--n-ood", "20",
                "--classes", "4", "--seed", "9", "--signal", "3,5",
            ]
        )
        assert rc == 0
        t = read_binary(out)
        assert (t.n_samples, t.n_classes) == (70, 4)

    def test_matches_library(self, tmp_path):
        out = tmp_path / "t.uqc"
        main(["synth", "--out", str(out), "--n-id", "30", "--n-ood", "10", "--seed", "4"])
        want = generate(SynthSpec(n_id=30, n_ood=10, seed=4))
        assert read_binary(out).same_numeric_content(want)


class TestCalibrateCmd:
    def test_sc_policy_file(self, tables, tmp_path):
        _, val_path, _ = tables
        pol_path = tmp_path / "sc.policy"
        rc = main(
            [
                "calibrate", "--val", str(val_path), "--task", "sc",
                "--point", "cov@5", "--window", "10", "--policy", str(pol_path),
            ]
        )
        assert rc == 0
        pol = cal.load_policy(pol_path)
        assert pol.point.task is cal.Task.SC
        assert pol.n_stages == 2
        assert len(pol.window_spec.windows) == 1
        # golden: recompute tau via direct library calls
        val = read_binary(val_path)
        id_val = val.subset(np.flatnonzero(val.id_mask))
        out1 = prefix_evaluate(id_val, pol.method, 1)
        losses = met.task_losses(out1.prediction, id_val.labels, id_val.ood_mask, cal.Task.SC)
        tau1 = cal.resolve_tau(
            out1.uncertainty,
            cal.OperatingPoint(cal.Task.SC, cal.RiskAtMost(5.0)),
            losses=losses,
            id_mask=id_val.id_mask,
        )
        assert pol.window_spec.taus[0] == tau1

    def test_zero_width_policy_evaluates_as_stage_one(self, tables, tmp_path):
        root, val_path, test_path = tables
        pol_path = tmp_path / "p0.policy"
        main(
            [
                "calibrate", "--val", str(val_path), "--task", "sc",
                "--point", "risk@80", "--window", "0", "--policy", str(pol_path),
            ]
        )
        out_dir = tmp_path / "out0"
        rc = main(["run", "--policy", str(pol_path), "--test", str(test_path), "--out", str(out_dir)])
        assert rc == 0
        rows = read_metrics_csv(out_dir / "metrics.csv")
        # all samples exit at stage 1 on test data (tau value never hit exactly)
        assert float(rows[0]["exit_frac_1"]) == 1.0
        assert float(rows[0]["avg_cost"]) == 1.0

    def test_missing_file_exit_code(self, tmp_path):
        rc = main(
            [
                "calibrate", "--val", str(tmp_path / "nope.uqc"), "--task", "sc",
                "--point", "cov@5", "--window", "10", "--policy", str(tmp_path / "p"),
            ]
        )
        assert rc == 2

    def test_bad_point_for_task(self, tables, tmp_path):
        _, val_path, _ = tables
        rc = main(
            [
                "calibrate", "--val", str(val_path), "--task", "sc",
                "--point", "fpr@95", "--window", "10", "--policy", str(tmp_path / "p"),
            ]
        )
        assert rc == 2

    def test_unsatisfiable_exit_code(self, tmp_path):
        # every prediction wrong: risk<=1% unattainable at any coverage
        from uqcascade.scoretab import ScoreTable

        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 40, 3)).astype(np.float32)
        preds = np.argmax(
            (np.exp(logits[0]) / np.exp(logits[0]).sum(-1, keepdims=True))
            + (np.exp(logits[1]) / np.exp(logits[1]).sum(-1, keepdims=True)),
            axis=-1,
        )
        labels = ((preds + 1) % 3).astype(np.int32)
        bad = ScoreTable(logits, labels, np.zeros(40, np.uint8), np.ones(2))
        path = tmp_path / "bad.uqc"
        write_binary(bad, path)
        rc = main(
            [
                "calibrate", "--val", str(path), "--task", "sc",
                "--point", "cov@1", "--window", "10", "--policy", str(tmp_path / "p"),
            ]
        )
        assert rc == 4


class TestRunCmd:
    def make_policy(self, val_path, tmp_path, task="sc", point="risk@80", extra=()):
        pol_path = tmp_path / "run.policy"
        rc = main(
            [
                "calibrate", "--val", str(val_path), "--task", task,
                "--point", point, "--window", "10", "--policy", str(pol_path),
                *extra,
            ]
        )
        assert rc == 0
        return pol_path

    def test_metrics_reproducible_by_library(self, tables, tmp_path):
        _, val_path, test_path = tables
        pol_path = self.make_policy(val_path, tmp_path)
        out_dir = tmp_path / "out"
        rc = main(
            [
                "run", "--policy", str(pol_path), "--test", str(test_path),
                "--out", str(out_dir), "--trace",
            ]
        )
        assert rc == 0
        rows = read_metrics_csv(out_dir / "metrics.csv")
        assert len(rows) == 1
        row = rows[0]

        pol = cal.load_policy(pol_path)
        test = read_binary(test_path)
        test_id = test.subset(np.flatnonzero(test.id_mask))
        trace = run_cascade(test_id, policy_from_windows(pol.window_spec, pol.method))
        rep = met.report(trace, test_id, [pol.point], beta=pol.beta)
        assert float(row["value"]) == rep.rows[0].value
        assert float(row["avg_cost"]) == rep.rows[0].avg_cost
        assert float(row["tau"]) == pol.tau_final

        # trace dump agrees
        with open(out_dir / "trace.csv", newline="") as fh:
            trows = list(csv.DictReader(fh))
        assert len(trows) == test_id.n_samples
        assert int(trows[0]["exit_stage"]) == trace.exit_stage[0]
        assert float(trows[0]["uncertainty"]) == trace.final_uncertainty[0]

    def test_config_hash_header_present(self, tables, tmp_path):
        _, val_path, test_path = tables
        pol_path = self.make_policy(val_path, tmp_path)
        out_dir = tmp_path / "outh"
        main(["run", "--policy", str(pol_path), "--test", str(test_path), "--out", str(out_dir)])
        first = open(out_dir / "metrics.csv").readline()
        assert first.startswith("# config_sha256: ")

    def test_scod_mixture_run(self, tables, tmp_path):
        _, val_path, test_path = tables
        pol_path = self.make_policy(val_path, tmp_path, task="scod", point="risk@80")
        out_dir = tmp_path / "outm"
        with pytest.warns(UserWarning, match="subsamples"):
            rc = main(
                [
                    "run", "--policy", str(pol_path), "--test", str(test_path),
                    "--alpha", "0.5", "--seed", "5", "--out", str(out_dir),
                ]
            )
        assert rc == 0
        row = read_metrics_csv(out_dir / "metrics.csv")[0]
        assert row["task"] == "scod"
        assert 1.0 <= float(row["avg_cost"]) <= 3.0

    def test_ood_adjusted_window_pass_fraction(self, tables, tmp_path):
        _, val_path, test_path = tables
        # fpr@80 keeps tau's mixture rank away from the 100th-percentile cap
        pol_path = self.make_policy(val_path, tmp_path, task="ood", point="fpr@80")
        out_dir = tmp_path / "outa"
        with pytest.warns(UserWarning, match="subsamples"):
            rc = main(
                [
                    "run", "--policy", str(pol_path), "--test", str(test_path),
                    "--alpha", "0.5", "--seed", "5", "--window-base", "mix-offline",
                    "--val", str(val_path), "--out", str(out_dir),
                ]
            )
        assert rc == 0
        row = read_metrics_csv(out_dir / "metrics.csv")[0]
        # offline adjustment passes ~20% of the mixed stream to stage 2
        assert float(row["exit_frac_2"]) == pytest.approx(0.20, abs=0.01)

    def test_shape_mismatch_exit_code(self, tables, tmp_path):
        _, val_path, test_path = tables
        pol_path = self.make_policy(val_path, tmp_path)
        three = generate(SynthSpec(n_id=30, n_ood=10, n_stages=3, signal=(3.0, 4.0, 5.0), seed=1))
        bad_path = tmp_path / "m3.uqc"
        write_binary(three, bad_path)
        rc = main(["run", "--policy", str(pol_path), "--test", str(bad_path), "--out", str(tmp_path / "x")])
        assert rc == 3


class TestSweepCmd:
    def test_sweep_nondecreasing_cost_and_extreme(self, tables, tmp_path):
        _, val_path, test_path = tables
        out_dir = tmp_path / "sw"
        # risk@50 puts tau at the validation median, so +-50 caps at [0, 100]
        # and, on the validation table itself, passes every sample
        rc = main(
            [
                "sweep", "--val", str(val_path), "--test", str(val_path),
                "--task", "sc", "--point", "risk@50",
                "--widths", "0,5,10,25,50", "--compare-single",
                "--out", str(out_dir),
            ]
        )
        assert rc == 0
        with open(out_dir / "sweep.csv", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        header, data = rows[0], rows[1:]
        idx = {h: i for i, h in enumerate(header)}
        window_rows = [r for r in data if r[idx["policy_kind"]] == "window"]
        single_rows = [r for r in data if r[idx["policy_kind"]] == "single"]
        assert len(window_rows) == 5 and len(single_rows) == 5
        costs = [float(r[idx["avg_cost"]]) for r in window_rows]
        assert all(a <= b for a, b in zip(costs, costs[1:]))

        # widest window, evaluated on the validation table itself, equals the
        # full ensemble
        val = read_binary(val_path)
        id_val = val.subset(np.flatnonzero(val.id_mask))
        from uqcascade.cascade import all_pass_policy

        full = run_cascade(id_val, all_pass_policy(cal.default_method(cal.Task.SC), 2))
        o = met.EvalOutcome.from_trace(full, id_val)
        want = met.risk_at_cov(o, 50.0, cal.CoverageBase.ID_ONLY, cal.Task.SC)
        assert float(window_rows[-1][idx["value"]]) == want
        assert float(window_rows[-1][idx["avg_cost"]]) == full.avg_cost


class TestReportCmd:
    def test_pretty_print(self, tables, tmp_path, capsys):
        _, val_path, test_path = tables
        pol_path = tmp_path / "r.policy"
        main(
            [
                "calibrate", "--val", str(val_path), "--task", "sc",
                "--point", "risk@80", "--window", "10", "--policy", str(pol_path),
            ]
        )
        out_dir = tmp_path / "outr"
        main(["run", "--policy", str(pol_path), "--test", str(test_path), "--out", str(out_dir)])
        capsys.readouterr()
        rc = main(["report", "--metrics", str(out_dir / "metrics.csv")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "risk@80" in out
        assert rc == 0

    def test_missing_metrics(self, tmp_path):
        assert main(["report", "--metrics", str(tmp_path / "none.csv")]) == 2
