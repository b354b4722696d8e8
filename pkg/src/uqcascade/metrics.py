"""Task losses, risk-coverage machinery, and detection metrics.

Selective classification measures the 0/1 error over accepted ID samples.
With OOD data in the mix, an accepted OOD sample additionally costs beta.
Acceptance is always U <= tau; sweeping tau over the observed uncertainty
values traces the risk-coverage curve. All metrics depend on uncertainties
only through their ranks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .calibrate import (
    CoverageBase,
    CoverageExactly,
    OperatingPoint,
    RiskAtMost,
    Task,
    TPRExactly,
    resolve_tau,
)
from .cascade import CascadeTrace
from .scoretab import ScoreTable


def task_losses(predictions, labels, ood_mask, task: Task, beta: float = 1.0) -> np.ndarray:
    """Per-sample acceptance loss. SC: 0/1 error (OOD rows, if any, are the
    caller's responsibility to mask out). SCOD: 0/1 error on ID, beta on OOD."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    ood = np.asarray(ood_mask, dtype=bool)
    if task is Task.OOD:
        raise ValueError("OOD detection has no per-sample acceptance loss")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    err = (pred != lab).astype(np.float64)
    if task is Task.SC:
        return np.where(ood, 0.0, err)
    return np.where(ood, float(beta), err)


@dataclass(frozen=True)
class EvalOutcome:
    """Per-sample evaluation inputs: uncertainty, prediction, label, domain."""

    uncertainty: np.ndarray
    prediction: np.ndarray
    label: np.ndarray
    ood_mask: np.ndarray
    beta: float = 1.0

    @classmethod
    def from_trace(cls, trace: CascadeTrace, table: ScoreTable, beta: float = 1.0) -> "EvalOutcome":
        return cls(
            uncertainty=trace.final_uncertainty,
            prediction=trace.final_prediction,
            label=table.labels,
            ood_mask=table.ood_mask,
            beta=beta,
        )


@dataclass(frozen=True)
class RCCurve:
    """Risk-coverage points at every distinct threshold, tie groups merged.

    coverage and risk are fractions in [0, 1]; coverage is strictly
    increasing and ends at 1 where risk equals the overall loss rate.
    prefix_risks holds the risk after accepting 1..N samples in uncertainty
    order (stable sort), the grid AURC averages over.
    """

    coverage: np.ndarray
    risk: np.ndarray
    thresholds: np.ndarray
    prefix_risks: np.ndarray


def _population(outcome: EvalOutcome, task: Task) -> tuple[np.ndarray, np.ndarray]:
    """(uncertainty, per-sample loss) over the task's evaluation population."""
    if task is Task.SC:
        keep = ~outcome.ood_mask
        u = outcome.uncertainty[keep]
        loss = task_losses(outcome.prediction[keep], outcome.label[keep], outcome.ood_mask[keep], task, outcome.beta)
    elif task is Task.SCOD:
        u = outcome.uncertainty
        loss = task_losses(outcome.prediction, outcome.label, outcome.ood_mask, task, outcome.beta)
    else:
        raise ValueError("risk-coverage curves are defined for SC and SCOD")
    return np.asarray(u, dtype=np.float64), loss


def rc_curve(outcome: EvalOutcome, task: Task) -> RCCurve:
    u, loss = _population(outcome, task)
    n = u.size
    if n == 0:
        raise ValueError("empty evaluation population")
    order = np.argsort(u, kind="stable")
    u_sorted = u[order]
    cum_loss = np.cumsum(loss[order])
    counts = np.arange(1, n + 1, dtype=np.float64)
    prefix_risks = cum_loss / counts
    group_end = np.flatnonzero(np.r_[u_sorted[1:] != u_sorted[:-1], True])
    return RCCurve(
        coverage=counts[group_end] / n,
        risk=prefix_risks[group_end],
        thresholds=u_sorted[group_end],
        prefix_risks=prefix_risks,
    )


def aurc(curve: RCCurve) -> float:
    """Unweighted mean of the per-prefix risks."""
    return float(curve.prefix_risks.mean())


def cov_at_risk(outcome: EvalOutcome, r_percent: float, task: Task = Task.SC) -> float:
    """Max coverage (percent) with selective risk <= r; 0 if unattainable."""
    curve = rc_curve(outcome, task)
    ok = curve.risk <= r_percent / 100.0
    if not np.any(ok):
        return 0.0
    return 100.0 * float(curve.coverage[ok].max())


def risk_at_cov(
    outcome: EvalOutcome,
    c_percent: float,
    coverage_base: CoverageBase = CoverageBase.ID_ONLY,
    task: Task = Task.SC,
) -> float:
    """Risk (percent) at the tau realizing coverage c over the stated base."""
    point = OperatingPoint(task=task, criterion=CoverageExactly(c_percent), coverage_base=coverage_base)
    tau = resolve_tau(outcome.uncertainty, point, id_mask=~outcome.ood_mask)
    return selective_risk_at(outcome, tau, task)


def selective_risk_at(outcome: EvalOutcome, tau: float, task: Task) -> float:
    """Realized selective risk (percent) accepting U <= tau."""
    u, loss = _population(outcome, task)
    accepted = u <= tau
    n_acc = int(np.count_nonzero(accepted))
    if n_acc == 0:
        return 0.0
    return 100.0 * float(loss[accepted].sum()) / n_acc


def auroc(id_uncertainties, ood_uncertainties) -> float:
    """P(U_id < U_ood) + 0.5 P(tie), via average tied ranks."""
    u_id = np.asarray(id_uncertainties, dtype=np.float64)
    u_ood = np.asarray(ood_uncertainties, dtype=np.float64)
    if u_id.size == 0 or u_ood.size == 0:
        raise ValueError("both classes must be nonempty")
    ranks = rankdata(np.concatenate([u_id, u_ood]))
    n_i, n_o = u_id.size, u_ood.size
    rank_sum_ood = float(ranks[n_i:].sum())
    return (rank_sum_ood - n_o * (n_o + 1) / 2.0) / (n_i * n_o)


def fpr_at_tpr(id_uncertainties, ood_uncertainties, p_percent: float) -> float:
    """FPR (percent): OOD fraction accepted at the tau fixing ID TPR = p."""
    u_id = np.asarray(id_uncertainties, dtype=np.float64)
    u_ood = np.asarray(ood_uncertainties, dtype=np.float64)
    if u_id.size == 0 or u_ood.size == 0:
        raise ValueError("both classes must be nonempty")
    point = OperatingPoint(task=Task.OOD, criterion=TPRExactly(p_percent))
    tau = resolve_tau(
        np.concatenate([u_id, u_ood]),
        point,
        id_mask=np.r_[np.ones(u_id.size, bool), np.zeros(u_ood.size, bool)],
    )
    return 100.0 * float(np.mean(u_ood <= tau))


# ---------------------------------------------------------------------------
# Aggregated reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    task: str
    criterion: str
    criterion_percent: float
    coverage_base: str
    tau: float
    metric: str
    value: float
    avg_cost: float
    coverage_percent: float
    accuracy_all: float
    accuracy_accepted: float
    exit_fractions: tuple[float, ...]


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[ReportRow, ...]

    def write_csv(self, path, header_comments=()) -> None:
        rows = list(self.rows)
        n_stages = len(rows[0].exit_fractions) if rows else 0
        with open(path, "w", newline="") as fh:
            for comment in header_comments:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "task",
                    "criterion",
                    "criterion_percent",
                    "coverage_base",
                    "tau",
                    "metric",
                    "value",
                    "avg_cost",
                    "coverage_percent",
                    "accuracy_all",
                    "accuracy_accepted",
                ]
                + [f"exit_frac_{m}" for m in range(1, n_stages + 1)]
            )
            for r in rows:
                writer.writerow(
                    [
                        r.task,
                        r.criterion,
                        repr(r.criterion_percent),
                        r.coverage_base,
                        repr(r.tau),
                        r.metric,
                        repr(r.value),
                        repr(r.avg_cost),
                        repr(r.coverage_percent),
                        repr(r.accuracy_all),
                        repr(r.accuracy_accepted),
                    ]
                    + [repr(f) for f in r.exit_fractions]
                )


_CRITERION_LABEL = {RiskAtMost: "risk_at_most", CoverageExactly: "coverage_exactly", TPRExactly: "tpr_exactly"}


def report(
    trace: CascadeTrace,
    table: ScoreTable,
    points,
    beta: float = 1.0,
) -> MetricsReport:
    """One row per operating point, evaluated at that point's resolved tau."""
    if trace.final_uncertainty.shape[0] != table.n_samples:
        raise ValueError("trace and table are misaligned")
    outcome = EvalOutcome.from_trace(trace, table, beta=beta)
    id_mask = table.id_mask
    n = table.n_samples
    exit_fracs = tuple(
        float(np.count_nonzero(trace.exit_stage == m + 1)) / n for m in range(table.n_stages)
    )
    correct = trace.final_prediction == table.labels
    acc_all = float(np.mean(correct[id_mask])) if id_mask.any() else float("nan")

    rows = []
    for point in points:
        if point.tau is None:
            raise ValueError("operating point has no resolved tau")
        tau = point.tau
        accepted = outcome.uncertainty <= tau
        if point.coverage_base is CoverageBase.ID_ONLY and id_mask.any():
            cov_pop = id_mask
        else:
            cov_pop = np.ones(n, dtype=bool)
        coverage = 100.0 * float(np.mean(accepted[cov_pop]))
        acc_id_accepted = accepted & id_mask
        acc_accepted = (
            float(np.mean(correct[acc_id_accepted])) if acc_id_accepted.any() else float("nan")
        )

        crit = point.criterion
        if point.task is Task.OOD:
            metric = f"fpr@{crit.percent:g}"
            value = 100.0 * float(np.mean(outcome.uncertainty[~id_mask] <= tau)) if (~id_mask).any() else 0.0
        elif isinstance(crit, RiskAtMost):
            metric = f"cov@{crit.percent:g}"
            value = coverage
        else:
            metric = f"risk@{crit.percent:g}"
            value = selective_risk_at(outcome, tau, point.task)

        rows.append(
            ReportRow(
                task=point.task.value,
                criterion=_CRITERION_LABEL[type(crit)],
                criterion_percent=float(crit.percent),
                coverage_base=point.coverage_base.value,
                tau=float(tau),
                metric=metric,
                value=float(value),
                avg_cost=trace.avg_cost,
                coverage_percent=coverage,
                accuracy_all=acc_all,
                accuracy_accepted=acc_accepted,
                exit_fractions=exit_fracs,
            )
        )
    return MetricsReport(rows=tuple(rows))
