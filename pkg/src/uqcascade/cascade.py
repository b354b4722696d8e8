"""Early-exit cascade execution over a score table.

Each sample walks the stages in order. After stage l < M its prefix
uncertainty is checked against that exit's rule: a single threshold fires
on U < t, a window fires when U falls outside [t1, t2] (endpoint values
count as inside). A firing rule terminates the sample at stage l with the
prefix's uncertainty and prediction; otherwise it pays for the next stage.
Stage M always terminates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .calibrate import WindowSpec, build_windows
from .scoretab import ScoreTable
from .uncertainty import PrefixOutput, ScoreMethod, prefix_evaluate


@dataclass(frozen=True)
class SingleThreshold:
    """Exit early iff U < t (strict)."""

    t: float


@dataclass(frozen=True)
class Window:
    """Exit early iff U outside [t1, t2]; inclusive membership."""

    t1: float
    t2: float

    def __post_init__(self):
        if math.isnan(self.t1) or math.isnan(self.t2):
            raise ValueError("window bounds must not be NaN")
        if self.t1 > self.t2:
            raise ValueError(f"window requires t1 <= t2, got [{self.t1}, {self.t2}]")


ExitRule = SingleThreshold | Window


@dataclass(frozen=True)
class CascadePolicy:
    """One exit rule per non-final stage, all sharing one score method."""

    rules: tuple[ExitRule, ...]
    method: ScoreMethod

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        for r in self.rules:
            if not isinstance(r, (SingleThreshold, Window)):
                raise TypeError(f"not an exit rule: {r!r}")


def all_pass_policy(method: ScoreMethod, n_stages: int) -> CascadePolicy:
    """Every sample reaches the final stage (full ensemble)."""
    return CascadePolicy(
        rules=tuple(Window(-math.inf, math.inf) for _ in range(n_stages - 1)),
        method=method,
    )


def no_pass_policy(method: ScoreMethod, n_stages: int) -> CascadePolicy:
    """Every sample exits at stage 1."""
    return CascadePolicy(
        rules=tuple(SingleThreshold(math.inf) for _ in range(n_stages - 1)),
        method=method,
    )


@dataclass(frozen=True)
class CascadeTrace:
    """Per-sample exit bookkeeping for one cascade run.

    exit_stage is 1-based. per_sample_cost[n] is the running sum of
    stage_cost up to the exit stage; avg_cost aggregates it via the exit
    histogram: sum_m stage_cost[m] * fraction(exit_stage >= m).
    """

    exit_stage: np.ndarray
    final_uncertainty: np.ndarray
    final_prediction: np.ndarray
    per_sample_cost: np.ndarray
    avg_cost: float


def _rule_fires(rule: ExitRule, u: np.ndarray) -> np.ndarray:
    if isinstance(rule, SingleThreshold):
        return u < rule.t
    return (u < rule.t1) | (u > rule.t2)


def run_cascade(table: ScoreTable, policy: CascadePolicy) -> CascadeTrace:
    m_stages = table.n_stages
    if len(policy.rules) != m_stages - 1:
        raise ValueError(
            f"policy has {len(policy.rules)} rules, table needs {m_stages - 1}"
        )
    n = table.n_samples
    prefixes: list[PrefixOutput] = [
        prefix_evaluate(table, policy.method, l) for l in range(1, m_stages + 1)
    ]

    exit_stage = np.full(n, m_stages, dtype=np.int32)
    undecided = np.ones(n, dtype=bool)
    for l in range(1, m_stages):
        fires = _rule_fires(policy.rules[l - 1], prefixes[l - 1].uncertainty)
        newly = undecided & fires
        exit_stage[newly] = l
        undecided &= ~fires

    final_u = np.empty(n, dtype=np.float64)
    final_pred = np.empty(n, dtype=np.int64)
    for l in range(1, m_stages + 1):
        at_l = exit_stage == l
        final_u[at_l] = prefixes[l - 1].uncertainty[at_l]
        final_pred[at_l] = prefixes[l - 1].prediction[at_l]

    cum_cost = np.cumsum(table.stage_cost)
    per_sample_cost = cum_cost[exit_stage - 1]
    avg = 0.0
    for m in range(m_stages):
        reached = int(np.count_nonzero(exit_stage >= m + 1))
        avg += float(table.stage_cost[m]) * (reached / n)

    return CascadeTrace(
        exit_stage=exit_stage,
        final_uncertainty=final_u,
        final_prediction=final_pred,
        per_sample_cost=per_sample_cost,
        avg_cost=avg,
    )


def policy_from_windows(spec: WindowSpec, method: ScoreMethod) -> CascadePolicy:
    return CascadePolicy(
        rules=tuple(Window(t1, t2) for t1, t2 in spec.windows), method=method
    )


def sweep_policy(
    table: ScoreTable,
    base: CascadePolicy,
    widths: Sequence,
    val_uncertainties: Sequence[np.ndarray],
    taus: Sequence[float],
) -> list[CascadeTrace]:
    """One cascade trace per half-width setting, in the given order.

    Each entry of ``widths`` is either a scalar half-width broadcast to all
    exits or a per-exit sequence. Windows are re-resolved per entry from the
    validation uncertainties and taus, then run with the base policy's method.
    """
    traces = []
    for width in widths:
        spec = build_windows(val_uncertainties, taus, width)
        traces.append(run_cascade(table, replace(base, rules=policy_from_windows(spec, base.method).rules)))
    return traces
