"""Operating-threshold resolution, percentile windows, and stream adjustment.

An operating point fixes the downstream binary decision: a task plus a
criterion (risk at most r%, coverage exactly c%, or TPR exactly p%). The
threshold tau realizing the criterion is found on held-out validation
uncertainties. Exit windows are drawn at symmetric percentile half-widths
around each exit's tau; when a side runs past the 0th or 100th percentile
it caps there and only the other side keeps expanding. At deployment the
window can be recomputed, label-free, from the percentiles of the observed
uncertainty stream (exactly in offline mode, or via a quantile sketch).

Percentile convention throughout: nearest rank on sorted values,
rank = ceil(q/100 * N). Window endpoint values count as inside the window.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .quantile import QuantileSketch, nearest_rank_index
from .uncertainty import CombineRule, ScoreKind, ScoreMethod

if TYPE_CHECKING:
    from .cascade import CascadeTrace
    from .scoretab import ScoreTable


class Task(Enum):
    SC = "sc"
    OOD = "ood"
    SCOD = "scod"


class CoverageBase(Enum):
    ID_ONLY = "id"
    ALL_SAMPLES = "all"


class WindowBase(Enum):
    VALIDATION_ID = "id"
    DEPLOYMENT_OFFLINE = "mix-offline"
    DEPLOYMENT_STREAM = "mix-stream"


@dataclass(frozen=True)
class RiskAtMost:
    percent: float


@dataclass(frozen=True)
class CoverageExactly:
    percent: float


@dataclass(frozen=True)
class TPRExactly:
    percent: float


Criterion = RiskAtMost | CoverageExactly | TPRExactly


class UnsatisfiableCriterion(Exception):
    """No threshold meets the requested criterion at any coverage > 0."""


@dataclass(frozen=True)
class OperatingPoint:
    """Task + criterion, and the resolved threshold once calibrated."""

    task: Task
    criterion: Criterion
    coverage_base: CoverageBase = CoverageBase.ID_ONLY
    tau: float | None = None

    def __post_init__(self):
        if not 0 < self.criterion.percent < 100:
            raise ValueError(f"criterion percent must be in (0, 100), got {self.criterion.percent}")
        if isinstance(self.criterion, TPRExactly) and self.task is not Task.OOD:
            raise ValueError("TPRExactly is only meaningful for the OOD task")
        if self.tau is not None and not math.isfinite(self.tau):
            raise ValueError("resolved tau must be finite")

    def with_tau(self, tau: float) -> "OperatingPoint":
        return replace(self, tau=float(tau))


def default_method(task: Task) -> ScoreMethod:
    """Score pairing used by default: MSP on the predictive distribution for
    SC/SCOD, member-mean energy for OOD detection."""
    if task is Task.OOD:
        return ScoreMethod(ScoreKind.ENERGY, CombineRule.MEMBER_MEAN)
    return ScoreMethod(ScoreKind.NEG_MSP, CombineRule.PREDICTIVE)


def nearest_rank(sorted_values: np.ndarray, q_percent: float) -> float:
    return float(sorted_values[nearest_rank_index(len(sorted_values), q_percent)])


def rank_percent(sorted_values: np.ndarray, value: float) -> float:
    """Percentile rank of ``value``: 100 * count(<= value) / N."""
    n = len(sorted_values)
    return 100.0 * float(np.searchsorted(sorted_values, value, side="right")) / n


def resolve_tau(
    uncertainties,
    point: OperatingPoint,
    *,
    losses=None,
    id_mask=None,
) -> float:
    """Resolve tau for the operating point on validation uncertainties.

    RiskAtMost scans every distinct uncertainty value (ties accepted or
    rejected together) and returns the one maximizing coverage subject to
    selective risk <= r; requires per-sample ``losses``. CoverageExactly and
    TPRExactly are nearest-rank percentiles (of the coverage-base population
    and of the ID samples respectively).
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    if u.size == 0:
        raise ValueError("empty uncertainty vector")
    crit = point.criterion

    if isinstance(crit, TPRExactly):
        if id_mask is None:
            raise ValueError("TPRExactly requires id_mask")
        ident = u[np.asarray(id_mask, dtype=bool)]
        if ident.size == 0:
            raise ValueError("no ID samples to calibrate TPR on")
        return nearest_rank(np.sort(ident), crit.percent)

    if isinstance(crit, CoverageExactly):
        pop = u
        if point.coverage_base is CoverageBase.ID_ONLY and id_mask is not None:
            pop = u[np.asarray(id_mask, dtype=bool)]
        if pop.size == 0:
            raise ValueError("empty coverage population")
        return nearest_rank(np.sort(pop), crit.percent)

    # RiskAtMost
    if losses is None:
        raise ValueError("RiskAtMost requires per-sample losses")
    loss = np.asarray(losses, dtype=np.float64)
    if loss.shape != u.shape:
        raise ValueError("losses must align with uncertainties")
    if point.coverage_base is CoverageBase.ID_ONLY and id_mask is not None:
        keep = np.asarray(id_mask, dtype=bool)
        u, loss = u[keep], loss[keep]
        if u.size == 0:
            raise ValueError("empty coverage population")
    order = np.argsort(u, kind="stable")
    u_sorted = u[order]
    cum_loss = np.cumsum(loss[order])
    counts = np.arange(1, u.size + 1, dtype=np.float64)
    risks = cum_loss / counts
    # last index of each tie group = the thresholds actually realizable
    group_end = np.flatnonzero(np.r_[u_sorted[1:] != u_sorted[:-1], True])
    feasible = group_end[risks[group_end] <= crit.percent / 100.0]
    if feasible.size == 0:
        raise UnsatisfiableCriterion(
            f"no threshold achieves risk <= {crit.percent}% at coverage > 0"
        )
    return float(u_sorted[feasible[-1]])


# ---------------------------------------------------------------------------
# Percentile windows
# ---------------------------------------------------------------------------


def window_around(values, tau: float, half_width_percent: float) -> tuple[float, float]:
    """[t1, t2] at +/- half_width percentiles around tau's rank in ``values``.

    A side running past percentile 0 or 100 caps there; the other side still
    expands by the full half-width.
    """
    if not 0 <= half_width_percent <= 50:
        raise ValueError(f"half-width must be in [0, 50], got {half_width_percent}")
    s = np.sort(np.asarray(values, dtype=np.float64))
    if s.size == 0:
        raise ValueError("empty validation vector")
    r = rank_percent(s, tau)
    q1 = max(0.0, r - half_width_percent)
    q2 = min(100.0, r + half_width_percent)
    return nearest_rank(s, q1), nearest_rank(s, q2)


@dataclass(frozen=True)
class WindowSpec:
    """Resolved per-exit windows plus the recipe that produced them."""

    half_widths: tuple[float, ...]
    base: WindowBase
    taus: tuple[float, ...]
    windows: tuple[tuple[float, float], ...]


def build_windows(
    val_uncertainties: Sequence[np.ndarray],
    taus: Sequence[float],
    half_widths,
    base: WindowBase = WindowBase.VALIDATION_ID,
) -> WindowSpec:
    """Resolve one window per exit from that exit's validation uncertainties."""
    n_exits = len(taus)
    if len(val_uncertainties) != n_exits:
        raise ValueError("need one validation vector per exit")
    if np.isscalar(half_widths):
        hw = (float(half_widths),) * n_exits
    else:
        hw = tuple(float(h) for h in half_widths)
        if len(hw) != n_exits:
            raise ValueError(f"expected {n_exits} half-widths, got {len(hw)}")
    windows = tuple(
        window_around(val_uncertainties[m], taus[m], hw[m]) for m in range(n_exits)
    )
    return WindowSpec(half_widths=hw, base=base, taus=tuple(float(t) for t in taus), windows=windows)


def refit_final_tau(
    trace: "CascadeTrace",
    table: "ScoreTable",
    point: OperatingPoint,
    beta: float = 1.0,
) -> float:
    """Re-resolve tau on the final exited uncertainties of the adaptive system."""
    from .metrics import task_losses

    losses = None
    if isinstance(point.criterion, RiskAtMost):
        losses = task_losses(trace.final_prediction, table.labels, table.ood_mask, point.task, beta)
    return resolve_tau(
        trace.final_uncertainty,
        point,
        losses=losses,
        id_mask=table.id_mask,
    )


def adjust_window_offline(stream_uncertainties, tau: float, half_width_percent: float) -> tuple[float, float]:
    """Window at +/- half_width percentiles of the deployment stream, exactly."""
    return window_around(stream_uncertainties, tau, half_width_percent)


def adjust_window_stream(
    sketch: QuantileSketch,
    tau: float,
    half_width_percent: float,
    warmup_count: int = 200,
) -> tuple[float, float]:
    """Window from a running sketch of the deployment stream (label-free)."""
    if not 0 <= half_width_percent <= 50:
        raise ValueError(f"half-width must be in [0, 50], got {half_width_percent}")
    if sketch.count < warmup_count:
        raise ValueError(
            f"insufficient observations: {sketch.count} < warmup {warmup_count}"
        )
    r = sketch.rank_percent(tau)
    q1 = max(0.0, r - half_width_percent)
    q2 = min(100.0, r + half_width_percent)
    t1 = sketch.query(q1)
    t2 = sketch.query(q2)
    return min(t1, t2), max(t1, t2)


# ---------------------------------------------------------------------------
# Policy file: plain-text key = value, consumed by the CLI
# ---------------------------------------------------------------------------


class PolicyError(Exception):
    """Malformed policy file."""


@dataclass(frozen=True)
class Policy:
    """A fully calibrated adaptive system: exit windows plus the deployed tau."""

    method: ScoreMethod
    point: OperatingPoint
    n_stages: int
    window_spec: WindowSpec
    tau_final: float
    beta: float = 1.0

    def __post_init__(self):
        if len(self.window_spec.windows) != self.n_stages - 1:
            raise PolicyError(
                f"expected {self.n_stages - 1} windows, got {len(self.window_spec.windows)}"
            )


def save_policy(policy: Policy, path) -> None:
    lines = [
        "# uqcascade policy v1",
        f"method = {policy.method.kind.value}",
        f"combine = {policy.method.combine.value}",
        f"task = {policy.point.task.value}",
        f"criterion = {_CRIT_NAMES[type(policy.point.criterion)]}",
        f"criterion_percent = {policy.point.criterion.percent!r}",
        f"coverage_base = {policy.point.coverage_base.value}",
        f"beta = {policy.beta!r}",
        f"n_stages = {policy.n_stages}",
        f"window_base = {policy.window_spec.base.value}",
        f"tau_final = {policy.tau_final!r}",
    ]
    for m, ((t1, t2), tau, hw) in enumerate(
        zip(policy.window_spec.windows, policy.window_spec.taus, policy.window_spec.half_widths),
        start=1,
    ):
        lines.append(f"tau_{m} = {tau!r}")
        lines.append(f"half_width_{m} = {hw!r}")
        lines.append(f"t1_{m} = {t1!r}")
        lines.append(f"t2_{m} = {t2!r}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


_CRIT_NAMES = {RiskAtMost: "risk_at_most", CoverageExactly: "coverage_exactly", TPRExactly: "tpr_exactly"}
_CRIT_TYPES = {v: k for k, v in _CRIT_NAMES.items()}


def load_policy(path) -> Policy:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = re.match(r"^([A-Za-z0-9_]+)\s*=\s*(.*)$", line)
        if not m:
            raise PolicyError(f"line {lineno}: expected 'key = value', got {raw!r}")
        kv[m.group(1)] = m.group(2)
    try:
        method = ScoreMethod(ScoreKind(kv["method"]), CombineRule(kv["combine"]))
        crit = _CRIT_TYPES[kv["criterion"]](float(kv["criterion_percent"]))
        point = OperatingPoint(
            task=Task(kv["task"]),
            criterion=crit,
            coverage_base=CoverageBase(kv["coverage_base"]),
            tau=float(kv["tau_final"]),
        )
        n_stages = int(kv["n_stages"])
        taus, windows, hws = [], [], []
        for m in range(1, n_stages):
            taus.append(float(kv[f"tau_{m}"]))
            hws.append(float(kv[f"half_width_{m}"]))
            windows.append((float(kv[f"t1_{m}"]), float(kv[f"t2_{m}"])))
        spec = WindowSpec(
            half_widths=tuple(hws),
            base=WindowBase(kv["window_base"]),
            taus=tuple(taus),
            windows=tuple(windows),
        )
        return Policy(
            method=method,
            point=point,
            n_stages=n_stages,
            window_spec=spec,
            tau_final=float(kv["tau_final"]),
            beta=float(kv["beta"]),
        )
    except KeyError as e:
        raise PolicyError(f"missing policy key {e.args[0]!r}") from None
    except ValueError as e:
        raise PolicyError(f"bad policy value: {e}") from None
