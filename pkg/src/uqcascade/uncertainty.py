"""Uncertainty scores per stage and ensemble combination over stage prefixes.

Two scores are supported: negative maximum softmax probability and the
negative log-sum-exp energy of the logits. A prefix of stages is combined
either by scoring the mean of the member softmax distributions or by
averaging the per-member scores. Higher score = more uncertain.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .scoretab import ScoreTable


class ScoreKind(Enum):
    NEG_MSP = "msp"
    ENERGY = "energy"


class CombineRule(Enum):
    PREDICTIVE = "pred"  # score the prefix-mean softmax distribution
    MEMBER_MEAN = "member"  # average the per-member scores


@dataclass(frozen=True)
class ScoreMethod:
    """Uncertainty score plus the rule combining it across ensemble members.

    Energy cannot be combined via the predictive distribution: it depends on
    the unnormalized logits, which the mean softmax does not determine.
    """

    kind: ScoreKind
    combine: CombineRule

    def __post_init__(self):
        if self.kind is ScoreKind.ENERGY and self.combine is CombineRule.PREDICTIVE:
            raise ValueError(
                "energy is not a function of the predictive distribution; "
                "use MEMBER_MEAN combination"
            )


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction), computed in float64."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def neg_msp(probs, axis: int = -1) -> np.ndarray:
    """Negative maximum softmax probability; in [-1, -1/K]."""
    return -np.max(np.asarray(probs, dtype=np.float64), axis=axis)


def energy(logits, axis: int = -1) -> np.ndarray:
    """Negative log-sum-exp of the logits, via max-subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    lse = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return -lse


@dataclass(frozen=True)
class PrefixOutput:
    """Per-sample uncertainty and prediction of the first ``prefix_len`` stages."""

    uncertainty: np.ndarray
    prediction: np.ndarray
    prefix_len: int


def prefix_evaluate(table: ScoreTable, method: ScoreMethod, prefix_len: int) -> PrefixOutput:
    """Evaluate the ensemble prefix of stages 1..prefix_len.

    The prediction is always the argmax of the prefix-mean softmax (ties go
    to the lowest class index). The uncertainty follows ``method``.
    """
    if not 1 <= prefix_len <= table.n_stages:
        raise ValueError(f"prefix_len must be in [1, {table.n_stages}], got {prefix_len}")
    logits = table.logits[:prefix_len].astype(np.float64)
    member_probs = softmax(logits, axis=-1)  # [l, N, K]
    mean_probs = member_probs.mean(axis=0)
    prediction = np.argmax(mean_probs, axis=-1)

    if method.combine is CombineRule.PREDICTIVE:
        u = neg_msp(mean_probs)
    elif method.kind is ScoreKind.NEG_MSP:
        u = neg_msp(member_probs).mean(axis=0)
    else:
        u = energy(logits).mean(axis=0)
    return PrefixOutput(uncertainty=u, prediction=prediction, prefix_len=prefix_len)
