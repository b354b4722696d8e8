"""Deterministic rank-error-bounded streaming quantile summary.

Classic Greenwald-Khanna structure: a sorted list of (value, g, delta)
tuples where g is the gap in minimum rank to the predecessor and delta the
rank uncertainty. Any quantile query is answered within eps * count ranks.
Insertion order fully determines the state, so results are reproducible.
"""

from __future__ import annotations

import math
from bisect import bisect_right


def nearest_rank_index(n: int, q_percent: float) -> int:
    """0-based index of the nearest-rank q-th percentile among n sorted values.

    rank = ceil(q/100 * n), clamped to [1, n]. Targets within floating-point
    noise of an integer snap to it, so e.g. q=20, n=10 is rank 2 not 3.
    """
    if n < 1:
        raise ValueError("need at least one value")
    target = q_percent * n / 100.0
    nearest = round(target)
    if abs(target - nearest) <= 1e-9 * max(1.0, abs(target)):
        rank = int(nearest)
    else:
        rank = math.ceil(target)
    return min(max(rank, 1), n) - 1


class QuantileSketch:
    """Single-writer streaming quantile summary with rank error <= eps * count.

    The structure is maintained at eps/2 internally so that one rank
    estimate composed with one quantile query (the window-adjustment path)
    still lands within the declared eps * count.
    """

    def __init__(self, eps: float = 0.005):
        if not 0 < eps < 0.5:
            raise ValueError(f"eps must be in (0, 0.5), got {eps}")
        self.eps = eps
        self._gk_eps = eps / 2.0
        self._values: list[float] = []
        self._g: list[int] = []
        self._delta: list[int] = []
        self._count = 0
        self._since_compress = 0
        self._compress_period = max(1, int(1.0 / (2.0 * self._gk_eps)))

    @property
    def count(self) -> int:
        return self._count

    def insert(self, value: float) -> None:
        v = float(value)
        if math.isnan(v):
            raise ValueError("cannot insert NaN")
        i = bisect_right(self._values, v)
        if i == 0 or i == len(self._values) or self._count == 0:
            delta = 0
        else:
            delta = max(0, int(2 * self._gk_eps * self._count) - 1)
        self._values.insert(i, v)
        self._g.insert(i, 1)
        self._delta.insert(i, delta)
        self._count += 1
        self._since_compress += 1
        if self._since_compress >= self._compress_period:
            self._compress()

    def extend(self, values) -> None:
        for v in values:
            self.insert(v)

    def _compress(self) -> None:
        self._since_compress = 0
        threshold = int(2 * self._gk_eps * self._count)
        i = len(self._values) - 2
        while i >= 1:  # never merge away the recorded minimum
            if self._g[i] + self._g[i + 1] + self._delta[i + 1] <= threshold:
                self._g[i + 1] += self._g[i]
                del self._values[i], self._g[i], self._delta[i]
            i -= 1

    def query(self, q_percent: float) -> float:
        """Value whose rank is within eps * count of the q-th percentile rank."""
        if self._count == 0:
            raise ValueError("sketch is empty")
        target = nearest_rank_index(self._count, q_percent) + 1
        allowance = self._gk_eps * self._count
        rmin = 0
        for i in range(len(self._values)):
            rmin += self._g[i]
            if rmin + self._delta[i] > target + allowance:
                return self._values[max(0, i - 1)]
        return self._values[-1]

    def rank_percent(self, value: float) -> float:
        """Estimated percentile rank of ``value`` in the observed stream.

        Midpoint of the rank interval [rmin(i), rmax(i+1) - 1] where tuple i
        is the last one <= value; the interval width is bounded by the GK
        invariant, so the error is at most eps * count.
        """
        if self._count == 0:
            raise ValueError("sketch is empty")
        idx = bisect_right(self._values, float(value)) - 1
        if idx < 0:
            return 0.0
        lower = sum(self._g[: idx + 1])
        if idx + 1 < len(self._values):
            upper = lower + self._g[idx + 1] + self._delta[idx + 1] - 1
        else:
            upper = self._count
        est = min((lower + upper) / 2.0, self._count)
        return 100.0 * est / self._count

    def merge(self, other: "QuantileSketch") -> "QuantileSketch":
        """Combine two sketches; the result is bounded by eps_a + eps_b.

        Tuples from each side inherit the other side's worst-case rank
        uncertainty, which keeps the degraded bound sound.
        """
        out = QuantileSketch(eps=min(0.499, self.eps + other.eps))
        pad_self = int(2 * other._gk_eps * other._count)
        pad_other = int(2 * self._gk_eps * self._count)
        items = [
            (v, g, d + pad_self)
            for v, g, d in zip(self._values, self._g, self._delta)
        ] + [
            (v, g, d + pad_other)
            for v, g, d in zip(other._values, other._g, other._delta)
        ]
        items.sort(key=lambda t: t[0])
        out._values = [t[0] for t in items]
        out._g = [t[1] for t in items]
        out._delta = [t[2] for t in items]
        out._count = self._count + other._count
        out._compress()
        return out
