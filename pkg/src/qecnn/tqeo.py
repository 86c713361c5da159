"""Time-constrained scheduling of per-CTU enhancement.

Every CTU of a frame gets a level k in {0, 1, 2}: untouched, intra network,
or inter network. I frames only use k in {0, 1} and rank CTUs by the bits the
encoder spent on them; P frames rank by spatial mean absolute deviation and
pick the split (n1, n2) that maximises the modelled MSE reduction

    sum_{s=1..n2} f2(s/N) + sum_{s=n2+1..n2+n1} f1(s/N)

subject to ``n1 * t1/t2 + n2 <= (T / T_max) * N`` and ``n1 + n2 <= N``, where
``T_max = N * t2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError

PUBLISHED_RATIO = 0.394
# relative slack on budget comparisons, absorbs float error in T / T_max
_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class CostModel:
    """Per-CTU processing time of the two networks, in milliseconds."""

    t1: float = 1.536
    t2: float = 3.900

    def __post_init__(self):
        if not 0 < self.t1 < self.t2:
            raise ConfigurationError(f"need 0 < t1 < t2, got t1={self.t1}, t2={self.t2}")

    @property
    def ratio(self) -> float:
        return self.t1 / self.t2

    @classmethod
    def from_ratio(cls, ratio: float, t2: float = 3.900) -> "CostModel":
        """Cost model with a prescribed t1/t2 (e.g. the rounded 0.394)."""
        return cls(t1=ratio * t2, t2=t2)

    def t_max(self, n_ctus: int) -> float:
        return n_ctus * self.t2

    def charge(self, n1: int, n2: int) -> float:
        return n1 * self.t1 + n2 * self.t2


@dataclass(frozen=True)
class DeltaMseModel:
    """Quadratic MSE-reduction models f_k(x) = a_k x^2 - b_k x + c_k, x = rank / N."""

    qp: int
    a1: float
    b1: float
    c1: float
    a2: float
    b2: float
    c2: float

    def __post_init__(self):
        if not (self.c2 > self.c1 and self.b2 > self.b1):
            raise ConfigurationError(
                f"qp {self.qp}: expected c2 > c1 and b2 > b1 "
                f"(got c1={self.c1}, c2={self.c2}, b1={self.b1}, b2={self.b2})")

    def coefficients(self, k: int) -> tuple[float, float, float]:
        if k == 1:
            return self.a1, self.b1, self.c1
        if k == 2:
            return self.a2, self.b2, self.c2
        raise ValidationError(f"enhancement level must be 1 or 2, got {k}")

    def __call__(self, k: int, x):
        a, b, c = self.coefficients(k)
        x = np.asarray(x, dtype=np.float64)
        return a * x * x - b * x + c


# fitted on LDP-coded training sequences; only these QPs can be scheduled
GAIN_COEFFICIENTS = {
    32: DeltaMseModel(32, 0.643, 2.672, 2.061, 1.218, 4.352, 3.177),
    37: DeltaMseModel(37, 0.429, 2.841, 2.344, 1.476, 4.588, 3.265),
    42: DeltaMseModel(42, 3.693, 9.728, 6.266, 8.928, 20.54, 12.08),
    47: DeltaMseModel(47, 10.85, 22.71, 12.34, 21.64, 42.00, 21.50),
}
SCHEDULABLE_QPS = tuple(sorted(GAIN_COEFFICIENTS))


def get_model(qp: int) -> DeltaMseModel:
    try:
        return GAIN_COEFFICIENTS[qp]
    except KeyError:
        raise ConfigurationError(
            f"no MSE-reduction model for qp {qp}; supported qps are {list(SCHEDULABLE_QPS)}") from None


def delta_mse_eval(model: DeltaMseModel | int, k: int, x):
    """Predicted MSE reduction of level ``k`` at normalised rank ``x``."""
    if not isinstance(model, DeltaMseModel):
        model = get_model(model)
    xs = np.asarray(x, dtype=np.float64)
    if np.any((xs < 0) | (xs > 1)):
        raise ValidationError("normalised rank must lie in [0, 1]")
    out = model(k, xs)
    return float(out) if out.ndim == 0 else out


@dataclass
class CtuStats:
    index: int
    bits: Optional[float] = None
    mad: Optional[float] = None
    rank: Optional[int] = None
    assignment: int = 0


@dataclass
class TqeoSolution:
    n1: int
    n2: int
    assignments: np.ndarray
    predicted_gain: float
    budget_used: float
    target: float = float("nan")

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int8)
        counts = np.bincount(self.assignments, minlength=3)
        if counts[1] != self.n1 or counts[2] != self.n2:
            raise ValidationError("assignment vector disagrees with (n1, n2)")


# --------------------------------------------------------------------------
# features


def mad(ctu) -> float:
    """Mean absolute deviation of a block's pixels from the block mean."""
    values = np.asarray(ctu, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("cannot take MAD of an empty block")
    return float(np.mean(np.abs(values - values.mean())))


def rank_desc(values) -> np.ndarray:
    """1-based descending ranks; equal values keep their original order."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(-v, kind="stable")
    ranks = np.empty(v.size, dtype=np.int64)
    ranks[order] = np.arange(1, v.size + 1)
    return ranks


# --------------------------------------------------------------------------
# I frames


def i_frame_count(budget_ms: float, cost: CostModel, n_ctus: int) -> int:
    """floor(T / t1), capped at the number of CTUs."""
    if budget_ms <= 0:
        return 0
    n1 = math.floor(budget_ms / cost.t1)
    # guard against T being an exact multiple of t1 that floors one short
    if (n1 + 1) * cost.t1 <= budget_ms * (1 + _FEAS_TOL):
        n1 += 1
    while n1 > 0 and n1 * cost.t1 > budget_ms * (1 + _FEAS_TOL):
        n1 -= 1
    return min(n1, n_ctus)


def solve_i_frame(budget_ms: float, cost: CostModel, stats: Sequence[CtuStats] | Sequence[float]) -> TqeoSolution:
    """Enhance the n1 = floor(T / t1) CTUs with the most bits using the intra net.

    ``stats`` is either a list of :class:`CtuStats` with ``bits`` filled in or
    the raw per-CTU bit counts.
    """
    bits = []
    for s in stats:
        b = s.bits if isinstance(s, CtuStats) else s
        if b is None:
            raise ValidationError("I-frame scheduling needs per-CTU bit counts (ctu_bits in the sidecar)")
        bits.append(b)
    n = len(bits)
    n1 = i_frame_count(budget_ms, cost, n)
    ranks = rank_desc(bits)
    assign = np.where(ranks <= n1, 1, 0)
    if stats and isinstance(stats[0], CtuStats):
        for s, r, k in zip(stats, ranks, assign):
            s.rank, s.assignment = int(r), int(k)
    return TqeoSolution(n1=n1, n2=0, assignments=assign, predicted_gain=float("nan"),
                        budget_used=cost.charge(n1, 0), target=budget_ms)


# --------------------------------------------------------------------------
# P frames


def gain_prefix(model: DeltaMseModel, k: int, n: int) -> np.ndarray:
    """G[m] = sum_{s=1..m} f_k(s / n) for m = 0..n, via closed-form power sums."""
    a, b, c = model.coefficients(k)
    m = np.arange(n + 1, dtype=np.float64)
    s1 = m * (m + 1) / 2
    s2 = m * (m + 1) * (2 * m + 1) / 6
    return a * s2 / (n * n) - b * s1 / n + c * m


def p_frame_objective(model: DeltaMseModel, n: int, n1: int, n2: int) -> float:
    g1 = gain_prefix(model, 1, n)
    g2 = gain_prefix(model, 2, n)
    return float(g2[n2] + g1[n1 + n2] - g1[n2])


def is_feasible(n1: int, n2: int, n: int, budget_ratio: float, ratio: float) -> bool:
    limit = budget_ratio * n
    return n1 >= 0 and n2 >= 0 and n1 + n2 <= n and n1 * ratio + n2 <= limit + _FEAS_TOL * max(1.0, limit)


def _sparse_argmax(values: np.ndarray) -> list[np.ndarray]:
    """Sparse table of range arg-maxima, smallest index winning ties."""
    table = [np.arange(values.size)]
    span = 1
    while 2 * span <= values.size:
        prev = table[-1]
        left = prev[: values.size - 2 * span + 1]
        right = prev[span: span + left.size]
        table.append(np.where(values[right] > values[left], right, left))
        span *= 2
    return table


def _range_argmax(values, table, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    length = hi - lo + 1
    level = np.floor(np.log2(length)).astype(np.int64)
    # log2 of exact powers of two can land just below the integer
    level = np.where((1 << (level + 1)) <= length, level + 1, level)
    out = np.empty(lo.size, dtype=np.int64)
    for lv in np.unique(level):
        sel = level == lv
        tab = table[lv]
        a = tab[lo[sel]]
        b = tab[hi[sel] - (1 << lv) + 1]
        out[sel] = np.where(values[b] > values[a], b, a)
    return out


def _solve_p(budget_ratio: float, n: int, model: DeltaMseModel, ratio: float) -> tuple[int, int, float]:
    if n < 1:
        raise ValidationError("a frame needs at least one CTU")
    if not 0 <= budget_ratio <= 1:
        raise ValidationError(f"budget ratio must lie in [0, 1], got {budget_ratio}")
    if ratio <= 0:
        raise ValidationError("t1/t2 must be positive")
    g1 = gain_prefix(model, 1, n)
    g2 = gain_prefix(model, 2, n)
    limit = budget_ratio * n
    slack = _FEAS_TOL * max(1.0, limit)
    n2 = np.arange(0, min(n, math.floor(limit + slack)) + 1)
    n1_max = np.floor((limit + slack - n2) / ratio).astype(np.int64)
    n1_max = np.minimum(np.maximum(n1_max, 0), n - n2)
    # keep n1_max exactly on the feasible side of the float comparison
    over = n1_max * ratio + n2 > limit + slack
    n1_max = np.where(over, n1_max - 1, n1_max)
    under = ((n1_max + 1) * ratio + n2 <= limit + slack) & (n1_max + 1 <= n - n2)
    n1_max = np.where(under, n1_max + 1, n1_max)
    table = _sparse_argmax(g1)
    end = _range_argmax(g1, table, n2, n2 + n1_max)
    value = g2[n2] + g1[end] - g1[n2]
    best = int(np.argmax(value))  # first maximum: smallest n2
    return int(end[best] - n2[best]), int(n2[best]), float(value[best])


def solve_p_frame(budget_ratio: float, n: int, model: DeltaMseModel | int,
                  cost: CostModel | float = CostModel()) -> tuple[int, int]:
    """Optimal (n1, n2) for one frame of ``n`` CTUs at ``T / T_max = budget_ratio``.

    Every n2 is tried; for each, the best n1 within the remaining budget is
    found with a range-maximum query on the prefix sums of f1, so the result
    is exact. Ties go to the smallest n2, then the smallest n1.
    """
    if not isinstance(model, DeltaMseModel):
        model = get_model(model)
    ratio = cost.ratio if isinstance(cost, CostModel) else float(cost)
    n1, n2, _ = _solve_p(budget_ratio, n, model, ratio)
    return n1, n2


def assign_p_frame(mads: Sequence[float], n1: int, n2: int) -> np.ndarray:
    """Top-n2 MAD ranks get level 2, the next n1 get level 1."""
    ranks = rank_desc(mads)
    return np.where(ranks <= n2, 2, np.where(ranks <= n2 + n1, 1, 0)).astype(np.int8)


def schedule_p_frame(budget_ms: float, cost: CostModel, mads: Sequence[float],
                     model: DeltaMseModel | int, lut: Optional["Lut"] = None) -> TqeoSolution:
    if not isinstance(model, DeltaMseModel):
        model = get_model(model)
    n = len(mads)
    ratio_t = min(1.0, max(0.0, budget_ms / cost.t_max(n))) if budget_ms > 0 else 0.0
    if lut is not None:
        n1, n2, gain = lut.lookup(ratio_t)
    else:
        n1, n2, gain = _solve_p(ratio_t, n, model, cost.ratio)
    return TqeoSolution(n1=n1, n2=n2, assignments=assign_p_frame(mads, n1, n2),
                        predicted_gain=gain, budget_used=cost.charge(n1, n2), target=budget_ms)


# --------------------------------------------------------------------------
# look-up tables


@dataclass
class LutRow:
    budget_ratio: float
    n1: int
    n2: int
    predicted_gain: float


def _key(budget_ratio: float) -> int:
    return round(budget_ratio * 1e9)


@dataclass
class Lut:
    qp: int
    n_ctus: int
    ratio_t1_t2: float
    rows: list[LutRow] = field(default_factory=list)

    def __post_init__(self):
        self._index = {_key(r.budget_ratio): r for r in self.rows}

    def add(self, row: LutRow) -> None:
        self.rows.append(row)
        self._index[_key(row.budget_ratio)] = row

    def lookup(self, budget_ratio: float) -> tuple[int, int, float]:
        """(n1, n2, gain) for a tabulated ratio; unseen ratios are solved and cached."""
        row = self._index.get(_key(budget_ratio))
        if row is None:
            n1, n2, gain = _solve_p(budget_ratio, self.n_ctus, get_model(self.qp), self.ratio_t1_t2)
            row = LutRow(budget_ratio, n1, n2, gain)
            self.add(row)
        return row.n1, row.n2, row.predicted_gain

    def __getitem__(self, budget_ratio: float) -> tuple[int, int]:
        row = self._index[_key(budget_ratio)]
        return row.n1, row.n2

    def to_dict(self) -> dict:
        return {
            "qp": self.qp,
            "n_ctus": self.n_ctus,
            "ratio_t1_t2": self.ratio_t1_t2,
            "rows": [
                {"budget_ratio": r.budget_ratio, "n1": r.n1, "n2": r.n2, "predicted_gain": r.predicted_gain}
                for r in self.rows
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "Lut":
        try:
            rows = [LutRow(float(r["budget_ratio"]), int(r["n1"]), int(r["n2"]), float(r["predicted_gain"]))
                    for r in data["rows"]]
            return cls(int(data["qp"]), int(data["n_ctus"]), float(data["ratio_t1_t2"]), rows)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed LUT document: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "Lut":
        return cls.from_dict(json.loads(text))


DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def build_lut(qp: int, n_ctus: int, budget_ratios: Iterable[float] = DEFAULT_RATIOS,
              cost: CostModel | float = CostModel()) -> Lut:
    model = get_model(qp)
    ratio = cost.ratio if isinstance(cost, CostModel) else float(cost)
    lut = Lut(qp, n_ctus, ratio)
    for b in budget_ratios:
        n1, n2, gain = _solve_p(float(b), n_ctus, model, ratio)
        lut.add(LutRow(float(b), n1, n2, gain))
    return lut
