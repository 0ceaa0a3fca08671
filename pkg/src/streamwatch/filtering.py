"""Bound-based pruning of exact divergence computations.

Dimensions are bucketed by value into ``n`` dyadic groups (``[0.5, 1]``,
``[1/4, 1/2)``, ...).  A sketch keeps per-group ``(min, max, count)`` and the
group bound turns it into an upper bound on the JS divergence.  Together with
the L1 bounds and the dominant-dimension trigger this drives ``ados_filter``,
which labels a segment without computing its exact divergence whenever a
bound already settles the decision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .scoring import LOG_FLOOR, ThresholdConfig, js_divergence, js_terms

VARIANTS = ("corner", "min-form", "max-form")

# (T1, T2, N_sg) reported per evaluation stream; T1 > T2 in every one of them
ADOS_PRESETS = {
    "inf": (1.6, 0.5, 10),
    "spe": (1.8, 0.45, 11),
    "ted": (1.8, 0.5, 11),
    "twi": (1.6, 0.5, 12),
}


# -- partition ---------------------------------------------------------------


@dataclass(frozen=True)
class DimensionPartition:
    """Recursive halving of ``[0, 1]`` into ``n`` groups.

    Group 0 is ``[0.5, 1]``, group ``j`` is ``[2^-(j+1), 2^-j)`` and the last
    group collects everything below ``2^-(n-1)``.
    """

    n: int = 20
    use_lookup: bool = False
    _table: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"partition needs at least 2 groups, got {self.n}")
        if self.use_lookup and self._table is None:
            object.__setattr__(self, "_table", _lookup_table(self.n))

    def bounds(self, j: int) -> tuple[float, float]:
        """``(lo, hi)`` of group ``j``; only group 0 is closed on the right."""
        if j == 0:
            return 0.5, 1.0
        if j == self.n - 1:
            return 0.0, 2.0 ** -(self.n - 1)
        return 2.0 ** -(j + 1), 2.0**-j

    def group_ids(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if v.size and not (v.min() >= 0.0 and v.max() <= 1.0):
            raise ValidationError("partition values must lie in [0, 1]")
        if self.use_lookup:
            return self._table[np.floor(v * 2.0 ** (self.n - 1)).astype(np.int64)]
        return _closed_form(v, self.n)

    def group_id(self, value: float) -> int:
        return int(self.group_ids(np.array([value]))[0])


def _closed_form(v: np.ndarray, n: int) -> np.ndarray:
    # v = m * 2**e with m in [0.5, 1): v in [2^-(j+1), 2^-j) has e = -j
    _, e = np.frexp(v)
    g = np.maximum(np.minimum(-e, n - 1), 0).astype(np.int64)
    g[v == 0.0] = n - 1
    return g


def _lookup_table(n: int) -> np.ndarray:
    # key = floor(v * 2^(n-1)); a key with bit length b belongs to group n-1-b
    table = np.empty(2 ** (n - 1) + 1, dtype=np.int64)
    table[0] = n - 1
    for b in range(1, n + 1):
        table[2 ** (b - 1) : 2**b] = max(n - 1 - b, 0)
    return table


# -- sketches ----------------------------------------------------------------


@dataclass(frozen=True)
class AdgSketch:
    n: int
    assign: np.ndarray  # group id per dimension
    lo: np.ndarray  # per-group min (0 for empty groups)
    hi: np.ndarray  # per-group max
    count: np.ndarray
    sparse_exact: dict[int, np.ndarray]

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise ValidationError("sketch min exceeds max")


def adg_sketch(values, partition: DimensionPartition, n_sg: int = 0, assign=None) -> AdgSketch:
    """Per-group ``(min, max, count)`` of ``values``.

    ``assign`` fixes the dimension-to-group map; by default it is derived from
    ``values`` themselves.  The ``n_sg`` occupied groups with the fewest
    members (lower id first on ties) also keep their exact values.
    """
    v = np.asarray(values, dtype=float)
    if assign is None:
        assign = partition.group_ids(v)
    assign = np.asarray(assign, dtype=np.int64)
    if assign.shape != v.shape:
        raise ConfigError("group assignment does not match the feature length")
    n = partition.n
    member = assign == np.arange(n)[:, None]
    count = member.sum(axis=1)
    empty = count == 0
    lo = np.where(member, v, np.inf).min(axis=1)
    hi = np.where(member, v, -np.inf).max(axis=1)
    lo[empty] = 0.0
    hi[empty] = 0.0
    sparse = {}
    if n_sg > 0:
        occupied = np.flatnonzero(~empty)
        order = occupied[np.lexsort((occupied, count[occupied]))]
        for g in order[:n_sg]:
            sparse[int(g)] = v[assign == g]
    return AdgSketch(n, assign, lo, hi, count, sparse)


def _js_point(a, b):
    """Scalar JS contribution of one dimension, vectorized over arrays."""
    return js_terms(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def re_i_group_bound(sk_f: AdgSketch, sk_fh: AdgSketch, variant: str = "corner", sk_mid: AdgSketch | None = None) -> float:
    """Group-level upper bound on the JS divergence between two features.

    ``corner``: every dimension of group ``g`` has ``f`` in ``[lo, hi]`` and
    ``f_hat`` in ``[lo', hi']``; the per-dimension JS term is jointly convex,
    so it peaks at one of the four box corners and ``m_g`` times that peak
    bounds the group's contribution.

    ``min-form`` / ``max-form``: ``(m_g/2) log(max(hi, hi') * X / (M_lo * M_hi))``
    with ``X = min(lo, lo')`` or ``max(lo, lo')`` and ``M`` the group range of
    the midpoint ``(f + f_hat)/2`` (from ``sk_mid`` when given, else estimated
    from the two sketches).  Neither is a valid bound in general; they are
    kept for comparison runs.

    Groups held exactly in ``sk_f.sparse_exact`` contribute their exact sum.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown bound variant {variant!r}")
    if sk_f.n != sk_fh.n or not np.array_equal(sk_f.assign, sk_fh.assign):
        raise ConfigError("sketches were built over different partitions or group assignments")
    occupied = sk_f.count > 0
    m = sk_f.count.astype(float)
    if variant == "corner":
        corners = np.stack(
            [
                _js_point(sk_f.lo, sk_fh.lo),
                _js_point(sk_f.lo, sk_fh.hi),
                _js_point(sk_f.hi, sk_fh.lo),
                _js_point(sk_f.hi, sk_fh.hi),
            ]
        )
        per_group = m * corners.max(axis=0)
    else:
        if sk_mid is not None:
            m_lo, m_hi = sk_mid.lo, sk_mid.hi
        else:
            m_lo = 0.5 * (sk_f.lo + sk_fh.lo)
            m_hi = 0.5 * (sk_f.hi + sk_fh.hi)
        x = np.minimum(sk_f.lo, sk_fh.lo) if variant == "min-form" else np.maximum(sk_f.lo, sk_fh.lo)
        top = np.maximum(sk_f.hi, sk_fh.hi)
        with np.errstate(divide="ignore"):
            per_group = 0.5 * m * np.log(
                (np.maximum(top, LOG_FLOOR) * np.maximum(x, LOG_FLOOR)) / (np.maximum(m_lo, LOG_FLOOR) * np.maximum(m_hi, LOG_FLOOR))
            )
    per_group = np.where(occupied, per_group, 0.0)
    for g, vals in sk_f.sparse_exact.items():
        per_group[g] = float(js_terms(vals, _sparse_partner(sk_f, sk_fh, g)).sum())
    return float(per_group.sum())


def _sparse_partner(sk_f: AdgSketch, sk_fh: AdgSketch, g: int) -> np.ndarray:
    if g not in sk_fh.sparse_exact:
        raise ConfigError(f"group {g} is exact in one sketch only")
    return sk_fh.sparse_exact[g]


def group_bound(f, f_hat, partition: DimensionPartition, n_sg: int = 0, variant: str = "corner") -> float:
    """Sketch both features on ``f``'s group assignment and bound their divergence."""
    f = np.asarray(f, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    if variant == "corner":
        return _corner_bound(f, f_hat, partition, n_sg)
    sk_f = adg_sketch(f, partition, n_sg)
    sk_fh = adg_sketch(f_hat, partition, n_sg, assign=sk_f.assign)
    sk_mid = adg_sketch(0.5 * (f + f_hat), partition, 0, assign=sk_f.assign)
    return re_i_group_bound(sk_f, sk_fh, variant, sk_mid)


def _corner_bound(f: np.ndarray, f_hat: np.ndarray, partition: DimensionPartition, n_sg: int) -> float:
    # same value as sketching both sides and calling re_i_group_bound, in fewer array passes
    n = partition.n
    member = partition.group_ids(f) == np.arange(n)[:, None]
    count = member.sum(axis=1)
    pair = np.stack([f, f_hat])[:, None, :]
    lo = np.where(member, pair, np.inf).min(axis=2)
    hi = np.where(member, pair, -np.inf).max(axis=2)
    empty = count == 0
    lo[:, empty] = 0.0
    hi[:, empty] = 0.0
    a = np.concatenate([lo[0], lo[0], hi[0], hi[0]])
    b = np.concatenate([lo[1], hi[1], lo[1], hi[1]])
    per_group = count * js_terms(a, b).reshape(4, n).max(axis=0)
    if n_sg > 0:
        occupied = np.flatnonzero(~empty)
        sel = occupied[np.lexsort((occupied, count[occupied]))][:n_sg]
        per_group[sel] = 0.0
        dims = member[sel].any(axis=0)
        return float(per_group.sum() + js_terms(f[dims], f_hat[dims]).sum())
    return float(per_group.sum())


# -- L1 bounds and trigger ---------------------------------------------------


def js_l1_bounds(f, f_hat) -> tuple[float, float]:
    """``(L1^2 / 8, L1 / 2)``, which sandwich the JS divergence in nats."""
    l1 = float(np.abs(np.asarray(f, dtype=float) - np.asarray(f_hat, dtype=float)).sum())
    return 0.125 * l1 * l1, 0.5 * l1


def t_func(f, f_hat) -> float:
    """Reconstruction gap on ``f``'s dominant dimension (lowest index on ties)."""
    f = np.asarray(f, dtype=float)
    i = int(np.argmax(f))
    return abs(float(f[i]) - float(np.asarray(f_hat, dtype=float)[i]))


# -- detection loop ----------------------------------------------------------


@dataclass(frozen=True)
class AdosConfig:
    """Trigger window ``[t1, t2]`` for the L1 bounds and group-bound settings."""

    t1: float = 0.0
    t2: float = 1.0
    bound_variant: str = "corner"
    strict_paper_mode: bool = False
    n_groups: int = 20
    n_sg: int = 2
    use_lookup: bool = False
    allow_empty_window: bool = False

    def validate(self) -> None:
        if self.bound_variant not in VARIANTS:
            raise ConfigError(f"unknown bound variant {self.bound_variant!r}")
        if self.t1 > self.t2 and not self.allow_empty_window:
            raise ConfigError(f"trigger window needs t1 <= t2, got t1={self.t1}, t2={self.t2}")
        if not 0 <= self.n_sg <= self.n_groups:
            raise ConfigError(f"n_sg={self.n_sg} outside [0, {self.n_groups}]")

    @classmethod
    def preset(cls, name: str, **overrides) -> "AdosConfig":
        """Reported per-stream values.  They have ``t1 > t2``, so the L1 window
        is empty; pass ``allow_empty_window=True`` to run them anyway."""
        if name not in ADOS_PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(ADOS_PRESETS)}")
        t1, t2, n_sg = ADOS_PRESETS[name]
        cfg = cls(t1=t1, t2=t2, n_sg=n_sg, **overrides)
        cfg.validate()
        return cfg


PATH_CODES = ("L1_normal", "L1_anomaly", "group_pruned_normal", "exact")


@dataclass
class FilterDecision:
    """How one segment was resolved and the bounds computed on the way.

    ``l1_skipped`` marks segments whose trigger value fell outside the window,
    so the L1 bounds were never evaluated; ``None`` marks values that were not
    computed.
    """

    segment_id: int
    path: str
    anomaly: bool
    l1_skipped: bool
    t_f: float
    js_min: float | None = None
    js_max: float | None = None
    group_bound: float | None = None
    re_i: float | None = None
    re_a: float = 0.0


@dataclass
class AdosResult:
    """Column-wise ADOS output; NaN marks values that were not computed."""

    segment_ids: np.ndarray
    path: np.ndarray  # index into PATH_CODES
    anomaly: np.ndarray
    l1_skipped: np.ndarray
    t_f: np.ndarray
    js_min: np.ndarray
    js_max: np.ndarray
    group_bound: np.ndarray
    re_i: np.ndarray
    re_a: np.ndarray

    def __len__(self) -> int:
        return int(self.path.size)

    @property
    def paths(self) -> list[str]:
        return [PATH_CODES[c] for c in self.path]

    @property
    def exact_calls(self) -> int:
        return int((self.path == PATH_CODES.index("exact")).sum())

    def decisions(self) -> list[FilterDecision]:
        def opt(x):
            return None if math.isnan(x) else float(x)

        return [
            FilterDecision(
                int(self.segment_ids[j]),
                PATH_CODES[self.path[j]],
                bool(self.anomaly[j]),
                bool(self.l1_skipped[j]),
                float(self.t_f[j]),
                opt(self.js_min[j]),
                opt(self.js_max[j]),
                opt(self.group_bound[j]),
                opt(self.re_i[j]),
                float(self.re_a[j]),
            )
            for j in range(len(self))
        ]


def _check_thresholds(thresholds: ThresholdConfig, strict: bool) -> None:
    thresholds.validate()
    if not strict and not (thresholds.normal <= thresholds.tau <= thresholds.anomaly):
        raise ConfigError(
            f"composite pruning is lossless only for T_n <= tau <= T_a "
            f"(got {thresholds.normal}, {thresholds.tau}, {thresholds.anomaly})"
        )


def t_func_rows(F: np.ndarray, F_hat: np.ndarray) -> np.ndarray:
    rows = np.arange(F.shape[0])
    i = np.argmax(F, axis=1)
    return np.abs(F[rows, i] - F_hat[rows, i])


def corner_bound_rows(F: np.ndarray, F_hat: np.ndarray, partition: DimensionPartition, n_sg: int = 0) -> np.ndarray:
    """Row-wise ``group_bound(..., variant="corner")``.

    Sorting a row by ``f`` makes every group a contiguous run, so group
    extrema and counts come from segmented reductions over the flattened
    batch instead of a dense group-by-dimension mask.
    """
    B, d = F.shape
    if B == 0:
        return np.zeros(0)
    n = partition.n
    order = np.argsort(-F, axis=1, kind="stable")
    f = np.take_along_axis(F, order, axis=1).ravel()
    fh = np.take_along_axis(F_hat, order, axis=1).ravel()
    gid = partition.group_ids(f)
    row = np.repeat(np.arange(B), d)
    key = row * n + gid  # nondecreasing along the flattened batch
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    count = np.diff(np.r_[starts, f.size])
    seg_row = row[starts]
    # descending sort: the first element of a run is its max, the last its min
    hi_f = f[starts]
    lo_f = f[starts + count - 1]
    lo_h = np.minimum.reduceat(fh, starts)
    hi_h = np.maximum.reduceat(fh, starts)
    corner = np.maximum(
        np.maximum(js_terms(lo_f, lo_h), js_terms(lo_f, hi_h)),
        np.maximum(js_terms(hi_f, lo_h), js_terms(hi_f, hi_h)),
    )
    per_seg = count * corner
    if n_sg > 0:
        # rank runs within each row by (count, group id)
        o = np.lexsort((gid[starts], count, seg_row))
        first = np.r_[0, np.flatnonzero(seg_row[o][1:] != seg_row[o][:-1]) + 1]
        rank = np.arange(o.size) - np.repeat(first, np.diff(np.r_[first, o.size]))
        exact = np.zeros(starts.size, dtype=bool)
        exact[o[rank < n_sg]] = True
        elem_exact = np.repeat(exact, count)
        terms = np.where(elem_exact, js_terms(f, fh), 0.0)
        per_seg = np.where(exact, np.add.reduceat(terms, starts), per_seg)
    return np.bincount(seg_row, weights=per_seg, minlength=B)


def ados_filter(
    F: np.ndarray,
    F_hat: np.ndarray,
    re_a_values: np.ndarray,
    omega: float,
    thresholds: ThresholdConfig | None,
    ados: AdosConfig,
    segment_ids: Sequence[int] | None = None,
) -> AdosResult:
    """Resolve each segment by the cheapest bound that settles it.

    Per segment: if ``t1 <= tF <= t2`` the L1 bounds are tried first
    (normal if the upper one is below ``T_n``, anomaly if the lower one is
    above ``T_a``); otherwise, or if they do not settle it, the group bound
    can clear it as normal; the rest get the exact divergence.

    Composite mode compares ``omega * (bound on re_i) + (1 - omega) * re_a``
    with ``T_n``/``T_a`` and decides the exact path by ``tau``, which gives
    the same labels as exhaustive scoring whenever ``T_n <= tau <= T_a``.
    Strict mode applies the thresholds to ``re_i`` alone and decides the
    exact path by ``T_a``.

    Segments are independent once the reconstructions exist, so each stage
    runs over all still-open segments at once.
    """
    if thresholds is None:
        raise ConfigError("ADOS needs configured thresholds")
    ados.validate()
    strict = ados.strict_paper_mode
    _check_thresholds(thresholds, strict)
    F = np.asarray(F, dtype=float)
    F_hat = np.asarray(F_hat, dtype=float)
    ra = np.asarray(re_a_values, dtype=float)
    if F.ndim != 2 or F.shape != F_hat.shape or F.shape[:1] != ra.shape:
        raise ValidationError("feature, reconstruction and re_a arrays disagree in shape")
    B = F.shape[0]
    ids = np.arange(B) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
    t_n, t_a, tau = thresholds.normal, thresholds.anomaly, thresholds.tau
    w_i, w_a = (1.0, 0.0) if strict else (omega, 1.0 - omega)
    base = w_a * ra

    nan = np.full(B, np.nan)
    res = AdosResult(
        ids, np.full(B, 3, dtype=np.int64), np.zeros(B, dtype=bool), np.ones(B, dtype=bool),
        nan, nan.copy(), nan.copy(), nan.copy(), nan.copy(), ra,
    )
    if B == 0:
        return res
    res.t_f = t_func_rows(F, F_hat)

    trig = np.flatnonzero((res.t_f >= ados.t1) & (res.t_f <= ados.t2))
    res.l1_skipped[trig] = False
    l1 = np.abs(F[trig] - F_hat[trig]).sum(axis=1)
    res.js_min[trig] = 0.125 * l1 * l1
    res.js_max[trig] = 0.5 * l1
    low = trig[w_i * res.js_max[trig] + base[trig] < t_n]
    high = np.setdiff1d(trig[w_i * res.js_min[trig] + base[trig] > t_a], low)
    res.path[low] = 0
    res.path[high] = 1
    res.anomaly[high] = True

    rest = np.flatnonzero(res.path == 3)
    part = DimensionPartition(ados.n_groups, ados.use_lookup)
    if ados.bound_variant == "corner":
        gb = corner_bound_rows(F[rest], F_hat[rest], part, ados.n_sg)
    else:
        gb = np.array([group_bound(F[j], F_hat[j], part, ados.n_sg, ados.bound_variant) for j in rest])
    res.group_bound[rest] = gb
    pruned = rest[w_i * gb + base[rest] <= t_n]
    res.path[pruned] = 2

    rest = np.flatnonzero(res.path == 3)
    res.re_i[rest] = js_divergence(F[rest], F_hat[rest])
    score = w_i * res.re_i[rest] + base[rest]
    res.anomaly[rest] = score > (t_a if strict else tau)
    return res


def exhaustive_labels(F, F_hat, re_a_values, omega: float, tau: float) -> np.ndarray:
    """Reference labels: exact ``re_ia > tau`` for every segment."""
    ri = js_divergence(np.asarray(F, dtype=float), np.asarray(F_hat, dtype=float))
    return (omega * ri + (1.0 - omega) * np.asarray(re_a_values, dtype=float) > tau).astype(int)


def calibrate_triggers(
    F, F_hat, re_a_values, omega: float, thresholds: ThresholdConfig, l1_cost: float = 0.2
) -> tuple[float, float]:
    """Pick the trigger window ``[t1, t2]`` that maximizes expected savings.

    With the L1 bounds always on, a segment either gets resolved by them
    (saving a group bound and an exact divergence, cost 1) or not (wasting an
    L1 computation, cost ``l1_cost``).  The window over ``tF`` with the best
    net saving is returned; ``(1, 0)`` means the L1 bounds never pay off.
    """
    F = np.asarray(F, dtype=float)
    F_hat = np.asarray(F_hat, dtype=float)
    ra = np.asarray(re_a_values, dtype=float)
    l1 = np.abs(F - F_hat).sum(axis=1)
    base = (1.0 - omega) * ra
    resolved = (omega * 0.5 * l1 + base < thresholds.normal) | (omega * 0.125 * l1 * l1 + base > thresholds.anomaly)
    tf = np.abs(F - F_hat)[np.arange(F.shape[0]), np.argmax(F, axis=1)]
    order = np.argsort(tf, kind="mergesort")
    gain = np.where(resolved[order], 1.0, -l1_cost)
    # best contiguous run of sorted tF values (maximum subarray)
    best, best_lo, best_hi = 0.0, None, None
    run, run_lo = 0.0, 0
    for k, g in enumerate(gain):
        if run <= 0.0:
            run, run_lo = 0.0, k
        run += g
        if run > best:
            best, best_lo, best_hi = run, run_lo, k
    if best_lo is None:
        return 1.0, 0.0
    return float(tf[order[best_lo]]), float(tf[order[best_hi]])
