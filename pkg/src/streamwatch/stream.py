"""Segment records, sequence windows, interaction features and a synthetic stream.

A stream is an ordered list of :class:`SegmentRecord`.  Each record carries an
action feature (a probability vector over ``d1`` action classes) and an
interaction feature (``3k`` normalized comment counts followed by optional
extra channels).  The JSON-lines layout used on disk is::

    {"id": 0, "f": [...], "a": [...], "label": 0}

preceded by one header record holding the stream metadata.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import ValidationError

SIMPLEX_TOL = 1e-6
HEADER_KIND = "streamwatch/stream"


@dataclass(frozen=True)
class StreamConfig:
    d1: int = 40
    k: int = 3
    s: int = 1
    q: int = 9
    extra_channels: int = 2
    seed: int = 0
    anomaly_rate: float = 0.05
    n_segments: int = 2000
    n_styles: int = 4
    drift_at: int | None = None
    warmup: int = 50
    style_seed: int = 0

    @property
    def d2(self) -> int:
        return 3 * self.k + self.extra_channels

    def validate(self) -> None:
        if self.q < 1 or self.k < 1:
            raise ValidationError("q and k must be >= 1")
        if self.s < 0:
            raise ValidationError("window halfwidth s must be >= 0")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValidationError(f"anomaly_rate {self.anomaly_rate} outside [0, 1]")
        if self.d1 < 2:
            raise ValidationError("d1 must be >= 2")
        if self.n_segments < 1 or self.n_styles < 1 or self.extra_channels < 0:
            raise ValidationError("n_segments, n_styles must be >= 1 and extra_channels >= 0")


@dataclass
class SegmentRecord:
    segment_id: int
    action: np.ndarray
    interaction: np.ndarray
    label: int | None = None


@dataclass
class SequenceWindow:
    actions: np.ndarray  # (q, d1)
    interactions: np.ndarray  # (q, d2)
    target: SegmentRecord

    @property
    def q(self) -> int:
        return self.actions.shape[0]


@dataclass
class InteractionCounts:
    per_moment: np.ndarray
    s: int = 1

    def __post_init__(self):
        self.per_moment = np.asarray(self.per_moment, dtype=float)
        if self.per_moment.ndim != 1 or self.per_moment.size < 1:
            raise ValidationError("per_moment must be a non-empty 1-D sequence")
        if self.s < 0:
            raise ValidationError("window halfwidth s must be >= 0")
        if np.any(self.per_moment < 0):
            raise ValidationError("comment counts must be nonnegative")


def aggregate_comments(counts: InteractionCounts, t: int) -> float:
    """Sum of comments over moments ``[t - s, t + s]``, truncated at the ends."""
    n = counts.per_moment.size
    if not 0 <= t < n:
        raise IndexError(f"moment index {t} out of range [0, {n})")
    lo = max(0, t - counts.s)
    hi = min(n, t + counts.s + 1)
    return float(counts.per_moment[lo:hi].sum())


def aggregate_all(counts: InteractionCounts) -> np.ndarray:
    """Vectorized :func:`aggregate_comments` over every moment."""
    c = np.concatenate([[0.0], np.cumsum(counts.per_moment)])
    n = counts.per_moment.size
    idx = np.arange(n)
    lo = np.maximum(0, idx - counts.s)
    hi = np.minimum(n, idx + counts.s + 1)
    return c[hi] - c[lo]


def segment_tuples(counts: InteractionCounts, k: int) -> np.ndarray:
    """Per-segment k-tuples of aggregated counts, shape ``(n_moments // k, k)``."""
    if counts.per_moment.size % k:
        raise ValidationError(f"{counts.per_moment.size} moments is not a multiple of k={k}")
    return aggregate_all(counts).reshape(-1, k)


def build_interaction_feature(
    counts: InteractionCounts,
    i: int,
    cfg: StreamConfig,
    extra_channels: Sequence[float] | None = None,
    scale: float | None = None,
) -> np.ndarray:
    """Interaction feature of segment ``i``.

    The k-tuples of segments ``i-1``, ``i`` and ``i+1`` are concatenated and
    divided by ``scale`` (the running maximum of aggregated counts).  When no
    scale is given the maximum of the three tuples is used.  Edge segments
    reuse their single neighbour's tuple in place of the missing one.
    """
    if counts.per_moment.size == 0:
        raise ValidationError("empty comment counts")
    tuples = segment_tuples(counts, cfg.k)
    m = tuples.shape[0]
    if not 0 <= i < m:
        raise IndexError(f"segment index {i} out of range [0, {m})")
    return _feature_from_tuples(tuples, i, scale, extra_channels)


def _feature_from_tuples(tuples, i, scale, extras):
    m = tuples.shape[0]
    prev = tuples[i - 1] if i > 0 else tuples[min(i + 1, m - 1)]
    nxt = tuples[i + 1] if i < m - 1 else tuples[max(i - 1, 0)]
    raw = np.concatenate([prev, tuples[i], nxt])
    if scale is None:
        scale = raw.max()
    counts = np.zeros_like(raw) if scale <= 0 else np.clip(raw / scale, 0.0, 1.0)
    if extras is None or len(extras) == 0:
        return counts
    return np.concatenate([counts, np.asarray(extras, dtype=float)])


def validate_action_feature(raw: Sequence[float], renormalize: bool = False) -> np.ndarray:
    f = np.asarray(raw, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise ValidationError("action feature must be a non-empty 1-D vector")
    bad = np.flatnonzero(~np.isfinite(f) | (f < 0) | (f > 1))
    if bad.size:
        raise ValidationError(f"action feature entry {bad[0]} = {f[bad[0]]} outside [0, 1]")
    total = f.sum()
    if abs(total - 1.0) <= SIMPLEX_TOL:
        return f
    if renormalize and 0.99 <= total <= 1.01:
        return f / total
    raise ValidationError(f"action feature sums to {total:.9g}, not 1 (index {f.size - 1} closes the sum)")


def build_sequences(segments: Sequence[SegmentRecord], q: int) -> list[SequenceWindow]:
    """Sliding windows of ``q`` segments, each targeting the next segment."""
    if len(segments) < q + 1:
        raise ValidationError(f"need at least q+1={q + 1} segments, got {len(segments)}")
    F = np.stack([s.action for s in segments])
    A = np.stack([s.interaction for s in segments])
    return [
        SequenceWindow(F[j : j + q], A[j : j + q], segments[j + q])
        for j in range(len(segments) - q)
    ]


def iter_windows(segments: Iterable[SegmentRecord], q: int) -> Iterator[SequenceWindow]:
    """Lazy ``build_sequences`` for streams that arrive one segment at a time."""
    hist: deque[SegmentRecord] = deque(maxlen=q)
    for seg in segments:
        if len(hist) == q:
            yield SequenceWindow(
                np.stack([h.action for h in hist]), np.stack([h.interaction for h in hist]), seg
            )
        hist.append(seg)


def stack_windows(windows: Sequence[SequenceWindow]):
    """Batch arrays ``(X_f, X_a, Y_f, Y_a)`` from a list of windows."""
    if not windows:
        raise ValidationError("no windows")
    Xf = np.stack([w.actions for w in windows])
    Xa = np.stack([w.interactions for w in windows])
    Yf = np.stack([w.target.action for w in windows])
    Ya = np.stack([w.target.interaction for w in windows])
    return Xf, Xa, Yf, Ya


# -- synthetic generator ----------------------------------------------------


CALM_RATE, EXCITED_RATE = 1.0, 10.0
RATE_MEMORY = 0.1
STYLE_CONCENTRATION = 15.0
ANOMALY_MIX = (0.1, 0.5)
DRIFT_RATE_SCALE = 1.5


@dataclass
class _StyleBook:
    bases: np.ndarray  # (n_styles, d1)
    excite: np.ndarray  # P(audience excited | previous style)
    extras: np.ndarray  # (n_styles, extra_channels)
    rate_scale: float = 1.0  # audience activity relative to the first book


def _dim_pools(d1: int, n_styles: int, rng: np.random.Generator):
    perm = rng.permutation(d1)
    per_book = min(3 * n_styles, max(1, d1 // 3))
    return perm[:per_book], perm[per_book : 2 * per_book], perm[2 * per_book :]


def _style_book(pool, cfg: StreamConfig, rng: np.random.Generator) -> _StyleBook:
    bases = np.zeros((cfg.n_styles, cfg.d1))
    for j in range(cfg.n_styles):
        n_dom = rng.integers(1, 4)
        # rotate through the pool so styles share as few dims as possible
        dims = np.take(pool, np.arange(j * 3, j * 3 + n_dom), mode="wrap")
        bases[j, dims] += rng.dirichlet(np.full(n_dom, 4.0))
    excite = np.linspace(0.3, 0.7, cfg.n_styles)[rng.permutation(cfg.n_styles)]
    extras = rng.uniform(0.2, 0.8, size=(cfg.n_styles, cfg.extra_channels))
    return _StyleBook(bases, excite, extras)


def _novel_simplex(pool, d1, rng):
    if len(pool) == 0:
        pool = np.arange(d1)
    n_dom = rng.integers(1, 4)
    dims = rng.choice(pool, size=min(n_dom, len(pool)), replace=False)
    v = np.zeros(d1)
    v[dims] = rng.dirichlet(np.full(len(dims), 4.0))
    return v


def synth_stream(cfg: StreamConfig) -> list[SegmentRecord]:
    """Seeded labeled stream with coupled presenter/audience dynamics.

    The audience alternates between a calm and an excited regime; the chance
    of excitement depends on the presenter's previous style, and the comment
    rate relaxes toward the regime level as an AR(1) process.  The presenter
    in turn picks the next style from the audience regimes of the last two
    segments, so each side is only predictable with the other's history.  An
    anomaly blends an out-of-dictionary simplex into the style and adds a
    comment burst.  After ``drift_at`` a second style dictionary replaces the
    first.
    """
    cfg.validate()
    # separate generators keep the pre-drift prefix identical with and without drift
    rng = np.random.default_rng([cfg.seed, 1])
    feat_rng = np.random.default_rng([cfg.seed, 2])
    book_rng = np.random.default_rng([cfg.style_seed, 7919])
    pool_a, pool_b, pool_novel = _dim_pools(cfg.d1, cfg.n_styles, book_rng)
    books = [_style_book(pool_a, cfg, book_rng), _style_book(pool_b, cfg, book_rng)]
    books[1].rate_scale = DRIFT_RATE_SCALE
    # next style indexed by (regime one segment back, regime two back)
    react = np.arange(4).reshape(2, 2) % cfg.n_styles

    n = cfg.n_segments
    style = np.zeros(n, dtype=int)
    level = np.zeros(n)
    label = np.zeros(n, dtype=int)
    s_prev, r_prev, r_prev2, c_prev = 0, 0, 0, CALM_RATE
    for i in range(n):
        book = books[1] if cfg.drift_at is not None and i >= cfg.drift_at else books[0]
        s_i = react[r_prev, r_prev2]
        label[i] = int(i >= cfg.warmup and rng.random() < cfg.anomaly_rate)
        # a burst is an excited audience as far as the presenter is concerned
        r_i = int(rng.random() < book.excite[s_prev]) | label[i]
        target = (EXCITED_RATE * rng.uniform(0.7, 2.0) if r_i else CALM_RATE) * book.rate_scale
        c_i = RATE_MEMORY * c_prev + (1.0 - RATE_MEMORY) * target + rng.normal(0.0, 0.3)
        c_i = max(c_i, 0.2)
        style[i], level[i] = s_i, c_i
        s_prev, r_prev, r_prev2, c_prev = s_i, r_i, r_prev, c_i

    F = np.empty((n, cfg.d1))
    extras = np.empty((n, cfg.extra_channels))
    rate = np.repeat(level, cfg.k)
    for i in range(n):
        book = books[1] if cfg.drift_at is not None and i >= cfg.drift_at else books[0]
        base = book.bases[style[i]]
        dims = np.flatnonzero(base)
        if dims.size > 1:
            # recognizer confidence wobbles inside the style's support
            base = np.zeros(cfg.d1)
            base[dims] = feat_rng.dirichlet(STYLE_CONCENTRATION * book.bases[style[i], dims])
        if label[i]:
            novel = _novel_simplex(pool_novel, cfg.d1, feat_rng)
            beta = feat_rng.uniform(ANOMALY_MIX[0], ANOMALY_MIX[1])
            base = beta * novel + (1.0 - beta) * base
            rate[i * cfg.k : (i + 1) * cfg.k] += feat_rng.uniform(2.0, 3.0) * EXCITED_RATE
        jitter = feat_rng.dirichlet(np.full(cfg.d1, 0.5))
        F[i] = 0.96 * base + 0.04 * jitter
        F[i] /= F[i].sum()
        extras[i] = np.clip(book.extras[style[i]] + feat_rng.normal(0.0, 0.05, cfg.extra_channels), 0.0, 1.0)

    counts = InteractionCounts(feat_rng.poisson(rate).astype(float), cfg.s)
    tuples = segment_tuples(counts, cfg.k)
    warm = max(1, min(cfg.warmup, n))
    scale = 1.25 * float(tuples[:warm].max()) if tuples[:warm].max() > 0 else 1.0
    return [
        SegmentRecord(i, F[i], _feature_from_tuples(tuples, i, scale, extras[i]), int(label[i]))
        for i in range(n)
    ]


# -- JSON-lines io ----------------------------------------------------------


@dataclass
class StreamHeader:
    d1: int
    d2: int
    q: int = 9
    seed: int | None = None
    anomaly_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["kind"] = HEADER_KIND
        return json.dumps(d)


def write_stream(fp: IO[str], header: StreamHeader, segments: Iterable[SegmentRecord]) -> None:
    fp.write(header.to_json() + "\n")
    for seg in segments:
        rec = {"id": seg.segment_id, "f": seg.action.tolist(), "a": seg.interaction.tolist()}
        if seg.label is not None:
            rec["label"] = int(seg.label)
        fp.write(json.dumps(rec) + "\n")


def parse_segment(line: str, header: StreamHeader | None = None) -> SegmentRecord:
    try:
        rec = json.loads(line)
        seg_id, f, a = int(rec["id"]), rec["f"], rec["a"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed segment record: {exc}") from exc
    action = validate_action_feature(f)
    inter = np.asarray(a, dtype=float)
    if header is not None and (action.size != header.d1 or inter.size != header.d2):
        raise ValidationError(
            f"segment {seg_id}: dims ({action.size}, {inter.size}) do not match header ({header.d1}, {header.d2})"
        )
    label = rec.get("label")
    if label is not None and label not in (0, 1):
        raise ValidationError(f"segment {seg_id}: label must be 0 or 1")
    return SegmentRecord(seg_id, action, inter, label)


def iter_stream(fp: IO[str]) -> tuple[StreamHeader | None, Iterator[SegmentRecord]]:
    """Read an optional header line, then lazily yield validated segments."""
    first = fp.readline()
    header = None
    pending = None
    if first.strip():
        try:
            rec = json.loads(first)
            if isinstance(rec, dict) and rec.get("kind") == HEADER_KIND:
                rec.pop("kind")
                header = StreamHeader(**rec)
            else:
                pending = first
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"malformed stream header: {exc}") from exc

    def gen():
        last = None
        lines = [pending] if pending else []
        for line in _chain(lines, fp):
            if not line.strip():
                continue
            seg = parse_segment(line, header)
            if last is not None and seg.segment_id <= last:
                raise ValidationError(f"segment ids must increase: {seg.segment_id} after {last}")
            last = seg.segment_id
            yield seg

    return header, gen()


def _chain(first, rest):
    yield from first
    yield from rest


def read_stream(path) -> tuple[StreamHeader | None, list[SegmentRecord]]:
    with open(path) as fp:
        header, segs = iter_stream(fp)
        return header, list(segs)
