"""Reconstruction-error scores and thresholding.

``re_i`` is the Jensen-Shannon divergence (nats) between an action feature and
its reconstruction, ``re_a`` the Euclidean distance between interaction
features, and ``re_ia`` their convex combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError

LOG_FLOOR = 1e-12
TINY = float(np.nextafter(0.0, 1.0))
LN2 = math.log(2.0)

# tau presets reported for the four evaluation streams (influencer, speech, TED, Twitch)
TAU_PRESETS = {"inf": 0.182, "spe": 0.097, "ted": 0.052, "twi": 0.058}
OMEGA_PRESETS = {"inf": 0.8, "spe": 0.9, "ted": 0.9, "twi": 0.9}


def _plogp_over(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    # the floor keeps both logs finite, so p = 0 contributes exactly 0
    return p * np.log((p + LOG_FLOOR) / (m + LOG_FLOOR))


def js_terms(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-dimension JS contributions; sums to the divergence along the last axis."""
    m = 0.5 * (p + q)
    return 0.5 * (_plogp_over(p, m) + _plogp_over(q, m))


def js_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray | float:
    """JS divergence along the last axis, without input validation."""
    return js_terms(np.asarray(p, dtype=float), np.asarray(q, dtype=float)).sum(axis=-1)


def _check_simplex(v, name):
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
        raise ValidationError(f"{name} is not a probability vector (sum={v.sum():.9g})")
    return v


def re_i(f, f_hat) -> float:
    f = _check_simplex(f, "f")
    f_hat = _check_simplex(f_hat, "f_hat")
    if f.shape != f_hat.shape:
        raise ShapeError(f"shape mismatch {f.shape} vs {f_hat.shape}")
    return float(js_divergence(f, f_hat))


def re_a(a, a_hat) -> float:
    a = np.asarray(a, dtype=float)
    a_hat = np.asarray(a_hat, dtype=float)
    if a.shape != a_hat.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {a_hat.shape}")
    return float(np.linalg.norm(a_hat - a))


def blend(re_i_values, re_a_values, omega: float):
    """``omega * re_i + (1 - omega) * re_a``, elementwise.

    A positive component with positive weight keeps the result positive: a
    product that underflows to zero is lifted to the smallest subnormal.  No
    threshold is that small, so labels are unaffected.
    """
    ri = np.asarray(re_i_values, dtype=float)
    ra = np.asarray(re_a_values, dtype=float)
    out = omega * ri + (1.0 - omega) * ra
    live = ((omega > 0.0) & (ri > 0.0)) | ((omega < 1.0) & (ra > 0.0))
    return np.where((out == 0.0) & live, TINY, out)


def re_ia(re_i_value: float, re_a_value: float, omega: float) -> float:
    if not 0.0 <= omega <= 1.0:
        raise ValidationError(f"omega {omega} outside [0, 1]")
    return float(blend(re_i_value, re_a_value, omega))


@dataclass(frozen=True)
class ScoreBreakdown:
    segment_id: int
    re_i: float
    re_a: float
    omega: float

    @property
    def re_ia(self) -> float:
        return re_ia(self.re_i, self.re_a, self.omega)


@dataclass(frozen=True)
class ThresholdConfig:
    tau: float
    t_a: float | None = None
    t_n: float | None = None

    @property
    def anomaly(self) -> float:
        return self.tau if self.t_a is None else self.t_a

    @property
    def normal(self) -> float:
        return 0.7 * self.anomaly if self.t_n is None else self.t_n

    def validate(self) -> None:
        if not (0.0 < self.normal < self.anomaly):
            raise ConfigError(f"need 0 < T_n < T_a, got T_n={self.normal}, T_a={self.anomaly}")


def classify(scores: Sequence[float], tau: float) -> np.ndarray:
    return (np.asarray(scores, dtype=float) > tau).astype(int)


def classify_and_rank(scores: Sequence[ScoreBreakdown], tau: float, top_k: int | None = None):
    """Labels (``re_ia > tau``) and, if ``top_k`` is given, the top segment ids.

    Ranking is by descending ``re_ia`` with ties going to the earlier segment.
    """
    values = [s.re_ia for s in scores]
    labels = classify(values, tau)
    if top_k is None:
        return labels, None
    order = sorted(range(len(scores)), key=lambda j: (-values[j], scores[j].segment_id))
    return labels, [scores[j].segment_id for j in order[:top_k]]


def youden_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximizing TPR - FPR for the rule ``score > tau``.

    The returned value sits midway between the chosen score and the next
    smaller distinct score, so a segment sitting exactly on the boundary
    never flips.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if y.min() == y.max():
        raise ValidationError("threshold calibration needs both classes")
    u, inv = np.unique(s, return_inverse=True)
    n_pos = np.bincount(inv, weights=y, minlength=u.size)
    n_neg = np.bincount(inv, weights=1 - y, minlength=u.size)
    # flagging every value >= u[j]: suffix sums give TP and FP counts
    tpr = np.cumsum(n_pos[::-1])[::-1] / n_pos.sum()
    fpr = np.cumsum(n_neg[::-1])[::-1] / n_neg.sum()
    j = int(np.argmax(tpr - fpr))
    cut = u[0] - 1.0 if j == 0 else 0.5 * (u[j - 1] + u[j])
    return float(max(cut, 1e-9))
