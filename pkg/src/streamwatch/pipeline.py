"""Batch scoring, calibration and the columnar report formats."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .clstm import ClstmParams, forward_batch
from .errors import ValidationError
from .filtering import AdosConfig, AdosResult, PATH_CODES, ados_filter, calibrate_triggers
from .scoring import ThresholdConfig, blend, js_divergence, youden_threshold
from .stream import SequenceWindow, stack_windows

REPORT_COLUMNS = ("segment_id", "re_i", "re_a", "re_ia", "label", "filter_path", "truth")


def reconstruct(params: ClstmParams, windows: Sequence[SequenceWindow], chunk: int = 256, offset: int = 0):
    """``(f_hat, a_hat, h)`` for every window.

    Forward passes run over chunks aligned to ``offset + index`` multiples of
    ``chunk``.  A partial chunk is padded to full size with its rows at their
    aligned slots, so a window always occupies the same row of a same-shaped
    batch and gets bit-identical outputs however the stream was split.
    """
    if not windows:
        d1, d2, h1 = params.config.d1, params.config.d2, params.config.h1
        return np.zeros((0, d1)), np.zeros((0, d2)), np.zeros((0, h1))
    if chunk < 1:
        raise ValidationError(f"chunk must be >= 1, got {chunk}")
    Xf, Xa, _, _ = stack_windows(windows)
    out_f, out_a, out_h = [], [], []
    start = 0
    while start < len(windows):
        slot = (offset + start) % chunk
        stop = min(len(windows), start + chunk - slot)
        xf, xa = Xf[start:stop], Xa[start:stop]
        if stop - start < chunk:
            xf = np.broadcast_to(xf[:1], (chunk,) + xf.shape[1:]).copy()
            xa = np.broadcast_to(xa[:1], (chunk,) + xa.shape[1:]).copy()
            xf[slot : slot + stop - start] = Xf[start:stop]
            xa[slot : slot + stop - start] = Xa[start:stop]
        fh, ah, h, _, _ = forward_batch(params, xf, xa)
        if stop - start < chunk:
            rows = slice(slot, slot + stop - start)
            fh, ah, h = fh[rows], ah[rows], h[rows]
        out_f.append(fh)
        out_a.append(ah)
        out_h.append(h)
        start = stop
    return np.concatenate(out_f), np.concatenate(out_a), np.concatenate(out_h)


@dataclass
class Scores:
    segment_ids: np.ndarray
    re_i: np.ndarray  # NaN where ADOS never computed it
    re_a: np.ndarray
    re_ia: np.ndarray  # NaN where re_i is NaN
    label: np.ndarray
    filter_path: list[str]
    truth: np.ndarray  # -1 when unlabeled

    def __len__(self) -> int:
        return int(self.segment_ids.size)

    @property
    def anomalies(self) -> set[int]:
        return {int(s) for s, lab in zip(self.segment_ids, self.label) if lab}


def _targets(windows):
    F = np.array([w.target.action for w in windows]).reshape(len(windows), -1)
    A = np.array([w.target.interaction for w in windows]).reshape(len(windows), -1)
    ids = np.array([w.target.segment_id for w in windows], dtype=np.int64)
    truth = np.array([-1 if w.target.label is None else int(w.target.label) for w in windows], dtype=np.int64)
    return ids, F, A, truth


def score_arrays(F, F_hat, A, A_hat, omega: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    re_i = js_divergence(F, F_hat)
    re_a = np.linalg.norm(A_hat - A, axis=-1)
    return re_i, re_a, blend(re_i, re_a, omega)


def exact_scores(windows, fh, ah, omega: float, thresholds: ThresholdConfig) -> Scores:
    """Exhaustive scores for windows whose reconstructions are already known."""
    thresholds.validate()
    ids, F, A, truth = _targets(windows)
    re_i, re_a, re_ia = score_arrays(F, fh, A, ah, omega)
    label = (re_ia > thresholds.tau).astype(int)
    return Scores(ids, re_i, re_a, re_ia, label, ["exact"] * len(ids), truth)


def detect(
    params: ClstmParams,
    windows: Sequence[SequenceWindow],
    thresholds: ThresholdConfig,
    ados: AdosConfig | None = None,
    chunk: int = 256,
    predictions=None,
) -> tuple[Scores, AdosResult | None]:
    """Score windows exhaustively, or through ADOS when ``ados`` is given."""
    omega = params.config.omega
    ids, F, A, truth = _targets(windows)
    if predictions is None:
        fh, ah, _ = reconstruct(params, windows, chunk)
    else:
        fh, ah = predictions
    if ados is None:
        return exact_scores(windows, fh, ah, omega, thresholds), None
    _, re_a, _ = score_arrays(F, fh, A, ah, omega)
    res = ados_filter(F, fh, re_a, omega, thresholds, ados, ids)
    ri = res.re_i
    ria = np.where(np.isnan(ri), np.nan, blend(ri, re_a, omega))
    return Scores(ids, ri, re_a, ria, res.anomaly.astype(int), res.paths, truth), res


def calibrate(params: ClstmParams, windows: Sequence[SequenceWindow], chunk: int = 256) -> dict:
    """Youden threshold and trigger window from labeled windows."""
    ids, F, A, truth = _targets(windows)
    if np.any(truth < 0) or truth.min() == truth.max():
        raise ValidationError("calibration needs labeled windows of both classes")
    fh, ah, _ = reconstruct(params, windows, chunk)
    _, re_a, re_ia = score_arrays(F, fh, A, ah, params.config.omega)
    tau = youden_threshold(re_ia, truth)
    t1, t2 = calibrate_triggers(F, fh, re_a, params.config.omega, ThresholdConfig(tau))
    return {"tau": tau, "t1": t1, "t2": t2}


# -- reports -----------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_score_report(fp: IO[str], scores: Scores, header: bool = True) -> None:
    if header:
        fp.write("\t".join(REPORT_COLUMNS) + "\n")
    for j in range(len(scores)):
        fp.write(
            f"{scores.segment_ids[j]}\t{_fmt(scores.re_i[j])}\t{_fmt(scores.re_a[j])}\t{_fmt(scores.re_ia[j])}\t"
            f"{scores.label[j]}\t{scores.filter_path[j]}\t{scores.truth[j]}\n"
        )


def read_score_report(fp: IO[str]) -> Scores:
    header = fp.readline().rstrip("\n").split("\t")
    if tuple(header) != REPORT_COLUMNS:
        raise ValidationError(f"score report header {header} != {list(REPORT_COLUMNS)}")
    rows = [line.rstrip("\n").split("\t") for line in fp if line.strip()]
    try:
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        cols = [np.array([float(r[c]) for r in rows]) for c in (1, 2, 3)]
        label = np.array([int(r[4]) for r in rows], dtype=np.int64)
        paths = [r[5] for r in rows]
        truth = np.array([int(r[6]) for r in rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"malformed score report row: {exc}") from exc
    bad = set(paths) - set(PATH_CODES)
    if bad:
        raise ValidationError(f"unknown filter paths {sorted(bad)}")
    return Scores(ids, cols[0], cols[1], cols[2], label, paths, truth)


def write_train_report(fp: IO[str], report) -> None:
    fp.write("epoch\ttrain_loss\tval_loss\tselected\n")
    for e, tl in enumerate(report.train_loss, start=1):
        vl = report.val_loss.get(e)
        fp.write(f"{e}\t{tl!r}\t{'' if vl is None else repr(vl)}\t{int(e == report.selected_epoch)}\n")
