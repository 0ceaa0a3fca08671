"""Command-line entry point: gen, train, detect, stream, eval, bench.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
import time
from dataclasses import replace
from typing import IO, Iterator, Sequence

import numpy as np

from . import __version__
from .checkpoint import checkpoint_load, checkpoint_save
from .clstm import train
from .config import RunConfig, load_config
from .drift import DynamicUpdater, UpdateConfig, UpdateLog, init_state
from .errors import InvariantError, StreamwatchError, ValidationError
from .filtering import ados_filter
from .metrics import PATHS, filtering_power, roc_auroc
from .pipeline import (
    REPORT_COLUMNS,
    calibrate,
    detect,
    exact_scores,
    read_score_report,
    reconstruct,
    score_arrays,
    write_score_report,
    write_train_report,
)
from .stream import (
    StreamHeader,
    build_sequences,
    iter_stream,
    iter_windows,
    read_stream,
    synth_stream,
    write_stream,
)


@contextlib.contextmanager
def _open_out(path: str | None) -> Iterator[IO[str]]:
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fp:
            yield fp


def _load_windows(path: str, q: int):
    header, segs = read_stream(path)
    if header is not None and header.q != q:
        raise ValidationError(f"{path}: stream q={header.q} differs from configured q={q}")
    return header, build_sequences(segs, q)


def _comment_channels(cfg: RunConfig, header: StreamHeader | None, d2: int) -> UpdateConfig:
    if cfg.update.comment_channels is not None:
        return cfg.update
    cc = (header.extra or {}).get("comment_channels") if header is not None else None
    return replace(cfg.update, comment_channels=int(cc) if cc is not None else d2)


def _thresholds(cfg: RunConfig, meta: dict):
    return cfg.scoring.thresholds(meta.get("calibration", {}).get("tau"))


def _ados_config(cfg: RunConfig, meta: dict, use_config_triggers: bool, strict: bool):
    ados = cfg.ados
    cal = meta.get("calibration", {})
    if not use_config_triggers and "t1" in cal:
        ados = replace(ados, t1=cal["t1"], t2=cal["t2"], allow_empty_window=cal["t1"] > cal["t2"])
    if strict:
        ados = replace(ados, strict_paper_mode=True)
    ados.validate()
    return ados


# -- commands ----------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> int:
    scfg = cfg.stream
    if args.seed is not None:
        scfg = replace(scfg, seed=args.seed)
    if args.n_segments is not None:
        scfg = replace(scfg, n_segments=args.n_segments)
    if args.anomaly_rate is not None:
        scfg = replace(scfg, anomaly_rate=args.anomaly_rate)
    if args.drift_at is not None:
        scfg = replace(scfg, drift_at=args.drift_at)
    segs = synth_stream(scfg)
    header = StreamHeader(
        scfg.d1, scfg.d2, scfg.q, scfg.seed, scfg.anomaly_rate,
        {"k": scfg.k, "comment_channels": 3 * scfg.k, "drift_at": scfg.drift_at, "style_seed": scfg.style_seed},
    )
    with _open_out(args.out) as fp:
        write_stream(fp, header, segs)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg.model = {**cfg.model, "seed": args.seed}
    header, windows = _load_windows(args.data, cfg.stream.q)
    d1, d2 = windows[0].actions.shape[1], windows[0].interactions.shape[1]
    mcfg = cfg.model_config(d1, d2)
    # train on windows whose target is not a known anomaly
    normal = [w for w in windows if w.target.label != 1]
    params, report = train(normal, mcfg)
    meta = {"train_report": {"selected_epoch": report.selected_epoch, "val_loss": report.val_loss}}
    if args.calib is not None:
        _, cal_windows = _load_windows(args.calib, mcfg.q)
        meta["calibration"] = calibrate(params, cal_windows, cfg.run.chunk)
    checkpoint_save(params, args.out, meta)
    with _open_out(args.report) as fp:
        write_train_report(fp, report)
    if "calibration" in meta:
        c = meta["calibration"]
        print(f"calibrated tau={c['tau']!r} t1={c['t1']!r} t2={c['t2']!r}", file=sys.stderr)
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    params, meta = checkpoint_load(args.model)
    header, windows = _load_windows(args.data, params.config.q)
    if args.tau is not None:
        cfg.scoring = replace(cfg.scoring, tau=args.tau)
    th = _thresholds(cfg, meta)
    ados = _ados_config(cfg, meta, args.config_triggers, args.strict) if args.ados else None
    scores, res = detect(params, windows, th, ados, cfg.run.chunk)
    with _open_out(args.out) as fp:
        write_score_report(fp, scores)
    msg = f"anomalies {int(scores.label.sum())} of {len(scores)}"
    if res is not None:
        msg += f"; fp {filtering_power(res.paths)['fp']:.4f}; exact {res.exact_calls}"
    print(msg, file=sys.stderr)
    return 0


def cmd_stream(args, cfg: RunConfig) -> int:
    params, meta = checkpoint_load(args.model)
    th = _thresholds(cfg, meta)
    q, chunk, omega = params.config.q, cfg.run.chunk, params.config.omega
    src = sys.stdin if args.data in (None, "-") else open(args.data)
    log_fp = None
    try:
        header, segs = iter_stream(src)
        ucfg = _comment_channels(cfg, header, params.config.d2)
        state = None
        if not args.no_update:
            if args.history is None:
                raise ValidationError("stream with updates needs --history (the training stream)")
            _, hist = _load_windows(args.history, q)
            state = init_state(params, [w for w in hist if w.target.label != 1], ucfg)
        updater = DynamicUpdater(params, state, ucfg, enabled=not args.no_update, chunk=chunk)
        if args.log:
            log_fp = open(args.log, "w")
            log_fp.write(UpdateLog.HEADER + "\n")
        logged = 0
        with _open_out(args.out) as out:
            out.write("\t".join(REPORT_COLUMNS) + "\n")
            pending: list = []
            # flush at chunk boundaries so batches match offline detection
            for w in iter_windows(segs, q):
                pending.append(w)
                if (updater.position + len(pending)) % chunk == 0:
                    fh, ah = updater.feed(pending)
                    write_score_report(out, exact_scores(pending, fh, ah, omega, th), header=False)
                    out.flush()
                    pending = []
                if log_fp and len(updater.log) > logged:
                    for entry in updater.log[logged:]:
                        log_fp.write(entry.line() + "\n")
                    logged = len(updater.log)
            if pending:
                fh, ah = updater.feed(pending)
                write_score_report(out, exact_scores(pending, fh, ah, omega, th), header=False)
            if log_fp:
                for entry in updater.log[logged:]:
                    log_fp.write(entry.line() + "\n")
    finally:
        if log_fp:
            log_fp.close()
        if src is not sys.stdin:
            src.close()
    retrains = sum(e.retrained for e in updater.log)
    print(f"segments {updater.position}; update cycles {len(updater.log)}; retrains {retrains}", file=sys.stderr)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    with open(args.report) as fp:
        scores = read_score_report(fp)
    truth = scores.truth
    if args.labels is not None:
        _, segs = read_stream(args.labels)
        lab = {s.segment_id: s.label for s in segs}
        try:
            truth = np.array([lab[int(i)] for i in scores.segment_ids])
        except KeyError as exc:
            raise ValidationError(f"segment {exc} missing from the label file") from exc
        if any(t is None for t in truth):
            raise ValidationError("label file has unlabeled segments")
        truth = truth.astype(int)
    if np.any(np.isnan(scores.re_ia)):
        raise ValidationError("report has pruned scores; run detect without --ados for eval")
    if np.any(truth < 0):
        raise ValidationError("report has unlabeled segments; pass --labels")
    curve = roc_auroc(scores.re_ia, truth)
    print(f"auroc\t{curve.auroc!r}")
    if args.out is not None:
        with _open_out(args.out) as fp:
            fp.write("fpr\ttpr\tthreshold\n")
            for x, y, t in curve.rows():
                fp.write(f"{x!r}\t{y!r}\t{t!r}\n")
    if args.figure is not None:
        from .plotting import roc_figure

        roc_figure({"re_ia": curve}, args.figure)
    return 0


def _chunk_times(fn, n: int, chunk: int, repeats: int) -> np.ndarray:
    """Per-segment seconds for each chunk, best of ``repeats``."""
    out = []
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(s, e)
            best = min(best, time.perf_counter() - t0)
        out.append(best / (e - s))
    return np.array(out)


def cmd_bench(args, cfg: RunConfig) -> int:
    params, meta = checkpoint_load(args.model)
    header, windows = _load_windows(args.data, params.config.q)
    th = _thresholds(cfg, meta)
    ados = _ados_config(cfg, meta, args.config_triggers, args.strict)
    chunk = cfg.run.chunk
    omega = params.config.omega
    t0 = time.perf_counter()
    fh, ah, _ = reconstruct(params, windows, chunk)
    t_model = (time.perf_counter() - t0) / len(windows)
    F = np.array([w.target.action for w in windows])
    A = np.array([w.target.interaction for w in windows])
    re_a = np.linalg.norm(ah - A, axis=1)

    exhaustive = _chunk_times(lambda s, e: score_arrays(F[s:e], fh[s:e], A[s:e], ah[s:e], omega), len(F), chunk, args.repeats)
    with_ados = _chunk_times(
        lambda s, e: ados_filter(F[s:e], fh[s:e], np.linalg.norm(ah[s:e] - A[s:e], axis=1), omega, th, ados), len(F), chunk, args.repeats
    )
    res = ados_filter(F, fh, re_a, omega, th, ados)
    exact_labels = (score_arrays(F, fh, A, ah, omega)[2] > th.tau)
    if not ados.strict_paper_mode and not np.array_equal(exact_labels, res.anomaly):
        raise InvariantError("ADOS decisions differ from exhaustive scoring in composite mode")
    fp_ = filtering_power(res.paths)
    rows = [("segments", len(res)), ("model_us_per_segment", t_model * 1e6)]
    for p in PATHS:
        rows.append((f"count.{p}", int(sum(1 for x in res.paths if x == p))))
    for p in PATHS:
        rows.append((f"fraction.{p}", fp_[p]))
    rows += [
        ("fp", fp_["fp"]),
        ("l1_skipped", int(res.l1_skipped.sum())),
        ("exact_js_calls", res.exact_calls),
        ("exhaustive_us_mean", exhaustive.mean() * 1e6),
        ("exhaustive_us_p99", np.percentile(exhaustive, 99) * 1e6),
        ("ados_us_mean", with_ados.mean() * 1e6),
        ("ados_us_p99", np.percentile(with_ados, 99) * 1e6),
    ]
    if args.history is not None:
        ucfg = _comment_channels(cfg, header, params.config.d2)
        _, hist = _load_windows(args.history, params.config.q)
        state = init_state(params, [w for w in hist if w.target.label != 1], ucfg)
        upd = DynamicUpdater(params, state, ucfg, chunk=chunk)
        upd.feed(windows)
        for e in upd.log:
            rows.append((f"update_cycle_{e.cycle}_s", e.wall_time_s))
        rows.append(("update_retrains", sum(e.retrained for e in upd.log)))
    with _open_out(args.out) as fp:
        fp.write("metric\tvalue\n")
        for k, v in rows:
            fp.write(f"{k}\t{float(v)!r}\n" if isinstance(v, (float, np.floating)) else f"{k}\t{v}\n")
    if args.figure is not None:
        from .plotting import bench_figure

        bench_figure(fp_, {"exhaustive": exhaustive.mean() * 1e6, "ados": with_ados.mean() * 1e6}, args.figure)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (see --print-config for the schema)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="seed for the stream (gen) or the model (train)")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")

    p = argparse.ArgumentParser(prog="streamwatch", description="Coupled-LSTM anomaly detection for live streams.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic labeled stream")
    g.add_argument("--out", help="output JSON-lines file (default stdout)")
    g.add_argument("--n-segments", type=int)
    g.add_argument("--anomaly-rate", type=float)
    g.add_argument("--drift-at", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="fit a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--calib", help="labeled stream for threshold and trigger calibration")
    t.add_argument("--report", help="training report file (default stdout)")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("detect", cmd_detect, "score a stream file"), ("bench", cmd_bench, "time exhaustive vs bounded scoring")):
        d = sub.add_parser(name, parents=[common], help=helptext)
        d.add_argument("--model", required=True)
        d.add_argument("--data", required=True)
        d.add_argument("--out", help="report file (default stdout)")
        d.add_argument("--strict", action="store_true", help="apply ADOS thresholds to re_i alone")
        d.add_argument("--config-triggers", action="store_true", help="use ados.t1/t2 from the config, not the calibrated ones")
        if name == "detect":
            d.add_argument("--ados", action="store_true", help="prune exact divergences with bounds")
            d.add_argument("--tau", type=float)
        else:
            d.add_argument("--repeats", type=int, default=3)
            d.add_argument("--history", help="training stream; adds update-cycle timings")
            d.add_argument("--figure", help="write a PNG summary")
        d.set_defaults(func=fn)

    s = sub.add_parser("stream", parents=[common], help="online detection with dynamic updating")
    s.add_argument("--model", required=True)
    s.add_argument("--data", help="JSON-lines stream (default stdin)")
    s.add_argument("--history", help="training stream used to seed the drift state")
    s.add_argument("--no-update", action="store_true")
    s.add_argument("--out", help="score report (default stdout)")
    s.add_argument("--log", help="update log file")
    s.set_defaults(func=cmd_stream)

    e = sub.add_parser("eval", parents=[common], help="ROC/AUROC from a score report")
    e.add_argument("--report", required=True)
    e.add_argument("--labels", help="stream file with ground-truth labels")
    e.add_argument("--out", help="curve points file")
    e.add_argument("--figure", help="write the ROC curve as PNG")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.print_config:
            print(cfg.dumps())
            return 0
        return args.func(args, cfg)
    except StreamwatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AssertionError, FloatingPointError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
