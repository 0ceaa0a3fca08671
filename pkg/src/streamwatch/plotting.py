"""PNG figures for the eval and bench reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PATHS, RocCurve  # noqa: E402


def roc_figure(curves: dict[str, RocCurve], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, c in curves.items():
        ax.plot(c.fpr, c.tpr, label=f"{name} (AUROC {c.auroc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", linestyle="--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_figure(fractions: dict[str, float], times_us: dict[str, float], path: str | Path) -> None:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.bar(range(len(PATHS)), [fractions.get(p, 0.0) for p in PATHS], color="tab:blue")
    a1.set_xticks(range(len(PATHS)), [p.replace("_", "\n") for p in PATHS], fontsize=7)
    a1.set_ylabel("fraction of segments")
    a1.set_ylim(0, 1)
    a1.set_title(f"fp = {fractions.get('fp', 0.0):.3f}", fontsize=9)
    names = list(times_us)
    a2.bar(range(len(names)), [times_us[n] for n in names], color="tab:orange")
    a2.set_xticks(range(len(names)), names, fontsize=8)
    a2.set_ylabel("mean time per segment (us)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
