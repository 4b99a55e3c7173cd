"""Figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchRow, fit_loglog_slope  # noqa: E402

COLORS = {
    "attention_reference": "tab:red",
    "ssm_scan_parallel": "tab:blue",
    "ssm_scan_sequential": "tab:green",
}


def plot_bench(rows: list[BenchRow], path) -> None:
    """Log-log time and peak memory against sequence length, one line per kernel."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    panels = (("wall_time_ns", "median wall time [s]", 1e-9), ("peak_bytes", "peak allocation [MiB]", 1 / 2**20))
    for ax, (field, label, unit) in zip(axes, panels):
        try:
            slopes = fit_loglog_slope(rows, field)
        except ValueError:
            slopes = {}
        for kernel in sorted({r.kernel for r in rows}):
            rs = sorted((r for r in rows if r.kernel == kernel and r.measured), key=lambda r: r.seq_len)
            if not rs:
                continue
            tag = f" (slope {slopes[kernel]:.2f})" if kernel in slopes else ""
            ax.loglog(
                [r.seq_len for r in rs],
                [getattr(r, field) * unit for r in rs],
                "o-",
                color=COLORS.get(kernel),
                label=kernel + tag,
            )
        ax.set_xlabel("sequence length")
        ax.set_ylabel(label)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(history: list[dict], path) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for split, style in (("train", "--"), ("eval", "-")):
        rs = [r for r in history if r["split"] == split]
        if not rs:
            continue
        steps = [r["step"] for r in rs]
        ax_loss.plot(steps, [r["loss"] for r in rs], style, label=split)
        ax_acc.plot(steps, [r["accuracy"] for r in rs], style, label=split)
    ax_loss.set_ylabel("cross-entropy")
    ax_acc.set_ylabel("token accuracy")
    ax_acc.set_ylim(0, 1.02)
    for ax in (ax_loss, ax_acc):
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
