"""Figure rendering for the report path.

Figures are written to files (Agg backend, no display) next to the delimited
summary the report command produces: perplexity and step time against the
number of samples K when a sweep is present, and a per-criterion comparison
otherwise.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from snislm.evaluation import MetricsRow


def _by_criterion(rows: list[MetricsRow]) -> dict[str, list[MetricsRow]]:
    groups: dict[str, list[MetricsRow]] = {}
    for row in rows:
        groups.setdefault(row.criterion, []).append(row)
    return groups


def plot_ppl_vs_k(rows: list[MetricsRow], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for criterion, group in sorted(_by_criterion(rows).items()):
        group = sorted(group, key=lambda r: r.k)
        ax.plot([r.k for r in group], [r.eval_ppl for r in group], marker="o", label=criterion)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("number of samples K")
    ax.set_ylabel("perplexity")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_speed_vs_k(rows: list[MetricsRow], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for criterion, group in sorted(_by_criterion(rows).items()):
        group = sorted(group, key=lambda r: r.k)
        ax.plot(
            [r.k for r in group],
            [r.sec_per_batch for r in group],
            marker="s",
            label=criterion,
        )
    ax.set_xscale("log", base=2)
    ax.set_xlabel("number of samples K")
    ax.set_ylabel("seconds per batch")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_criterion_comparison(rows: list[MetricsRow], path: Path) -> None:
    """Final perplexity and normalization deficit per criterion."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.2))
    labels = [f"{r.criterion}\nK={r.k}" for r in rows]
    ax1.bar(labels, [r.eval_ppl for r in rows], color="tab:blue")
    ax1.set_ylabel("perplexity")
    ax1.tick_params(axis="x", labelsize=7)
    ax2.bar(labels, [r.norm_deficit for r in rows], color="tab:orange")
    ax2.set_ylabel("normalization deficit")
    ax2.tick_params(axis="x", labelsize=7)
    for ax in (ax1, ax2):
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(rows: list[MetricsRow], outdir: str | Path) -> list[Path]:
    """Write whichever figures the rows support; returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if not rows:
        return written
    ks_per_criterion = {c: {r.k for r in g} for c, g in _by_criterion(rows).items()}
    if any(len(ks) >= 2 for ks in ks_per_criterion.values()):
        path = outdir / "ppl_vs_k.png"
        plot_ppl_vs_k(rows, path)
        written.append(path)
        path = outdir / "sec_per_batch_vs_k.png"
        plot_speed_vs_k(rows, path)
        written.append(path)
    path = outdir / "criterion_comparison.png"
    plot_criterion_comparison(rows, path)
    written.append(path)
    return written
