"""Matplotlib renderings written next to the delimited CLI outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curve_figure(curve: list[tuple[int, float]], path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if curve:
        its, losses = zip(*curve)
        ax.plot(its, losses, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def shrink_report_figure(reports, path) -> None:
    """Per-removal criterion and residual traces, one panel per stage."""
    staged = [r for r in reports if r.removals]
    if not staged:
        staged = list(reports)
    fig, axes = plt.subplots(len(staged), 1, figsize=(6.5, 2.6 * max(len(staged), 1)), squeeze=False)
    for ax, report in zip(axes[:, 0], staged):
        label = f"{report.method} layer {report.layer}: {report.size_before}→{report.size_after}"
        if report.removals:
            crit = np.array([r.criterion for r in report.removals])
            resid = np.array([r.residual for r in report.removals])
            idx = np.arange(1, len(crit) + 1)
            ax.semilogy(idx, np.maximum(crit, 1e-300), label="criterion", lw=1.2)
            ax.semilogy(idx, np.maximum(resid, 1e-300), label="lambda residual", lw=1.2)
            ax.set_xlabel("removal")
            ax.legend(fontsize=8)
        else:
            ax.text(0.5, 0.5, "SVD stage (no per-neuron removals)", ha="center", va="center")
            ax.set_xticks([])
            ax.set_yticks([])
        ax.set_title(label, fontsize=9)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_figure(results: dict[str, float], path, title: str = "decoding throughput") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    names = list(results)
    ax.bar(names, [results[n] for n in names], color="#4878d0")
    ax.set_ylabel("tokens / second")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
