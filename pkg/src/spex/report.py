"""Figure rendering for the report paths, written next to the CSV output."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .kernels import KernelSpec, basis_matrix  # noqa: E402

__all__ = ["plot_loss", "plot_eigenfunctions", "plot_truncation", "plot_table"]


def plot_loss(trace, path: str) -> None:
    steps = [s for s, _ in trace]
    losses = [v for _, v in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_eigenfunctions(
    spec: KernelSpec, predict, d: int, path: str, index_offset: int = 1, n_grid: int = 400
) -> None:
    """Estimated vs true eigenfunctions along a 1-D section.

    For p = 1 the functions are drawn on [-1, 1]; for p = 2 along the
    diagonal a = (t, t). True functions are solid gray, estimates dashed.
    """
    t = np.linspace(-1.0, 1.0, n_grid)
    pts = t[:, None] if spec.p == 1 else np.stack([t, t], axis=1)
    truth = basis_matrix(spec, pts)[:, index_offset : d + index_offset]
    est = np.asarray(predict(pts))
    # sign-align each estimate to its target for readability
    signs = np.sign(np.sum(est * truth, axis=0))
    signs[signs == 0] = 1.0
    est = est * signs
    cols = min(d, 4)
    rows = (d + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        if i >= d:
            ax.axis("off")
            continue
        ax.plot(t, truth[:, i], color="0.55", lw=2.0, label="true")
        ax.plot(t, est[:, i], "--", color="C0", lw=1.4, label="estimate")
        ax.set_title(f"eigenfunction {i + 1}", fontsize=9)
        ax.grid(alpha=0.3)
        if i == 0:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_truncation(prefixes, errors, optima, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(prefixes, errors, "o-", label="estimated truncation")
    ax.plot(prefixes, optima, "s--", color="0.5", label="analytic optimum")
    ax.set_xlabel("kept dimensions")
    ax.set_ylabel("kernel reconstruction error")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_table(rows: list[dict], path: str) -> None:
    """Grouped bars of mean EF-MSE with standard-error whiskers per cell."""
    if not rows:
        return
    labels = [r["cell"] for r in rows]
    means = [r["ef_mse_mean"] for r in rows]
    errs = [r["ef_mse_stderr"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 3.8))
    ax.bar(x, means, yerr=errs, capsize=3, color="C0", alpha=0.85)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean EF-MSE")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
