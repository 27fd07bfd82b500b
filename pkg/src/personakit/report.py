"""Figure rendering for the evaluation reports.

Every eval subcommand writes its JSON/TSV outputs plus a PNG summarizing
the same numbers; rendering is deterministic (Agg backend, fixed metadata).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_OPTS = {"dpi": 120, "metadata": {"Software": "personakit"}}
STRATA = ("A", "B", "C", "D")


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def render_cluster_figure(report: dict, path: str) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    purities = [row["purity"] for row in report["clusters"]]
    ax1.hist(purities, bins=20, range=(0, 1), color="#4878d0", edgecolor="white")
    ax1.set_xlabel("cluster stratum purity")
    ax1.set_ylabel("clusters")
    ax1.set_title(f"mean purity {report['mean_purity']:.3f}")

    heads = sorted(report["incoherence"])
    values = [100.0 * report["incoherence"][h] for h in heads]
    ax2.bar(heads, values, color="#d65f5f")
    ax2.set_ylabel("% buyers in incoherent codes")
    ax2.set_title(f"incompatible clusters: {report['incompatible_clusters']}")
    _save(fig, path)


def render_distribution_figure(report: dict, path: str) -> None:
    shops = report["shops"]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(8, len(shops) * 0.9), 7))
    width = 0.1
    xs = np.arange(len(shops))
    # log(1 + 100x) heights keep rare strata visible next to dominant ones
    for s_idx, stratum in enumerate(STRATA):
        true_vals = [np.log1p(100 * s["true_strata"][stratum]) for s in shops]
        pred_vals = [np.log1p(100 * s["predicted_strata"][stratum]) for s in shops]
        offset = (s_idx - 1.5) * 2 * width
        ax1.bar(xs + offset, true_vals, width, label=f"{stratum} real" if s_idx == 0 else None,
                color=plt.cm.tab10(s_idx), alpha=0.9)
        ax1.bar(xs + offset + width, pred_vals, width, color=plt.cm.tab10(s_idx),
                alpha=0.45, hatch="//")
    ax1.set_xticks(xs)
    ax1.set_xticklabels([s["shop_id"] for s in shops], rotation=45, ha="right")
    ax1.set_ylabel("log(1 + 100 share)")
    ax1.set_title(
        f"stratum mix: solid real vs hatched predicted (mean JS {report['mean_js']:.3f})"
    )

    r2 = report["per_feature_r2"]
    names = [n for n, v in r2.items() if v is not None]
    vals = [r2[n] for n in names]
    ax2.bar(range(len(names)), vals, color="#6acc65")
    ax2.set_xticks(range(len(names)))
    ax2.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax2.set_ylabel("store-level R^2")
    ax2.axhline(0.0, color="black", linewidth=0.6)
    _save(fig, path)


def render_alignment_figure(report: dict, path: str) -> None:
    summary = report["by_stratum"]
    strata = sorted(summary)
    kinds = ("correct", "all_mismatch", "random_mismatch")
    colors = {"correct": "#4878d0", "all_mismatch": "#d65f5f", "random_mismatch": "#ee854a"}
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(len(strata))
    width = 0.25
    for i, kind in enumerate(kinds):
        vals = [summary[s][kind]["ara"] for s in strata]
        ax.bar(xs + (i - 1) * width, vals, width, label=kind, color=colors[kind])
    ax.set_xticks(xs)
    ax.set_xticklabels(strata)
    ax.set_ylabel("ARA")
    ax.set_ylim(0, 1)
    stratified = report["stratified_ara"]
    ax.set_title(
        "conversion alignment by stratum "
        f"(stratified correct {stratified['correct']:.3f} vs "
        f"all-mismatch {stratified['all_mismatch']:.3f})"
    )
    ax.legend()
    _save(fig, path)


def render_separation_figure(report: dict, path: str) -> None:
    heads = sorted(report)
    fig, axes = plt.subplots(1, len(heads), figsize=(4 * len(heads), 3.5))
    if len(heads) == 1:
        axes = [axes]
    for ax, head in zip(axes, heads):
        means = report[head]["mean_scores"]
        ax.bar(["Low", "Medium", "High"], [m if m is not None else 0.0 for m in means],
               color="#4878d0")
        stats = report[head].get("stats")
        if stats and stats.get("cohens_d") is not None:
            ax.set_title(f"{head} (d={stats['cohens_d']:.2f}, perm p={stats['permutation_p']:.4f})")
        else:
            ax.set_title(head)
        ax.set_ylabel("mean score per session")
    _save(fig, path)
