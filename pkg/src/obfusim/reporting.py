"""Delimited output and figure rendering for pipeline runs.

CSV cells are formatted the same way on every run so identical results
produce byte-identical files. Figures are rendered with the Agg backend
and written next to the CSVs they are drawn from.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

APPROACH_COLORS = {
    "control": "#999999",
    "adnauseam": "#1f77b4",
    "trackthis": "#17becf",
    "rand-intent": "#2ca02c",
    "bias-intent": "#ff7f0e",
    "bias-intent-l2": "#ff7f0e",
    "bias-intent-l3": "#d62728",
    "rl": "#9467bd",
    "rl-l2": "#9467bd",
    "rl-l3": "#8c564b",
    "rl-l2p": "#e377c2",
}


def format_cell(value) -> str:
    """Canonical cell text: None -> empty, floats via repr round-trip."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer, int)):
        return str(int(value))
    return str(value)


def write_csv(path: str | Path, fieldnames: list[str], rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([format_cell(row.get(name)) for name in fieldnames])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _float(cell: str) -> float | None:
    return None if cell in ("", None) else float(cell)


def _color(approach: str) -> str:
    return APPROACH_COLORS.get(approach, "#333333")


def fig_learning_curves(curves: dict[str, list[dict]], path: str | Path) -> None:
    """One panel per trained agent: reward and loss against round."""
    kinds = sorted(curves)
    fig, axes = plt.subplots(1, max(len(kinds), 1), figsize=(5.0 * max(len(kinds), 1), 3.6),
                             squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        rows = curves[kind]
        rounds = [int(r["round"]) for r in rows]
        ax.plot(rounds, [float(r["mean_total_reward"]) for r in rows],
                label="mean total reward", color="#9467bd")
        ax.plot(rounds, [float(r["mean_final_loss"]) for r in rows],
                label="mean final loss", color="#2ca02c", linestyle="--")
        ax.set_title(f"agent trained on {kind}")
        ax.set_xlabel("round")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


METRIC_LABELS = {
    "l1_mean": "profile distance (l1)",
    "l2_mean": "segments flipped (l2)",
    "l3_mean": "bid class change (l3)",
    "l4_mean": "bid value ratio (l4)",
}


def fig_sweep(rows: list[dict], path: str | Path) -> None:
    """2x2 grid: each privacy metric against the obfuscation budget."""
    approaches = sorted({r["approach"] for r in rows})
    fig, axes = plt.subplots(2, 2, figsize=(9.5, 7.0))
    for ax, key in zip(axes.flat, METRIC_LABELS):
        for approach in approaches:
            pts = [(float(r["alpha"]), _float(r.get(key))) for r in rows
                   if r["approach"] == approach]
            pts = [(a, v) for a, v in pts if v is not None]
            if not pts:
                continue
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=approach, color=_color(approach))
        ax.set_xlabel("obfuscation budget")
        ax.set_ylabel(METRIC_LABELS[key])
        ax.grid(alpha=0.3)
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_sweep_detection(rows: list[dict], path: str | Path) -> bool:
    """Privacy gained against detectability, one line per approach.

    Returns False (and writes nothing) when no sweep row has a detector.
    """
    with_det = [r for r in rows if r.get("detection_error") not in ("", None)]
    if not with_det:
        return False
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    for approach in sorted({r["approach"] for r in with_det}):
        pts = [(float(r["detection_error"]), _float(r.get("l2_mean")))
               for r in with_det if r["approach"] == approach]
        pts = [(d, v) for d, v in pts if v is not None]
        if not pts:
            continue
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=approach, color=_color(approach))
    ax.set_xlabel("detection error (higher = stealthier)")
    ax.set_ylabel("segments flipped (l2)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def fig_stealth(rows: list[dict], path: str | Path) -> None:
    """Detector error per approach, with the 0.5 blind-guess line."""
    rows = [r for r in rows if r.get("detection_error") not in ("", None)]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    labels = [r["approach"] for r in rows]
    values = [float(r["detection_error"]) for r in rows]
    ax.bar(range(len(rows)), values, color=[_color(a) for a in labels])
    ax.axhline(0.5, color="#999999", linestyle="--", linewidth=1)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("detection error")
    ax.set_ylim(0, max(0.6, max(values, default=0.5) * 1.1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_adaptiveness(matrices: dict[str, np.ndarray], path: str | Path) -> None:
    """Heatmap of pairwise selection distance per approach."""
    names = sorted(matrices)
    fig, axes = plt.subplots(1, max(len(names), 1),
                             figsize=(4.0 * max(len(names), 1), 3.6), squeeze=False)
    vmax = max((float(m.max()) for m in matrices.values()), default=1.0)
    for ax, name in zip(axes[0], names):
        im = ax.imshow(matrices[name], vmin=0.0, vmax=max(vmax, 1e-9),
                       cmap="viridis")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("user type")
        ax.set_ylabel("user type")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_surrogates(rows: list[dict], path: str | Path) -> None:
    """TPR/FPR scatter for every trained tracker model; selected are filled."""
    fig, ax = plt.subplots(figsize=(5.0, 4.4))
    for kind, marker in (("segment", "o"), ("bid", "s")):
        for selected, fill in ((True, None), (False, "none")):
            pts = [(float(r["fpr"]), float(r["tpr"])) for r in rows
                   if r["kind"] == kind and (r["selected"] == "true") == selected]
            if not pts:
                continue
            label = f"{kind} ({'kept' if selected else 'dropped'})"
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], marker=marker,
                       facecolors=fill, edgecolors="#1f77b4" if kind == "segment"
                       else "#d62728", label=label,
                       color="#1f77b4" if kind == "segment" else "#d62728")
    ax.plot([0, 1], [0, 1], color="#999999", linewidth=1, linestyle="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
