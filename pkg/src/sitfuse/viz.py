"""Figure rendering: every delimited report the CLI writes gets a PNG sibling."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .gridworld import OBJECT_CLASSES  # noqa: E402

DOMAIN_COLORS = {"3d": "#7aa7d7", "2d": "#9cc184", "semantic": "#d26d6a"}


def save_loss_curve(curve: list[dict], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    its = [row["iteration"] for row in curve]
    for key in ("total", "ce_fused", "ce_branch_mean"):
        if any(row[key] for row in curve):
            ax.plot(its, [row[key] for row in curve], label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_robustness_curve(rows: list[dict], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row["remaining"] for row in rows]
    ax.plot(xs, [row["average"] for row in rows], marker="o", label="average")
    for cls in OBJECT_CLASSES:
        key = f"task_{cls}"
        if key in rows[0]:
            ax.plot(xs, [row[key] for row in rows], alpha=0.4, label=cls)
    ax.set_xlabel("representations remaining")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.invert_xaxis()
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gate_shares(bands: dict[str, dict[str, float]], path,
                     title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    band_order = [b for b in ("1", "2", "3", "4+") if b in bands]
    domains = sorted({d for shares in bands.values() for d in shares})
    left = [0.0] * len(band_order)
    for dom in domains:
        vals = [bands[b].get(dom, 0.0) for b in band_order]
        ax.barh(band_order, vals, left=left, label=dom,
                color=DOMAIN_COLORS.get(dom))
        left = [l + v for l, v in zip(left, vals)]
    ax.set_xlabel("share of positions with top weight in domain")
    ax.set_ylabel("lateral openness (cells)")
    ax.set_xlim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_comparison(columns: list[str], per_task: dict[str, list[float]],
                    averages: list[float], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(columns), 4))
    width = 0.8 / (len(OBJECT_CLASSES) + 1)
    for t, cls in enumerate(OBJECT_CLASSES):
        xs = [i + t * width for i in range(len(columns))]
        ax.bar(xs, per_task[cls], width=width, label=cls, alpha=0.7)
    xs = [i + len(OBJECT_CLASSES) * width for i in range(len(columns))]
    ax.bar(xs, averages, width=width, label="average", color="black")
    ax.set_xticks([i + 0.4 for i in range(len(columns))])
    ax.set_xticklabels(columns, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
