"""Static figures rendered from the analysis CSVs."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.4),
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _read(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_pb_by_popularity(csv_path: str | Path, out_path: str | Path) -> Path:
    """Bar chart from ``group,n_edges,mean_p_b`` with a dashed line at 0.5."""
    rows = _read(csv_path)
    groups = [int(r["group"]) for r in rows]
    means = [float(r["mean_p_b"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(groups, means, color="#4c72b0", width=0.6)
        ax.axhline(0.5, color="0.4", ls="--", lw=0.8)
        ax.set_xticks(groups)
        ax.set_xlabel("item popularity group (0 = least popular)")
        ax.set_ylabel("mean $P_B$")
        ax.set_ylim(0, 1)
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)


def plot_tradeoff(history_path: str | Path, out_path: str | Path, bias_column: str | None = None) -> Path | None:
    """Validation NDCG against prediction bias, one point per stage-1 epoch.

    Returns ``None`` when the history lacks a validation or bias column.
    """
    rows = [r for r in _read(history_path) if r.get("stage") == "1"]
    if not rows:
        return None
    cols = rows[0].keys()
    ndcg_col = next((c for c in cols if c.startswith("val_ndcg@")), None)
    bias_cols = [c for c in cols if c.startswith("pred_bias_")]
    if bias_column is not None:
        bias_cols = [c for c in bias_cols if c == f"pred_bias_{bias_column}"]
    if ndcg_col is None or not bias_cols:
        return None
    bias_col = bias_cols[0]
    pts = [(float(r[bias_col]), float(r[ndcg_col])) for r in rows if r[bias_col] and r[ndcg_col]]
    pts = [p for p in pts if not (math.isnan(p[0]) or math.isnan(p[1]))]
    if not pts:
        return None
    xs, ys = zip(*pts)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(xs, ys, color="0.7", lw=0.8, zorder=1)
        sc = ax.scatter(xs, ys, c=range(len(xs)), cmap="viridis", s=12, zorder=2)
        fig.colorbar(sc, ax=ax, label="epoch")
        ax.set_xlabel(f"prediction bias ({bias_col[len('pred_bias_'):]})")
        ax.set_ylabel(ndcg_col.replace("val_", "validation "))
        fig.savefig(out_path)
        plt.close(fig)
    return Path(out_path)
