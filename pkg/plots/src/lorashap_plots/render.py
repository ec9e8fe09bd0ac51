"""The three figure renderers: score heatmap, allocation bars, budget curve."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .formats import (KINDS, FormatError, ImportanceTable, load_allocation,
                      load_importance, load_sweep)


def normalized_matrix(table: ImportanceTable, layer: int,
                      global_max: float | None = None) -> np.ndarray:
    """(n_kinds, n_rank_slots) score grid for one layer, normalized to [0, 1].

    Per-module normalization divides each row by its own max, so every
    module's largest score maps to exactly 1.0; pass global_max to divide
    everything by one shared value instead. Absent cells (pruned ranks) are
    NaN.
    """
    if layer not in table.layers:
        raise FormatError(f"layer {layer} not in CSV (has {table.layers})")
    width = table.max_rank_index(layer) + 1
    grid = np.full((len(KINDS), width), np.nan)
    for row, kind in enumerate(KINDS):
        for index, score in table.module_scores(layer, kind).items():
            grid[row, index] = score
    if global_max is not None:
        if global_max > 0:
            grid = grid / global_max
        return grid
    for row in range(len(KINDS)):
        values = grid[row]
        if np.isnan(values).all():
            continue
        peak = np.nanmax(values)
        if peak > 0:
            grid[row] = values / peak
    return grid


def render_heatmap(importance_csv: str, layers: list[int], out_path: str,
                   global_norm: bool = False) -> str:
    """One per-layer panel; rows are module kinds, columns rank indices."""
    table = load_importance(importance_csv)
    if not layers:
        raise FormatError("no layers requested")
    missing = [l for l in layers if l not in table.layers]
    if missing:
        raise FormatError(f"layer {missing[0]} not in {importance_csv} "
                          f"(has {table.layers})")
    global_max = max(table.scores.values()) if global_norm else None
    fig, axes = plt.subplots(len(layers), 1, squeeze=False,
                             figsize=(8, 2.2 * len(layers)))
    for ax, layer in zip(axes[:, 0], layers):
        grid = normalized_matrix(table, layer, global_max)
        masked = np.ma.masked_invalid(grid)
        im = ax.imshow(masked, vmin=0.0, vmax=1.0, cmap="viridis",
                       interpolation="nearest", aspect="auto")
        ax.set_yticks(range(len(KINDS)), KINDS)
        ax.set_xticks(range(grid.shape[1]))
        ax.set_xlabel("rank index")
        ax.set_title(f"layer {layer}")
        fig.colorbar(im, ax=ax, label="normalized score")
    fig.suptitle("rank importance" + (" (global norm)" if global_norm else
                                      " (per-module norm)"))
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_allocation(allocation_doc: str, out_path: str) -> str:
    """Grouped bars: x = layer, one bar per module kind, height = kept ranks."""
    counts, meta = load_allocation(allocation_doc)
    layers = sorted({layer for layer, _ in counts})
    width = 1.0 / (len(KINDS) + 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.6 * len(layers), 4))
    for i, kind in enumerate(KINDS):
        xs = [l + (i - len(KINDS) / 2) * width for l in layers]
        heights = [counts.get((l, kind), 0) for l in layers]
        ax.bar(xs, heights, width=width, label=kind)
    ax.set_xticks(layers, [f"layer {l}" for l in layers])
    ax.set_ylabel("kept ranks")
    title = "rank allocation"
    if "R_target" in meta:
        title += f" (target {meta['R_target']})"
    ax.set_title(title)
    ax.legend(ncols=len(KINDS), fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_budget_curve(sweep_summary: str, out_path: str,
                        metric: str = "dev_loss") -> str:
    """Per-method loss-vs-budget lines on a log-scaled rank axis."""
    rows = load_sweep(sweep_summary)
    if metric not in ("dev_loss", "test_loss"):
        raise FormatError(f"metric must be dev_loss or test_loss, got {metric!r}")
    methods: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        methods.setdefault(row["method"], []).append((row["total_ranks"], row[metric]))
    for method, points in methods.items():
        if len(points) < 2:
            raise FormatError(f"method {method!r} has {len(points)} point(s); "
                              "need at least 2 for a curve")
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(methods):
        points = sorted(methods[method])
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", label=method)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("total kept ranks")
    ax.set_ylabel(metric)
    ax.set_title("budget sweep")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
