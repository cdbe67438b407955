"""Heatmap rendering for the type-grid safety reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import rollout  # noqa: E402


def heatmap_payload(cells, type_values) -> dict:
    models = sorted({c.model for c in cells})
    return {
        "theta_values": [float(v) for v in type_values],
        "models": {m: rollout.cells_to_matrix(cells, m, type_values).tolist()
                   for m in models},
    }


def render_heatmap(payload: dict, out_png) -> Path:
    values = payload["theta_values"]
    models = list(payload["models"])
    fig, axes = plt.subplots(1, max(1, len(models)),
                             figsize=(4.2 * max(1, len(models)), 3.8),
                             squeeze=False)
    vmax = max(0.01, max(np.nanmax(np.asarray(payload["models"][m], dtype=float))
                         for m in models)) if models else 1.0
    for ax, model in zip(axes[0], models):
        mat = np.asarray(payload["models"][model], dtype=float)
        im = ax.imshow(100.0 * mat, origin="lower", cmap="RdYlGn_r",
                       vmin=0.0, vmax=100.0 * vmax)
        ax.set_xticks(range(len(values)), [f"{v:g}" for v in values])
        ax.set_yticks(range(len(values)), [f"{v:g}" for v in values])
        ax.set_xlabel("type of player 2")
        ax.set_ylabel("type of player 1")
        ax.set_title(model)
        for i in range(len(values)):
            for j in range(len(values)):
                if np.isfinite(mat[i, j]):
                    ax.text(j, i, f"{100 * mat[i, j]:.1f}", ha="center",
                            va="center", fontsize=8)
        fig.colorbar(im, ax=ax, label="collision %")
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=130)
    plt.close(fig)
    return out


def write_matrix_json(payload: dict, out_json) -> Path:
    out = Path(out_json)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return out
