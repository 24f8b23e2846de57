"""Figure rendering for run artifacts, deterministic SVG only.

Every renderer takes already-computed data and writes one SVG next to
the delimited output it illustrates.  Determinism matters more than
styling here: a fixed hash salt, no timestamps, and text kept as text
make repeated renders byte-identical, so figures fall under the same
reproducibility contract as the CSVs.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg", force=True)

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import EvalError

_SVG_RC = {
    "svg.hashsalt": "fixed-salt",
    "svg.fonttype": "none",
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
}

_PHASE_COLORS = {"base": "tab:blue", "new": "tab:orange"}


def _save(fig, path) -> None:
    try:
        with plt.rc_context(_SVG_RC):
            fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise EvalError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def save_loss_curve(metrics, path) -> None:
    """Per-epoch loss line, colored by tuning phase."""
    metrics = list(metrics)
    if not metrics:
        raise EvalError("loss curve needs at least one epoch record")
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots()
        for phase in ("base", "new"):
            rows = [(r.epoch, r.loss) for r in metrics if r.phase == phase]
            if rows:
                ax.plot([e for e, _ in rows], [l for _, l in rows],
                        marker="o", markersize=3, label=f"{phase} phase",
                        color=_PHASE_COLORS[phase])
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_title("tuning loss")
        ax.legend()
        fig.tight_layout()
    _save(fig, path)


def save_metric_bars(rows, path) -> None:
    """Grouped base/new/hm bars, one group per report row."""
    rows = list(rows)
    if not rows:
        raise EvalError("metric bars need at least one run")
    labels = [f"{m.mode}\nseed {m.seed}" for m in rows]
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots()
        xs = range(len(rows))
        width = 0.27
        for off, (name, pick) in enumerate((
                ("base", lambda m: m.base_acc),
                ("new", lambda m: m.new_acc),
                ("hm", lambda m: m.hm))):
            ax.bar([x + (off - 1) * width for x in xs],
                   [pick(m) for m in rows], width=width, label=name)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.set_title("base-to-new scores")
        ax.legend()
        fig.tight_layout()
    _save(fig, path)


def save_pca_scatter(hard_rows, uniform_rows, path) -> None:
    """Overlayed 2-d projections of hard-negative vs uniform batch classes."""
    if not hard_rows or not uniform_rows:
        raise EvalError("scatter needs points from both batch kinds")
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots()
        ax.scatter([x for _, x, _ in uniform_rows],
                   [y for _, _, y in uniform_rows],
                   marker="o", s=36, alpha=0.55, label="uniform batch")
        ax.scatter([x for _, x, _ in hard_rows],
                   [y for _, _, y in hard_rows],
                   marker="x", s=42, label="hard-negative batch")
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        ax.set_title("batch semantic crowding")
        ax.legend()
        fig.tight_layout()
    _save(fig, path)


def save_sweep_trend(axis: str, rows, path) -> None:
    """Metric-vs-value line for an ablation sweep."""
    rows = list(rows)
    if not rows:
        raise EvalError("sweep trend needs at least one row")
    metric_name = "base accuracy (%)" if axis == "topK" else "harmonic mean (%)"
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots()
        ax.plot([r.value for r in rows], [r.metric for r in rows],
                marker="s", color="tab:green")
        ax.set_xlabel(axis)
        ax.set_ylabel(metric_name)
        ax.set_title(f"{axis} sweep")
        ax.set_xticks([r.value for r in rows])
        fig.tight_layout()
    _save(fig, path)
