"""Accuracy protocols, harmonic mean, ablation sweeps, and report files.

Base-to-new evaluation restricts candidates to each half's own vocabulary
and combines the two accuracies with their harmonic mean.  Cross-dataset
evaluation reuses a tuned prompt on foreign vocabularies through derived
class rows, without any target-side tuning.  Reports are written as a
CSV with a fixed column order plus a JSON twin; a multi-run batch gains
a mean row carrying both readings of the aggregate harmonic mean.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Backbone, BackboneConfig, PromptVector, batched_probs
from .dataset import Dataset
from .errors import ConfigError, EvalError, VocabularyError
from .numerics import no_grad
from .trainer import (CostMeter, RunState, TuneConfig,
                      measure_inference_throughput, run_two_step)

SWEEP_AXES = ("topK", "shots")


@dataclass(frozen=True)
class RunMetrics:
    """Scores of one finished run, as percentages."""

    mode: str
    seed: int
    base_acc: float
    new_acc: float
    hm: float
    cost: CostMeter = field(default_factory=CostMeter)
    per_target: tuple[float, ...] = ()  # cross-dataset accuracies, if any

    def __post_init__(self) -> None:
        for value in (self.base_acc, self.new_acc, self.hm):
            if not 0.0 <= value <= 100.0:
                raise EvalError(f"accuracy {value} outside [0, 100]")


def harmonic_mean(base: float, new: float) -> float:
    """Combined score 2*base*new/(base+new) of two percentages."""
    if base < 0 or new < 0:
        raise EvalError(f"harmonic mean needs non-negative inputs, "
                        f"got ({base}, {new})")
    if base == 0 and new == 0:
        raise EvalError("harmonic mean of (0, 0) is undefined")
    return 2.0 * base * new / (base + new)


def accuracy(backbone: Backbone, prompt: PromptVector | None, ds: Dataset,
             candidates) -> float:
    """Percentage of test images whose top candidate is their true label.

    Candidates are sorted so argmax ties resolve toward the lower class
    id, matching the zero-shot labeling convention.
    """
    cands = sorted(int(c) for c in candidates)
    if not cands:
        raise EvalError("accuracy needs a non-empty candidate set")
    feats, labels = ds.test_items(cands)
    probs = batched_probs(backbone, prompt, feats, cands)
    arr = np.asarray(cands)
    picks = arr[np.argmax(probs, axis=1)]
    return float((picks == labels).mean() * 100.0)


def _fresh_cost(state: RunState, ds: Dataset) -> CostMeter:
    # copy, not mutate: evaluation must leave the run state untouched
    return CostMeter(
        learnable_params=state.cost.learnable_params,
        wall_seconds_per_epoch=state.cost.wall_seconds_per_epoch,
        peak_tracked_bytes=state.cost.peak_tracked_bytes,
        inference_items_per_second=measure_inference_throughput(state, ds))


def base_to_new_eval(state: RunState, ds: Dataset) -> RunMetrics:
    """Score a run on the split protocol: each half against its own vocabulary."""
    base_ids = ds.base_classes()
    new_ids = ds.new_classes()
    if not base_ids or not new_ids:
        raise EvalError("base-to-new evaluation needs a split dataset")
    prompt = state.backbone.prompt
    base_acc = accuracy(state.backbone, prompt, ds, base_ids)
    new_acc = accuracy(state.backbone, prompt, ds, new_ids)
    return RunMetrics(mode=state.config.mode, seed=state.config.seed,
                      base_acc=base_acc, new_acc=new_acc,
                      hm=harmonic_mean(base_acc, new_acc),
                      cost=_fresh_cost(state, ds))


def cross_dataset_eval(state: RunState, targets) -> list[float]:
    """Zero-target-tuning accuracy of a tuned prompt on foreign datasets.

    Each target's prototypes are projected into the shared token universe
    and scored over the target's full vocabulary.  Feature widths must
    match the source backbone.
    """
    backbone = state.backbone
    out: list[float] = []
    for ds in targets:
        if ds.spec.d_img != backbone.cfg.d_img:
            raise VocabularyError(
                f"target feature width {ds.spec.d_img} incompatible with "
                f"source d_img={backbone.cfg.d_img}")
        ids = ds.class_ids()
        rows = backbone.derive_token_rows(ds.prototypes)
        feats, labels = ds.test_items(ids)
        with no_grad():
            txt = backbone.text_embeddings(backbone.prompt, ids,
                                           token_rows=rows).data
            img = backbone.image_embeddings(feats).data
        txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        img = img / np.linalg.norm(img, axis=1, keepdims=True)
        picks = np.asarray(ids)[np.argmax(img @ txt.T, axis=1)]
        out.append(float((picks == labels).mean() * 100.0))
    return out


# --------------------------------------------------------------------------
# ablation sweeps

@dataclass(frozen=True)
class SweepRow:
    """One sweep point: the swept value, its metric, and the run's cost."""

    value: int
    metric: float
    wall_seconds: float
    events: tuple[str, ...] = ()


def ablate_sweep(axis: str, values, config: TuneConfig, ds: Dataset,
                 backbone_cfg: BackboneConfig | None = None) -> list[SweepRow]:
    """One full tuning run per swept value, everything else held fixed.

    ``topK`` sweeps report base accuracy; ``shots`` sweeps report the
    harmonic mean.  Auto-shrink adjustments surface in each row's events.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = [int(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    if backbone_cfg is None:
        backbone_cfg = BackboneConfig(d_img=ds.spec.d_img, seed=config.seed)
    rows: list[SweepRow] = []
    for value in values:
        cfg = replace(config, top_k=value) if axis == "topK" \
            else replace(config, shots=value)
        t0 = time.perf_counter()
        state = run_two_step(cfg, ds, Backbone(backbone_cfg, ds))
        metrics = base_to_new_eval(state, ds)
        wall = time.perf_counter() - t0
        metric = metrics.base_acc if axis == "topK" else metrics.hm
        rows.append(SweepRow(value=value, metric=metric, wall_seconds=wall,
                             events=tuple(state.events)))
    return rows


def sweep_csv_text(axis: str, rows) -> str:
    header = "value,base_acc,wall_seconds" if axis == "topK" \
        else "value,hm,wall_seconds"
    lines = [header]
    for r in rows:
        lines.append(f"{r.value},{_fmt_pct(r.metric)},{r.wall_seconds:.4f}")
    return "\n".join(lines) + "\n"


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation with average ranks on ties."""
    xs = list(map(float, xs))
    ys = list(map(float, ys))
    if len(xs) != len(ys) or len(xs) < 2:
        raise EvalError("rank correlation needs two sequences of equal length >= 2")

    def ranks(vals):
        order = sorted(range(len(vals)), key=lambda i: vals[i])
        out = [0.0] * len(vals)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and vals[order[j + 1]] == vals[order[i]]:
                j += 1
            avg = (i + j) / 2.0 + 1.0
            for k in range(i, j + 1):
                out[order[k]] = avg
            i = j + 1
        return out

    rx, ry = ranks(xs), ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = sum((a - mx) ** 2 for a in rx) ** 0.5
    dy = sum((b - my) ** 2 for b in ry) ** 0.5
    if dx == 0 or dy == 0:
        return 0.0
    return num / (dx * dy)


# --------------------------------------------------------------------------
# report emission

REPORT_COLUMNS = ("mode", "seed", "base", "new", "hm", "params",
                  "sec_per_epoch", "peak_bytes")


def _fmt_pct(value: float) -> str:
    return f"{value:.2f}"  # two decimals, round-half-even


def _row_cells(m: RunMetrics) -> list[str]:
    return [m.mode, str(m.seed), _fmt_pct(m.base_acc), _fmt_pct(m.new_acc),
            _fmt_pct(m.hm), str(m.cost.learnable_params),
            f"{m.cost.wall_seconds_per_epoch:.4f}",
            str(m.cost.peak_tracked_bytes)]


def _mean_summary(rows) -> dict:
    base = float(np.mean([m.base_acc for m in rows]))
    new = float(np.mean([m.new_acc for m in rows]))
    return {
        "base": base,
        "new": new,
        "hm_of_avg": harmonic_mean(base, new),
        "avg_of_hm": float(np.mean([m.hm for m in rows])),
        "params": int(round(np.mean([m.cost.learnable_params for m in rows]))),
        "sec_per_epoch": float(np.mean([m.cost.wall_seconds_per_epoch
                                        for m in rows])),
        "peak_bytes": int(round(np.mean([m.cost.peak_tracked_bytes
                                         for m in rows]))),
    }


def report_csv_text(rows) -> str:
    rows = list(rows)
    if not rows:
        raise EvalError("report needs at least one run")
    lines = [",".join(REPORT_COLUMNS)]
    for m in rows:
        lines.append(",".join(_row_cells(m)))
    if len(rows) > 1:
        s = _mean_summary(rows)
        lines.append(",".join(["mean", "-", _fmt_pct(s["base"]),
                               _fmt_pct(s["new"]), _fmt_pct(s["hm_of_avg"]),
                               str(s["params"]), f"{s['sec_per_epoch']:.4f}",
                               str(s["peak_bytes"])]))
    return "\n".join(lines) + "\n"


def report_json_text(rows) -> str:
    rows = list(rows)
    if not rows:
        raise EvalError("report needs at least one run")
    payload: dict = {"rows": []}
    for m in rows:
        payload["rows"].append({
            "mode": m.mode,
            "seed": m.seed,
            "base": float(_fmt_pct(m.base_acc)),
            "new": float(_fmt_pct(m.new_acc)),
            "hm": float(_fmt_pct(m.hm)),
            "params": m.cost.learnable_params,
            "sec_per_epoch": round(m.cost.wall_seconds_per_epoch, 4),
            "peak_bytes": m.cost.peak_tracked_bytes,
        })
    if len(rows) > 1:
        s = _mean_summary(rows)
        payload["mean"] = {
            "base": float(_fmt_pct(s["base"])),
            "new": float(_fmt_pct(s["new"])),
            "hm_of_avg": float(_fmt_pct(s["hm_of_avg"])),
            "avg_of_hm": float(_fmt_pct(s["avg_of_hm"])),
            "params": s["params"],
            "sec_per_epoch": round(s["sec_per_epoch"], 4),
            "peak_bytes": s["peak_bytes"],
        }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_report(rows, out_dir) -> tuple:
    """Write report.csv and report.json under ``out_dir``; returns the paths."""
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(report_csv_text(rows), encoding="utf-8")
        json_path.write_text(report_json_text(rows), encoding="utf-8")
    except OSError as exc:
        raise EvalError(f"cannot write report under {out_dir}: {exc}") from exc
    return csv_path, json_path


def parse_report(text: str) -> tuple[list[dict], dict | None]:
    """Read a report.csv back into per-run dicts plus the optional mean row."""
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0] != ",".join(REPORT_COLUMNS):
        raise EvalError("report header does not match the expected columns")
    rows: list[dict] = []
    mean: dict | None = None
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(REPORT_COLUMNS):
            raise EvalError(f"report row has {len(cells)} cells: {ln!r}")
        record = {
            "mode": cells[0],
            "seed": None if cells[1] == "-" else int(cells[1]),
            "base": float(cells[2]),
            "new": float(cells[3]),
            "hm": float(cells[4]),
            "params": int(cells[5]),
            "sec_per_epoch": float(cells[6]),
            "peak_bytes": int(cells[7]),
        }
        if record["mode"] == "mean":
            mean = record
        else:
            rows.append(record)
    return rows, mean
