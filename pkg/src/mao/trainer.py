"""Two-phase prompt tuning with batch-local candidate-set cross-entropy.

The base phase trains on hard-negative batches, restricting each step's
cross-entropy to the classes actually present in the batch (a dynamic
candidate set that perturbs the target distribution step to step).  The
new phase pseudo-labels unlabeled images over the new vocabulary and
trains on those pairs.  Baseline modes reproduce plain uniform-batch
tuning over the full base vocabulary for comparison.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Backbone, PromptVector, batched_probs
from .dataset import Dataset, FewShotSet, sample_few_shot
from .errors import (CandidateSetError, ConfigError, TrainingError,
                     VocabularyError)
from .hardneg import (HardNegBatch, SamplerIndex, auto_shrink, build_index,
                      expand_batch)
from .numerics import (Param, Rng, Tensor, l2norm_rows, log_softmax_rows,
                       matmul_t, memory_stats, mean_all, mul, reset_peak_memory,
                       take_per_row)
from .pseudo import LABELER_MODES, PseudoPair, build_pseudo_pairs

MODES = ("backbone", "backbone_2x", "mao_base_only", "mao_new_only", "mao_full")


@dataclass(frozen=True)
class CandidateSet:
    """Sorted unique class ids a step's cross-entropy ranges over."""

    class_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        ids = self.class_ids
        if not ids:
            raise CandidateSetError("candidate set is empty")
        if list(ids) != sorted(set(ids)):
            raise CandidateSetError("candidate ids must be sorted and unique")

    @property
    def size(self) -> int:
        return len(self.class_ids)

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError as exc:
            raise CandidateSetError(
                f"label {class_id} outside candidate set {self.class_ids}") from exc


def candidate_set(class_ids) -> CandidateSet:
    """Deduplicate and sort a batch's class ids into a candidate set."""
    return CandidateSet(class_ids=tuple(sorted(set(int(c) for c in class_ids))))


@dataclass(frozen=True)
class TuneConfig:
    epochs_total: int = 20
    lr: float = 0.0035
    b: int = 4
    top_k: int = 8
    shots: int = 16
    mode: str = "mao_full"
    new_ar: bool = True
    labeler_mode: str = "foundation"
    seed: int = 7

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.labeler_mode not in LABELER_MODES:
            raise ConfigError(f"labeler_mode must be one of {LABELER_MODES}")
        if self.epochs_total < 1:
            raise ConfigError("epochs_total must be positive")
        if self.mode in ("mao_full", "mao_base_only", "mao_new_only") \
                and self.epochs_total % 2 != 0:
            raise ConfigError("two-phase modes need an even epochs_total")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.b < 1 or self.top_k < 1:
            raise ConfigError("b and top_k must be positive")
        if self.shots < 1:
            raise ConfigError("shots must be positive")


@dataclass
class CostMeter:
    learnable_params: int = 0
    wall_seconds_per_epoch: float = 0.0
    peak_tracked_bytes: int = 0
    inference_items_per_second: float = 0.0

    def as_dict(self) -> dict:
        return {
            "learnable_params": self.learnable_params,
            "wall_seconds_per_epoch": self.wall_seconds_per_epoch,
            "peak_tracked_bytes": self.peak_tracked_bytes,
            "inference_items_per_second": self.inference_items_per_second,
        }


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    lr: float


@dataclass
class RunState:
    """Everything a finished (or running) tuning run exposes."""

    config: TuneConfig
    backbone: Backbone
    phase: str = "base"
    epoch: int = 0
    metrics: list[EpochRecord] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    step_candidate_sets: list[tuple[int, ...]] = field(default_factory=list)
    cost: CostMeter = field(default_factory=CostMeter)
    few_shot: FewShotSet | None = None
    pseudo_pairs: list[PseudoPair] = field(default_factory=list)
    phase_switches: int = 0

    @property
    def prompt(self) -> PromptVector:
        return self.backbone.prompt

    def log_event(self, message: str) -> None:
        self.events.append(message)


# --------------------------------------------------------------------------
# losses

def _pairs_to_arrays(ds: Dataset, pairs) -> tuple[np.ndarray, list[int]]:
    feats = np.stack([ds.features_of(img) for img, _ in pairs])
    labels = [cid for _, cid in pairs]
    return feats, labels


def _restricted_ce(backbone: Backbone, prompt: PromptVector,
                   features: np.ndarray, labels, cset: CandidateSet) -> Tensor:
    """Mean cross-entropy of cosine/temperature probabilities over ``cset``.

    Text embeddings for the candidate classes are computed once and
    row-normalized; every label must be a member of the candidate set.
    """
    targets = [cset.index_of(c) for c in labels]
    txt = l2norm_rows(backbone.text_embeddings(prompt, cset.class_ids))
    img = l2norm_rows(backbone.image_embeddings(features))
    logits = mul(matmul_t(img, txt), 1.0 / backbone.cfg.tau)
    picked = take_per_row(log_softmax_rows(logits), targets)
    return mul(mean_all(picked), -1.0)


def base_loss(backbone: Backbone, prompt: PromptVector, ds: Dataset,
              batch: HardNegBatch, cset: CandidateSet) -> Tensor:
    """Base-phase loss: candidate-restricted CE on a hard-negative batch."""
    feats, labels = _pairs_to_arrays(ds, batch.pairs)
    return _restricted_ce(backbone, prompt, feats, labels, cset)


def new_loss(backbone: Backbone, prompt: PromptVector, ds: Dataset,
             pairs, restrict_to_new: bool = True) -> Tensor:
    """New-phase loss: CE of pseudo-labeled pairs.

    With ``restrict_to_new`` the candidate vocabulary is exactly the new
    classes; switching it off widens the vocabulary to base plus new,
    removing the candidate-set restriction arm.
    """
    pairs = list(pairs)
    if not pairs:
        raise TrainingError("no pseudo-labeled pairs to train on")
    new_ids = ds.new_classes()
    vocab = new_ids if restrict_to_new else sorted(set(ds.base_classes()) | set(new_ids))
    cset = candidate_set(vocab)
    feats = np.stack([ds.features_of(p.image_id) for p in pairs])
    labels = [p.pseudo_class_id for p in pairs]
    for c in labels:
        if c not in new_ids:
            raise VocabularyError(f"pseudo-label {c} is not a new class")
    return _restricted_ce(backbone, prompt, feats, labels, cset)


def sgd_step(params: list[Param], lr: float) -> None:
    """One plain SGD update; aborts on non-finite gradients."""
    if not lr > 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    for p in params:
        if not p.trainable:
            continue
        g = p.value.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient; tuning aborted")
        p.value.data -= lr * g
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# schedule

def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _base_phase_mao(state: RunState, ds: Dataset, index: SamplerIndex,
                    pool: dict[int, list[int]], b_eff: int, k_eff: int,
                    epochs: int, rng: Rng, epoch_offset: int) -> int:
    cfg = state.config
    pairs = list(state.few_shot.pairs)
    backbone = state.backbone
    epoch = epoch_offset
    for e in range(epochs):
        erng = rng.substream(f"base-epoch-{e}")
        order = erng.substream("anchor-order").permutation(len(pairs))
        draw = erng.substream("expansion")
        losses = []
        for step, chunk in enumerate(_chunks(order, b_eff)):
            anchors = [pairs[i] for i in chunk]
            batch = expand_batch(index, ds, anchors, k_eff,
                                 draw.substream(f"step-{step}"), pool)
            cset = candidate_set(batch.class_ids())
            state.step_candidate_sets.append(cset.class_ids)
            loss = base_loss(backbone, backbone.prompt, ds, batch, cset)
            loss.backward()
            sgd_step(backbone.trainable_params(), cfg.lr)
            losses.append(loss.item())
        epoch += 1
        state.epoch = epoch
        state.metrics.append(EpochRecord(epoch, "base", float(np.mean(losses)), cfg.lr))
    return epoch


def _base_phase_uniform(state: RunState, ds: Dataset, batch_size: int,
                        epochs: int, rng: Rng, epoch_offset: int) -> int:
    cfg = state.config
    pairs = list(state.few_shot.pairs)
    backbone = state.backbone
    full_cset = candidate_set(ds.base_classes())
    batch_size = min(batch_size, len(pairs))
    epoch = epoch_offset
    for e in range(epochs):
        order = rng.substream(f"uniform-epoch-{e}").permutation(len(pairs))
        losses = []
        for chunk in _chunks(order, batch_size):
            chosen = [pairs[i] for i in chunk]
            feats, labels = _pairs_to_arrays(ds, chosen)
            loss = _restricted_ce(backbone, backbone.prompt, feats, labels, full_cset)
            loss.backward()
            sgd_step(backbone.trainable_params(), cfg.lr)
            losses.append(loss.item())
        epoch += 1
        state.epoch = epoch
        state.metrics.append(EpochRecord(epoch, "base", float(np.mean(losses)), cfg.lr))
    return epoch


def _new_phase(state: RunState, ds: Dataset, batch_size: int, epochs: int,
               rng: Rng, epoch_offset: int) -> int:
    cfg = state.config
    backbone = state.backbone
    epoch = epoch_offset
    pseudo: list[PseudoPair] = []
    for e in range(epochs):
        if e == 0 or cfg.labeler_mode == "tuned":
            prompt = backbone.prompt if cfg.labeler_mode == "tuned" else None
            pseudo = build_pseudo_pairs(backbone, ds, state.few_shot.unlabeled,
                                        labeler_mode=cfg.labeler_mode, prompt=prompt)
            state.pseudo_pairs = pseudo
        order = rng.substream(f"new-epoch-{e}").permutation(len(pseudo))
        losses = []
        size = min(batch_size, len(pseudo))
        for chunk in _chunks(order, size):
            chosen = [pseudo[i] for i in chunk]
            loss = new_loss(backbone, backbone.prompt, ds, chosen,
                            restrict_to_new=cfg.new_ar)
            loss.backward()
            sgd_step(backbone.trainable_params(), cfg.lr)
            losses.append(loss.item())
        epoch += 1
        state.epoch = epoch
        state.metrics.append(EpochRecord(epoch, "new", float(np.mean(losses)), cfg.lr))
    return epoch


def run_two_step(config: TuneConfig, ds: Dataset, backbone: Backbone) -> RunState:
    """Run one tuning schedule and return its final state.

    ``mao_full`` spends half the epochs on hard-negative base tuning and
    half on pseudo-labeled new-class tuning; the prompt persists across
    the single phase switch.  ``backbone`` (and its doubled-epoch twin)
    trains on uniform batches over the full base vocabulary.  The two
    ``mao_*_only`` modes run just their half of the schedule.
    """
    state = RunState(config=config, backbone=backbone)
    rng = Rng(config.seed).substream("tune")
    state.few_shot = sample_few_shot(ds, config.shots, rng.substream("few-shot"))
    if config.mode != "mao_new_only" and not state.few_shot.pairs:
        raise TrainingError("no base few-shot pairs to train on")

    n_base = len(ds.base_classes())
    b_eff, k_eff, shrink_log = auto_shrink(config.b, config.top_k, n_base)
    for line in shrink_log:
        state.log_event(line)
    batch_size = config.b * config.top_k  # uniform-mode batch, kept unshrunk

    pool: dict[int, list[int]] = {}
    for img, cid in state.few_shot.pairs:
        pool.setdefault(cid, []).append(img)
    for cid in pool:
        pool[cid].sort()

    reset_peak_memory()
    t0 = time.perf_counter()
    half = config.epochs_total // 2
    epoch = 0
    if config.mode == "backbone":
        epoch = _base_phase_uniform(state, ds, batch_size, config.epochs_total,
                                    rng, epoch)
    elif config.mode == "backbone_2x":
        epoch = _base_phase_uniform(state, ds, batch_size, 2 * config.epochs_total,
                                    rng, epoch)
    elif config.mode == "mao_base_only":
        index = build_index(ds)
        epoch = _base_phase_mao(state, ds, index, pool, b_eff, k_eff, half,
                                rng, epoch)
    elif config.mode == "mao_new_only":
        state.phase = "new"
        state.phase_switches += 1
        epoch = _new_phase(state, ds, b_eff * k_eff, half, rng, epoch)
    else:  # mao_full
        index = build_index(ds)
        epoch = _base_phase_mao(state, ds, index, pool, b_eff, k_eff, half,
                                rng, epoch)
        state.phase = "new"
        state.phase_switches += 1
        state.log_event(f"phase switch: base -> new after epoch {epoch}")
        epoch = _new_phase(state, ds, b_eff * k_eff, half, rng, epoch)
    elapsed = time.perf_counter() - t0

    if state.phase_switches > 1:
        raise TrainingError("phase switched more than once")
    n_epochs = max(1, len(state.metrics))
    state.cost.learnable_params = backbone.param_count()
    state.cost.wall_seconds_per_epoch = elapsed / n_epochs
    state.cost.peak_tracked_bytes = memory_stats()[1]
    return state


def measure_inference_throughput(state: RunState, ds: Dataset) -> float:
    """Items per second of the candidate-scoring test pass."""
    cands = ds.base_classes() if ds.base_classes() else ds.class_ids()
    feats, _ = ds.test_items(cands)
    t0 = time.perf_counter()
    batched_probs(state.backbone, state.backbone.prompt, feats, cands)
    dt = time.perf_counter() - t0
    return len(feats) / dt if dt > 0 else float("inf")


def cost_meter(state: RunState, ds: Dataset) -> CostMeter:
    """Finalize the run's cost: params, time, peak bytes, throughput."""
    state.cost.inference_items_per_second = measure_inference_throughput(state, ds)
    return state.cost


# --------------------------------------------------------------------------
# run directory artifacts

def metrics_csv_text(state: RunState) -> str:
    lines = ["epoch,phase,loss,lr"]
    for r in state.metrics:
        lines.append(f"{r.epoch},{r.phase},{r.loss!r},{r.lr!r}")
    return "\n".join(lines) + "\n"


def prompt_tensor_text(state: RunState) -> str:
    """Text serialization of the learned prompt tensors (dims then rows)."""
    chunks = []
    tok = state.backbone.prompt.tokens.data
    chunks.append("tokens " + " ".join(str(s) for s in tok.shape))
    for row in tok:
        chunks.append(" ".join(repr(float(v)) for v in row))
    if state.backbone.visual is not None:
        pre = state.backbone.visual.prefix.data
        chunks.append("visual_prefix " + " ".join(str(s) for s in pre.shape))
        chunks.append(" ".join(repr(float(v)) for v in pre))
    return "\n".join(chunks) + "\n"


def parse_prompt_tensor(text: str) -> dict[str, np.ndarray]:
    """Parse the prompt tensor file back into named arrays."""
    out: dict[str, np.ndarray] = {}
    lines = [ln for ln in text.split("\n") if ln.strip()]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        name, dims = head[0], [int(v) for v in head[1:]]
        i += 1
        if len(dims) == 1:
            out[name] = np.array([float(v) for v in lines[i].split()])
            i += 1
        else:
            rows = []
            for _ in range(dims[0]):
                rows.append([float(v) for v in lines[i].split()])
                i += 1
            out[name] = np.array(rows)
        if out[name].shape != tuple(dims):
            raise TrainingError(f"prompt tensor {name} has shape {out[name].shape}, "
                                f"header says {tuple(dims)}")
    return out


def write_run_dir(state: RunState, run_dir, config_snapshot: str) -> None:
    """Write the run directory artifacts: snapshot, metrics, prompt, cost."""
    run_dir.mkdir(parents=True, exist_ok=False)
    (run_dir / "config.snapshot").write_text(config_snapshot, encoding="utf-8")
    (run_dir / "metrics.csv").write_text(metrics_csv_text(state), encoding="utf-8")
    (run_dir / "final_prompt.tensor").write_text(prompt_tensor_text(state),
                                                 encoding="utf-8")
    (run_dir / "cost.json").write_text(
        json.dumps(state.cost.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    if state.events:
        (run_dir / "events.log").write_text("\n".join(state.events) + "\n",
                                            encoding="utf-8")
