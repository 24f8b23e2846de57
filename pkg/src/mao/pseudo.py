"""Rapid pseudo-labeling of unlabeled images over the new-class vocabulary.

Top-1 zero-shot assignment, no confidence thresholding: every image gets
exactly one pseudo-label.  The ``foundation`` labeler uses the frozen
encoders under the hard template and is therefore independent of any
tuning state; the ``tuned`` labeler uses the current learned prompt and
drifts with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, PromptVector, batched_probs
from .dataset import Dataset
from .errors import CandidateSetError, ConfigError, DatasetError

LABELER_MODES = ("foundation", "tuned")


@dataclass(frozen=True)
class PseudoPair:
    """One pseudo-labeled image: id, assigned new class, top-1 confidence."""

    image_id: int
    pseudo_class_id: int
    confidence: float


def pseudo_label(backbone: Backbone, prompt: PromptVector | None,
                 features: np.ndarray, new_class_ids) -> tuple[int, float]:
    """Top-1 class over the new vocabulary with its confidence."""
    cands = sorted(int(c) for c in new_class_ids)
    if not cands:
        raise CandidateSetError("no new classes to pseudo-label against")
    if prompt is None:
        return backbone.zero_shot_label(features, cands)
    probs = backbone.predict_proba(prompt, features, cands)
    best = probs.max()
    winner = min(c for c, p in zip(cands, probs) if p == best)
    return winner, float(best)


def build_pseudo_pairs(backbone: Backbone, ds: Dataset, image_ids,
                       labeler_mode: str = "foundation",
                       prompt: PromptVector | None = None) -> list[PseudoPair]:
    """Pseudo-label every image id against the new-class vocabulary.

    Output is ordered by image id and carries one pair per input image.
    ``foundation`` ignores ``prompt`` entirely; ``tuned`` requires one.
    """
    if labeler_mode not in LABELER_MODES:
        raise ConfigError(f"labeler_mode must be one of {LABELER_MODES}")
    if labeler_mode == "tuned" and prompt is None:
        raise ConfigError("tuned labeler needs the current prompt")
    ids = sorted(int(i) for i in image_ids)
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate image ids in pseudo-label request")
    new_ids = ds.new_classes()
    if not new_ids:
        raise CandidateSetError("dataset has no new classes")

    feats = np.stack([ds.features_of(i) for i in ids])
    use_prompt = prompt if labeler_mode == "tuned" else None
    probs = batched_probs(backbone, use_prompt, feats, new_ids)
    out: list[PseudoPair] = []
    arr_ids = np.asarray(new_ids)
    for row, img in zip(probs, ids):
        best = row.max()
        winner = int(arr_ids[row == best].min())
        out.append(PseudoPair(image_id=img, pseudo_class_id=winner,
                              confidence=float(best)))
    return out


def pseudo_accuracy(pairs, ds: Dataset) -> float:
    """Fraction of pseudo-labels matching hidden true labels (diagnostic)."""
    pairs = list(pairs)
    if not pairs:
        raise DatasetError("no pseudo pairs to score")
    hits = sum(p.pseudo_class_id == ds.diagnostic_true_label(p.image_id)
               for p in pairs)
    return hits / len(pairs)


def label_histogram(pairs) -> dict[int, int]:
    """Pseudo-label counts per class, for coverage diagnostics."""
    hist: dict[int, int] = {}
    for p in pairs:
        hist[p.pseudo_class_id] = hist.get(p.pseudo_class_id, 0) + 1
    return dict(sorted(hist.items()))
