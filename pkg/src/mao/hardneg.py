"""Hard-negative batch construction over a semantic similarity index.

Base-phase batches are rebuilt around anchor pairs: each anchor queries a
small index of class-level semantic embeddings for its top-K most similar
base classes (itself included, since self-similarity is maximal), and one
training image is drawn per returned class.  The result is a batch of
semantically crowded, hard-to-separate pairs; ``semantic_density`` and
``pca_snapshot`` quantify and visualize that crowding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import ConstraintViolationError, DatasetError, DegenerateInputError
from .numerics import Rng, pca_project_2d


@dataclass(frozen=True)
class SamplerIndex:
    """Class-level semantic embeddings for the base vocabulary."""

    class_ids: tuple[int, ...]
    embeddings: np.ndarray  # (n_base, d_s), row i belongs to class_ids[i]

    def embedding_of(self, class_id: int) -> np.ndarray:
        try:
            row = self.class_ids.index(class_id)
        except ValueError as exc:
            raise DatasetError(f"class {class_id} not in sampler index") from exc
        return self.embeddings[row]


@dataclass(frozen=True)
class HardNegBatch:
    """Expanded mini-batch: b*K (image, class) pairs plus its anchors."""

    pairs: tuple[tuple[int, int], ...]
    anchor_ids: tuple[tuple[int, int], ...]

    def class_ids(self) -> list[int]:
        return [cid for _, cid in self.pairs]


def build_index(ds: Dataset) -> SamplerIndex:
    """Index the base classes' sampler embeddings (new classes stay out)."""
    base = ds.base_classes()
    rows = np.stack([ds.sampler_embed[cid] for cid in base])
    return SamplerIndex(class_ids=tuple(base), embeddings=rows)


def top_k_classes(index: SamplerIndex, query: np.ndarray, k: int) -> list[int]:
    """The K classes most cosine-similar to ``query``, descending.

    Ties are broken toward the lower class id so rankings are total and
    reproducible.
    """
    if not 1 <= k <= len(index.class_ids):
        raise ConstraintViolationError(
            f"k={k} outside [1, {len(index.class_ids)}]")
    q = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(q)
    if not qn > 0:
        raise DegenerateInputError("zero-norm query vector")
    emb = index.embeddings
    sims = (emb @ q) / (np.linalg.norm(emb, axis=1) * qn)
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], index.class_ids[i]))
    return [index.class_ids[i] for i in order[:k]]


def check_batch_constraint(b: int, k: int, n_base: int) -> None:
    """The expansion must not request more classes than exist: b*K <= |C_b|."""
    if b * k > n_base:
        raise ConstraintViolationError(
            f"b*K = {b}*{k} = {b * k} exceeds the {n_base} base classes")


def auto_shrink(b: int, k: int, n_base: int) -> tuple[int, int, list[str]]:
    """Shrink (b, K) until b*K <= |C_b|; returns the log of adjustments.

    The anchor count is halved first (down to 2), then K is halved, and
    only as a last resort b drops to 1.  This reproduces the documented
    small-vocabulary operating points (b=2/K=8, then b=2/K=2).
    """
    if n_base < 1:
        raise ConstraintViolationError("no base classes to sample from")
    log: list[str] = []
    while b * k > n_base:
        if b > 2:
            b //= 2
            log.append(f"auto-shrink: b -> {b} (b*K={b * k} vs {n_base} base classes)")
        elif k > 1:
            k //= 2
            log.append(f"auto-shrink: K -> {k} (b*K={b * k} vs {n_base} base classes)")
        elif b > 1:
            b //= 2
            log.append(f"auto-shrink: b -> {b} (b*K={b * k} vs {n_base} base classes)")
        else:
            raise ConstraintViolationError(
                f"cannot satisfy b*K <= {n_base} even at b=K=1")
    return b, k, log


def expand_batch(index: SamplerIndex, ds: Dataset, anchors, k: int, rng: Rng,
                 pool: dict[int, list[int]] | None = None) -> HardNegBatch:
    """Expand anchor pairs into a hard-negative batch of exactly b*K pairs.

    For each anchor, the anchor class's own embedding queries the index
    for K similar classes and one training image is drawn uniformly per
    returned class.  ``pool`` restricts draws to the few-shot image ids;
    duplicate (image, class) pairs across anchors are kept as sampled.
    """
    anchors = tuple(anchors)
    if not anchors:
        raise ConstraintViolationError("need at least one anchor pair")
    check_batch_constraint(len(anchors), k, len(index.class_ids))
    pairs: list[tuple[int, int]] = []
    for img_id, cid in anchors:
        neighbours = top_k_classes(index, index.embedding_of(cid), k)
        for ncid in neighbours:
            if pool is not None:
                options = pool.get(ncid, [])
            else:
                options = sorted(im.image_id for im in ds.images_of(ncid, "train"))
            if not options:
                raise DatasetError(f"class {ncid} has no training images to draw")
            pick = options[int(rng.integers(0, len(options)))]
            pairs.append((pick, ncid))
    return HardNegBatch(pairs=tuple(pairs), anchor_ids=anchors)


def uniform_batch(pairs, size: int, rng: Rng) -> HardNegBatch:
    """Baseline batch: ``size`` pairs drawn uniformly without replacement."""
    pairs = list(pairs)
    if size < 1 or size > len(pairs):
        raise ConstraintViolationError(
            f"batch size {size} outside [1, {len(pairs)}]")
    chosen = rng.choice(pairs, size=size, replace=False)
    return HardNegBatch(pairs=tuple(chosen), anchor_ids=tuple(chosen))


def semantic_density(batch: HardNegBatch, ds: Dataset) -> float:
    """Mean pairwise cosine similarity of the batch's class embeddings.

    Duplicate classes count as distinct items, so a batch that keeps
    drawing the same class is maximally dense.
    """
    ids = batch.class_ids()
    if len(ids) < 2:
        raise DegenerateInputError("density needs at least two pairs in the batch")
    emb = np.stack([ds.sampler_embed[cid] for cid in ids])
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if not np.all(norms > 0):
        raise DegenerateInputError("zero-norm sampler embedding in batch")
    cos = (emb / norms) @ (emb / norms).T
    upper = cos[np.triu_indices(len(ids), k=1)]
    return float(upper.mean())


def pca_snapshot(batch: HardNegBatch, ds: Dataset) -> list[tuple[int, float, float]]:
    """2-d projection of the batch's class embeddings for plotting.

    Returns ``(class_id, x, y)`` rows, one per batch pair, in batch order.
    """
    ids = batch.class_ids()
    if len(set(ids)) < 3:
        raise DegenerateInputError("snapshot needs at least three distinct classes")
    emb = np.stack([ds.sampler_embed[cid] for cid in ids])
    proj = pca_project_2d(emb)
    return [(cid, float(x), float(y)) for cid, (x, y) in zip(ids, proj)]
