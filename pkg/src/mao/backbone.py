"""Frozen dual encoders with a learnable prompt, pre-aligned by construction.

The text tower pools context rows (the learned prompt, or a fixed hard
template) with a class-token row and maps the pooled vector through a
two-layer tanh MLP; the image tower maps raw image features through a
tanh MLP of the same width.  Pooling is attention-weighted: each class
carries a frozen key vector, and context rows are averaged under weights
set by key-context affinity, so the same context shifts different classes
differently.

Alignment standing in for large-scale pretraining is built structurally:
class keys are a fixed seeded projection of visual prototypes, the image
tower's first layer is tied to the text tower's through that projection,
and each class token absorbs the hard template's attended contribution,
so encoding a class under the hard template reproduces (up to float
rounding) the image embedding of its prototype.  Zero-shot labeling is
therefore genuinely informative, which is what the pseudo-labeling phase
relies on.  A learned prompt can in principle recover the hard template
exactly, but a few-shot fit only pins down how the prompt attends to the
tuned classes, which is what leaves room between base-only tuning and
tuning that also sees the new half.

Only the prompt rows (and, for the joint variant, the visual prefix) are
trainable; everything else is frozen and never receives gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import CandidateSetError, ConfigError, VocabularyError
from .numerics import (
    Param,
    Rng,
    Tensor,
    matmul,
    matmul_t,
    no_grad,
    reshape,
    softmax_rows,
    softmax_temp,
    tanh,
)

# Weight scale conventions.  First-layer pre-activations land around unit
# scale for unit-norm prototypes, keeping tanh in its curved regime; the
# key projection scale compensates for the first-layer gain so that the
# calibration survives gain changes.  The hard template scale sets how far
# a zero-initialized prompt starts from the template it can learn to
# imitate, the attention temperature sets how differently classes weight
# the same context rows, and the context gain sets how heavily the
# attended context counts against the class token in pooling (which also
# scales prompt gradients).
_ACT_SCALE = 0.9
_W1T_GAIN = 1.0
_HARD_SCALE = 0.3
_ATT_TAU = 0.25
_CTX_GAIN = 8.0
_B1_SCALE = 0.1
_B2_SCALE = 0.05
PROMPT_INIT_SCALE = 0.02

VARIANTS = ("text", "joint")


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "text"
    L: int = 4
    d_token: int = 32
    d: int = 32
    d_img: int = 32
    tau: float = 0.01
    seed: int = 7

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if min(self.L, self.d_token, self.d, self.d_img) < 1:
            raise ConfigError("all backbone dimensions must be positive")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    @property
    def hidden(self) -> int:
        return self.d_token


class PromptVector:
    """The learned prompt: L rows of d_token values, the trainable state."""

    def __init__(self, cfg: BackboneConfig, rng: Rng):
        self.tokens = Param(rng.normal((cfg.L, cfg.d_token), scale=PROMPT_INIT_SCALE))

    @classmethod
    def from_rows(cls, cfg: BackboneConfig, rows: np.ndarray) -> "PromptVector":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (cfg.L, cfg.d_token):
            raise ConfigError(f"prompt rows must have shape {(cfg.L, cfg.d_token)}")
        out = cls.__new__(cls)
        out.tokens = Param(np.array(rows))
        return out


class VisualPrompt:
    """Learnable image-side prefix; only the joint variant carries one."""

    def __init__(self, cfg: BackboneConfig, rng: Rng):
        self.prefix = Param(rng.normal((cfg.d_img,), scale=PROMPT_INIT_SCALE))


def _softmax_np(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Backbone:
    """Frozen dual encoder attached to one vocabulary of class prototypes."""

    def __init__(self, cfg: BackboneConfig, ds: Dataset, prompt_rng: Rng | None = None):
        if ds.spec.d_img != cfg.d_img:
            raise ConfigError(
                f"backbone d_img={cfg.d_img} does not match dataset d_img={ds.spec.d_img}")
        self.cfg = cfg
        self.class_ids = ds.class_ids()
        self._row_of = {cid: i for i, cid in enumerate(self.class_ids)}
        self._att_tau = _ATT_TAU
        self._ctx_gain = _CTX_GAIN

        rng = Rng(cfg.seed).substream("backbone")
        L, dt, hid, d, di = cfg.L, cfg.d_token, cfg.hidden, cfg.d, cfg.d_img
        w1t = rng.substream("text-w1").normal((dt, hid), scale=_W1T_GAIN / np.sqrt(dt))
        token_map = rng.substream("token-map").normal(
            (di, dt), scale=_ACT_SCALE / _W1T_GAIN)
        att = rng.substream("attention").normal((dt, dt), scale=1.0 / np.sqrt(dt))
        hard = rng.substream("hard-template").normal((L, dt), scale=_HARD_SCALE)
        b1 = rng.substream("bias-1").normal((hid,), scale=_B1_SCALE)
        w2 = rng.substream("shared-w2").normal((hid, d), scale=1.0 / np.sqrt(hid))
        b2 = rng.substream("bias-2").normal((d,), scale=_B2_SCALE)

        frz = lambda a: Param(a, trainable=False)
        self.token_map = frz(token_map)
        self.attention = frz(att)
        self.hard_template = frz(hard)
        self.w1_text = frz(w1t)
        self.b1_text = frz(b1)
        # Tie the image tower's first layer to the text tower's through the
        # key projection: encoding class c under the hard template then
        # equals encoding its prototype, the pretrained-alignment stand-in.
        self.w1_img = frz(token_map @ w1t)
        self.b1_img = frz(np.array(b1))
        self.w2 = frz(w2)
        self.b2 = frz(b2)
        self.class_rows = frz(self.derive_token_rows(ds.prototypes))

        prompt_rng = prompt_rng if prompt_rng is not None else Rng(cfg.seed).substream("prompt-init")
        self.prompt = PromptVector(cfg, prompt_rng.substream("text-prompt"))
        self.visual = VisualPrompt(cfg, prompt_rng.substream("visual-prompt")) \
            if cfg.variant == "joint" else None

    # -- helpers ---------------------------------------------------------

    def trainable_params(self) -> list[Param]:
        params = [self.prompt.tokens]
        if self.visual is not None:
            params.append(self.visual.prefix)
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.trainable_params())

    def frozen_snapshot(self) -> dict[str, np.ndarray]:
        names = ("token_map", "attention", "hard_template", "w1_text", "b1_text",
                 "w1_img", "b1_img", "w2", "b2", "class_rows")
        return {n: np.array(getattr(self, n).data) for n in names}

    def frozen_params(self) -> list[Param]:
        return [self.token_map, self.attention, self.hard_template, self.w1_text,
                self.b1_text, self.w1_img, self.b1_img, self.w2, self.b2,
                self.class_rows]

    def _attend_scores(self, keys: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        q = keys @ self.attention.data
        return (q @ ctx.T) / (np.sqrt(self.cfg.d_token) * self._att_tau)

    def derive_token_rows(self, prototypes: np.ndarray) -> np.ndarray:
        """Class rows for an arbitrary prototype table (shared token universe).

        Returns an (n, 2, d_token) stack: ``rows[:, 0]`` are token rows
        whose hard-template encoding reproduces the prototype's key, and
        ``rows[:, 1]`` are the attention keys themselves.
        """
        prototypes = np.asarray(prototypes, dtype=np.float64)
        if prototypes.ndim != 2 or prototypes.shape[1] != self.cfg.d_img:
            raise VocabularyError(
                f"prototype width {prototypes.shape} incompatible with d_img={self.cfg.d_img}")
        L = self.cfg.L
        keys = prototypes @ self.token_map.data
        hard = self.hard_template.data
        alpha = _softmax_np(self._attend_scores(keys, hard))
        tokens = (L + 1) * keys - self._ctx_gain * L * (alpha @ hard)
        return np.stack([tokens, keys], axis=1)

    def _class_rows(self, class_ids) -> np.ndarray:
        rows = []
        for cid in class_ids:
            if cid not in self._row_of:
                raise VocabularyError(f"class id {cid} not in vocabulary")
            rows.append(self._row_of[cid])
        return self.class_rows.data[rows]

    # -- encoders ----------------------------------------------------------

    def text_embeddings(self, prompt: PromptVector | None, class_ids,
                        token_rows: np.ndarray | None = None) -> Tensor:
        """Embed classes under a prompt (None selects the hard template).

        Returns a (len(class_ids), d) tensor, differentiable with respect
        to the prompt rows.  ``token_rows`` overrides the attached class
        rows for cross-vocabulary use (shape as from derive_token_rows).
        """
        if token_rows is None:
            token_rows = self._class_rows(class_ids)
        token_rows = np.asarray(token_rows, dtype=np.float64)
        if token_rows.ndim != 3 or token_rows.shape[1:] != (2, self.cfg.d_token):
            raise VocabularyError(
                f"class rows must be (n, 2, {self.cfg.d_token}), got {token_rows.shape}")
        tokens, keys = token_rows[:, 0], token_rows[:, 1]
        L = self.cfg.L
        gL = self._ctx_gain * L
        if prompt is None:
            hard = self.hard_template.data
            alpha = _softmax_np(self._attend_scores(keys, hard))
            pooled = Tensor((tokens + gL * (alpha @ hard)) * (1.0 / (L + 1)))
        else:
            ctx = prompt.tokens.value
            q = keys @ self.attention.data
            scale = 1.0 / (np.sqrt(self.cfg.d_token) * self._att_tau)
            scores = matmul_t(Tensor(q), ctx) * scale
            alpha = softmax_rows(scores)
            mix = matmul(alpha, ctx) * gL
            pooled = (Tensor(tokens) + mix) * (1.0 / (L + 1))
        h = tanh(matmul(pooled, self.w1_text.value) + self.b1_text.value)
        return matmul(h, self.w2.value) + self.b2.value

    def image_embeddings(self, features: np.ndarray, use_prompt: bool = True) -> Tensor:
        """Embed a stack of image feature rows; (n, d) tensor.

        The joint variant averages its learnable prefix with the features
        unless ``use_prompt`` is false (the foundation zero-shot path).
        """
        feats = np.asarray(features, dtype=np.float64)
        squeeze = feats.ndim == 1
        if squeeze:
            feats = feats[None, :]
        if feats.shape[1] != self.cfg.d_img:
            raise VocabularyError(
                f"feature width {feats.shape[1]} does not match d_img={self.cfg.d_img}")
        x = Tensor(feats)
        if self.visual is not None and use_prompt:
            x = (x + self.visual.prefix.value) * 0.5
        h = tanh(matmul(x, self.w1_img.value) + self.b1_img.value)
        out = matmul(h, self.w2.value) + self.b2.value
        return reshape(out, (self.cfg.d,)) if squeeze else out

    def encode_text(self, prompt: PromptVector | None, class_id: int) -> Tensor:
        """Single-class text embedding, differentiable w.r.t. the prompt."""
        emb = self.text_embeddings(prompt, [class_id])
        return reshape(emb, (self.cfg.d,))

    def encode_image(self, features: np.ndarray) -> Tensor:
        return self.image_embeddings(features)

    # -- inference ---------------------------------------------------------

    @staticmethod
    def probs_from_embeddings(image_emb: np.ndarray, text_embs: np.ndarray,
                              tau: float) -> np.ndarray:
        """Candidate probabilities from raw embeddings (cosine then softmax)."""
        cos = _cosine_matrix(np.atleast_2d(image_emb), text_embs)[0]
        return softmax_temp(Tensor(cos), tau).data

    def _validate_candidates(self, candidates) -> list[int]:
        cands = [int(c) for c in candidates]
        if not cands:
            raise CandidateSetError("candidate set is empty")
        if len(set(cands)) != len(cands):
            raise CandidateSetError(f"duplicate candidate ids in {cands}")
        return cands

    def predict_proba(self, prompt: PromptVector | None, features: np.ndarray,
                      candidates) -> np.ndarray:
        """Probability row over candidates for one image.

        ``prompt=None`` is the foundation path: hard template on the text
        side and no visual prefix on the image side.
        """
        cands = self._validate_candidates(candidates)
        with no_grad():
            txt = self.text_embeddings(prompt, cands).data
            img = self.image_embeddings(features, use_prompt=prompt is not None).data
        return self.probs_from_embeddings(img, txt, self.cfg.tau)

    def zero_shot_label(self, features: np.ndarray, candidates) -> tuple[int, float]:
        """Foundation top-1 label and its confidence; ties pick the lowest id."""
        cands = self._validate_candidates(candidates)
        probs = self.predict_proba(None, features, cands)
        best = probs.max()
        winner = min(c for c, p in zip(cands, probs) if p == best)
        return winner, float(best)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


def batched_probs(backbone: Backbone, prompt: PromptVector | None,
                  features: np.ndarray, candidates) -> np.ndarray:
    """Probability matrix (n_images, n_candidates) for an image stack."""
    cands = backbone._validate_candidates(candidates)
    with no_grad():
        txt = backbone.text_embeddings(prompt, cands).data
        img = backbone.image_embeddings(features, use_prompt=prompt is not None).data
    cos = _cosine_matrix(img, txt)
    z = cos / backbone.cfg.tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)