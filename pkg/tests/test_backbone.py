import numpy as np
import pytest

from mao.backbone import (
    Backbone,
    BackboneConfig,
    PromptVector,
    batched_probs,
)
from mao.dataset import DEFAULT_SPEC, DatasetSpec, generate, split_base_new
from mao.errors import CandidateSetError, ConfigError, VocabularyError
from mao.numerics import Rng


SMALL_SPEC = DatasetSpec(n_super=4, classes_per_super=2, sigma_img=0.0,
                         n_train_per_class=2, n_test_per_class=2, seed=11)


@pytest.fixture(scope="module")
def small_ds():
    return split_base_new(generate(SMALL_SPEC))


@pytest.fixture(scope="module")
def small_bb(small_ds):
    return Backbone(BackboneConfig(seed=SMALL_SPEC.seed), small_ds)


@pytest.fixture(scope="module")
def default_ds():
    return split_base_new(generate(DEFAULT_SPEC))


@pytest.fixture(scope="module")
def default_bb(default_ds):
    return Backbone(BackboneConfig(), default_ds)


def text_forward_oracle(bb, ctx, rows):
    """Recompute the text tower with plain numpy from the frozen weights."""
    snap = bb.frozen_snapshot()
    tokens, keys = rows[:, 0], rows[:, 1]
    L = bb.cfg.L
    q = keys @ snap["attention"]
    scores = (q @ ctx.T) / (np.sqrt(bb.cfg.d_token) * bb._att_tau)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    alpha = e / e.sum(axis=1, keepdims=True)
    pooled = (tokens + bb._ctx_gain * L * (alpha @ ctx)) / (L + 1)
    h = np.tanh(pooled @ snap["w1_text"] + snap["b1_text"])
    return h @ snap["w2"] + snap["b2"]


def image_forward_oracle(bb, feats):
    snap = bb.frozen_snapshot()
    h = np.tanh(np.atleast_2d(feats) @ snap["w1_img"] + snap["b1_img"])
    return h @ snap["w2"] + snap["b2"]


# -- construction and determinism -------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(variant="conv")
    with pytest.raises(ConfigError):
        BackboneConfig(L=0)
    with pytest.raises(ConfigError):
        BackboneConfig(tau=0.0)


def test_dataset_dim_mismatch_rejected(small_ds):
    with pytest.raises(ConfigError):
        Backbone(BackboneConfig(d_img=64), small_ds)


def test_frozen_weights_deterministic(small_ds):
    a = Backbone(BackboneConfig(seed=11), small_ds)
    b = Backbone(BackboneConfig(seed=11), split_base_new(generate(SMALL_SPEC)))
    for name, arr in a.frozen_snapshot().items():
        assert np.array_equal(arr, b.frozen_snapshot()[name]), name
    assert np.array_equal(a.prompt.tokens.data, b.prompt.tokens.data)


def test_different_seed_different_weights(small_ds):
    a = Backbone(BackboneConfig(seed=11), small_ds)
    b = Backbone(BackboneConfig(seed=12), small_ds)
    assert not np.array_equal(a.frozen_snapshot()["w2"], b.frozen_snapshot()["w2"])


def test_param_count_text_variant(default_bb):
    assert default_bb.param_count() == 4 * 32


def test_param_count_joint_variant():
    spec = DatasetSpec(n_super=2, classes_per_super=2, d_img=64, seed=5,
                       n_train_per_class=2, n_test_per_class=2)
    ds = split_base_new(generate(spec))
    bb = Backbone(BackboneConfig(variant="joint", d_img=64, seed=5), ds)
    assert bb.param_count() == 4 * 32 + 64
    assert len(bb.trainable_params()) == 2


def test_prompt_rows_validation():
    cfg = BackboneConfig()
    with pytest.raises(ConfigError):
        PromptVector.from_rows(cfg, np.zeros((3, 32)))


# -- forward oracles ---------------------------------------------------------


def test_text_forward_matches_oracle(small_bb, small_ds):
    ids = small_ds.class_ids()
    ctx = np.array(small_bb.prompt.tokens.data)
    got = small_bb.text_embeddings(small_bb.prompt, ids).data
    want = text_forward_oracle(small_bb, ctx, small_bb.class_rows.data)
    assert np.max(np.abs(got - want)) < 1e-12


def test_hard_template_forward_matches_oracle(small_bb, small_ds):
    ids = small_ds.class_ids()
    got = small_bb.text_embeddings(None, ids).data
    want = text_forward_oracle(small_bb, small_bb.hard_template.data,
                               small_bb.class_rows.data)
    assert np.max(np.abs(got - want)) < 1e-12


def test_image_forward_matches_oracle(small_bb, small_ds):
    feats = small_ds.prototypes[:3]
    got = small_bb.image_embeddings(feats).data
    assert np.max(np.abs(got - image_forward_oracle(small_bb, feats))) < 1e-12


def test_hard_template_and_prompt_differ_at_init(small_bb, small_ds):
    ids = small_ds.class_ids()
    hard = small_bb.text_embeddings(None, ids).data
    learned = small_bb.text_embeddings(small_bb.prompt, ids).data
    assert not np.allclose(hard, learned, atol=1e-6)


def test_prompt_can_reproduce_hard_template(small_bb, small_ds):
    ids = small_ds.class_ids()
    mimic = PromptVector.from_rows(small_bb.cfg, small_bb.hard_template.data)
    got = small_bb.text_embeddings(mimic, ids).data
    want = small_bb.text_embeddings(None, ids).data
    assert np.max(np.abs(got - want)) < 1e-12


def test_encode_text_matches_batch(small_bb, small_ds):
    cid = small_ds.class_ids()[2]
    single = small_bb.encode_text(None, cid).data
    batch = small_bb.text_embeddings(None, [cid]).data[0]
    assert np.array_equal(single, batch)


def test_single_image_matches_stack(small_bb, small_ds):
    f = small_ds.prototypes[1]
    single = small_bb.encode_image(f).data
    stack = small_bb.image_embeddings(ds_feats := f[None, :]).data[0]
    assert single.shape == (small_bb.cfg.d,)
    assert np.array_equal(single, stack)
    assert ds_feats.shape == (1, small_bb.cfg.d_img)


# -- structural alignment ----------------------------------------------------


def test_hard_template_aligns_with_image_tower(default_bb, default_ds):
    txt = default_bb.text_embeddings(None, default_ds.class_ids()).data
    img = default_bb.image_embeddings(default_ds.prototypes, use_prompt=False).data
    assert np.max(np.abs(txt - img)) < 1e-12


def test_alignment_holds_for_foreign_prototypes(default_bb):
    protos = Rng(99).substream("foreign").normal((6, 32))
    rows = default_bb.derive_token_rows(protos)
    txt = default_bb.text_embeddings(None, list(range(6)), token_rows=rows).data
    img = default_bb.image_embeddings(protos, use_prompt=False).data
    assert np.max(np.abs(txt - img)) < 1e-12


def test_noise_free_zero_shot_is_perfect(small_bb, small_ds):
    ids = small_ds.class_ids()
    for im in small_ds.images:
        label, conf = small_bb.zero_shot_label(im.features, ids)
        assert label == im.class_id
        assert conf > 0.99


def test_derive_token_rows_rejects_wrong_width(default_bb):
    with pytest.raises(VocabularyError):
        default_bb.derive_token_rows(np.zeros((4, 16)))


def test_token_rows_shape_validated(default_bb):
    with pytest.raises(VocabularyError):
        default_bb.text_embeddings(None, [0, 1], token_rows=np.zeros((2, 32)))


# -- inference ---------------------------------------------------------------


def test_unknown_class_rejected(small_bb):
    with pytest.raises(VocabularyError):
        small_bb.text_embeddings(None, [0, 999])


def test_empty_candidates_rejected(small_bb, small_ds):
    with pytest.raises(CandidateSetError):
        small_bb.predict_proba(None, small_ds.prototypes[0], [])


def test_duplicate_candidates_rejected(small_bb, small_ds):
    with pytest.raises(CandidateSetError):
        small_bb.predict_proba(None, small_ds.prototypes[0], [1, 1, 2])


def test_feature_width_mismatch_rejected(small_bb):
    with pytest.raises(VocabularyError):
        small_bb.image_embeddings(np.zeros((2, 16)))


def test_single_candidate_probability_one(small_bb, small_ds):
    probs = small_bb.predict_proba(None, small_ds.prototypes[3], [3])
    assert probs.shape == (1,)
    assert probs[0] == 1.0


def test_equidistant_candidates_uniform():
    img = np.array([1.0, 0.0, 0.0])
    txt = np.array([[2.0, 2.0, 0.0], [2.0, 0.0, 2.0], [2.0, -2.0, 0.0],
                    [2.0, 0.0, -2.0]])
    probs = Backbone.probs_from_embeddings(img, txt, tau=0.5)
    assert np.max(np.abs(probs - 0.25)) < 1e-15


def test_probs_match_softmax_oracle():
    rng = Rng(17).substream("probs")
    img = rng.substream("img").normal((5,))
    txt = rng.substream("txt").normal((3, 5))
    tau = 0.07
    cos = np.array([
        float(img @ t / (np.linalg.norm(img) * np.linalg.norm(t))) for t in txt])
    z = cos / tau
    e = np.exp(z - z.max())
    want = e / e.sum()
    got = Backbone.probs_from_embeddings(img, txt, tau)
    assert np.max(np.abs(got - want)) < 1e-12


def test_probability_row_scale_invariant():
    rng = Rng(23).substream("scale")
    img = rng.substream("img").normal((6,))
    txt = rng.substream("txt").normal((4, 6))
    base = Backbone.probs_from_embeddings(img, txt, tau=0.01)
    scaled = Backbone.probs_from_embeddings(img * 4.0, txt * 0.25, tau=0.01)
    assert np.array_equal(base, scaled)


def test_zero_shot_tie_picks_lowest_id():
    spec = DatasetSpec(n_super=2, classes_per_super=2, sigma_img=0.0,
                       n_train_per_class=2, n_test_per_class=2, seed=4)
    ds = generate(spec)
    ds.prototypes[2] = ds.prototypes[1]
    bb = Backbone(BackboneConfig(seed=4), ds)
    label, _ = bb.zero_shot_label(ds.prototypes[1], [1, 2])
    assert label == 1


def test_zero_shot_single_candidate(small_bb, small_ds):
    label, conf = small_bb.zero_shot_label(small_ds.prototypes[0], [5])
    assert label == 5
    assert conf == 1.0


def test_zero_shot_brute_force(small_bb, small_ds):
    cands = small_ds.class_ids()[:5]
    feats = small_ds.prototypes[2]
    probs = small_bb.predict_proba(None, feats, cands)
    want = cands[int(np.argmax(probs))]
    got, conf = small_bb.zero_shot_label(feats, cands)
    assert got == want
    assert conf == pytest.approx(float(probs.max()))


def test_batched_probs_matches_per_image(small_bb, small_ds):
    cands = small_ds.class_ids()
    feats = small_ds.prototypes[:4]
    mat = batched_probs(small_bb, None, feats, cands)
    assert mat.shape == (4, len(cands))
    for i in range(4):
        row = small_bb.predict_proba(None, feats[i], cands)
        assert np.max(np.abs(mat[i] - row)) < 1e-12
    assert np.max(np.abs(mat.sum(axis=1) - 1.0)) < 1e-12


def test_predict_proba_uses_prompt(small_bb, small_ds):
    cands = small_ds.class_ids()
    f = small_ds.prototypes[0]
    hard = small_bb.predict_proba(None, f, cands)
    learned = small_bb.predict_proba(small_bb.prompt, f, cands)
    assert not np.array_equal(hard, learned)


# -- joint variant -----------------------------------------------------------


def test_joint_prefix_averages_into_features(small_ds):
    bb = Backbone(BackboneConfig(variant="joint", seed=11), small_ds)
    f = small_ds.prototypes[0]
    mixed = (f + bb.visual.prefix.data) * 0.5
    got = bb.image_embeddings(f).data
    want = image_forward_oracle(bb, mixed)[0]
    assert np.max(np.abs(got - want)) < 1e-12


def test_joint_without_prompt_matches_text_variant(small_ds):
    text = Backbone(BackboneConfig(seed=11), small_ds)
    joint = Backbone(BackboneConfig(variant="joint", seed=11), small_ds)
    f = small_ds.prototypes[1]
    a = text.image_embeddings(f, use_prompt=False).data
    b = joint.image_embeddings(f, use_prompt=False).data
    assert np.array_equal(a, b)


# -- freezing ----------------------------------------------------------------


def test_frozen_weights_never_move(small_ds):
    from mao.trainer import sgd_step

    bb = Backbone(BackboneConfig(seed=11), small_ds)
    before = bb.frozen_snapshot()
    for _ in range(3):
        emb = bb.text_embeddings(bb.prompt, small_ds.class_ids())
        (emb * emb).sum().backward()
        sgd_step(bb.trainable_params() + bb.frozen_params(), lr=0.1)
    after = bb.frozen_snapshot()
    for name in before:
        assert np.array_equal(before[name], after[name]), name
    assert not np.array_equal(
        bb.prompt.tokens.data,
        Backbone(BackboneConfig(seed=11), small_ds).prompt.tokens.data)


def test_frozen_params_receive_no_gradient(small_bb, small_ds):
    emb = small_bb.text_embeddings(small_bb.prompt, small_ds.class_ids())
    (emb * emb).sum().backward()
    for p in small_bb.frozen_params():
        assert p.value.grad is None
    assert small_bb.prompt.tokens.value.grad is not None
    for p in small_bb.trainable_params():
        p.zero_grad()


def test_prompt_gradient_matches_finite_difference(small_bb, small_ds):
    ids = small_ds.class_ids()[:3]
    emb = small_bb.text_embeddings(small_bb.prompt, ids)
    loss = (emb * emb).sum()
    loss.backward()
    grad = np.array(small_bb.prompt.tokens.value.grad)
    small_bb.prompt.tokens.zero_grad()

    eps = 1e-6
    base = np.array(small_bb.prompt.tokens.data)
    for idx in [(0, 0), (1, 5), (3, 31)]:
        for sign, store in ((1, "hi"), (-1, "lo")):
            small_bb.prompt.tokens.data[idx] = base[idx] + sign * eps
            e = small_bb.text_embeddings(small_bb.prompt, ids)
            val = float(((e * e).sum()).data)
            if store == "hi":
                hi = val
            else:
                lo = val
        small_bb.prompt.tokens.data[idx] = base[idx]
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - grad[idx]) < 1e-5
