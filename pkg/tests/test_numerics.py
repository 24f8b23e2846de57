import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mao.errors import ConfigError, DegenerateInputError, NumericsError
from mao.numerics import (
    Param,
    Rng,
    Tensor,
    add,
    cosine_rows,
    cosine_sim,
    finite_diff_check,
    l2_normalize,
    l2norm_rows,
    log_softmax_rows,
    matmul,
    matmul_t,
    mean_all,
    memory_stats,
    mul,
    no_grad,
    pca_project_2d,
    reset_peak_memory,
    softmax_rows,
    softmax_temp,
    sum_all,
    sum_rows,
    take_per_row,
    tanh,
)


# ---------------------------------------------------------------- l2_normalize

def test_l2_normalize_three_four_five():
    out = l2_normalize(Tensor([3.0, 4.0]))
    assert out.data == pytest.approx([0.6, 0.8], abs=1e-15)


def test_l2_normalize_unit_vector_unchanged():
    v = np.array([1.0, 0.0, 0.0])
    out = l2_normalize(Tensor(v))
    assert np.array_equal(out.data, v)


def test_l2_normalize_random_has_unit_norm():
    rng = Rng(3)
    v = rng.normal((16,))
    out = l2_normalize(Tensor(v))
    assert math.sqrt(float((out.data ** 2).sum())) == pytest.approx(1.0, abs=1e-12)


def test_l2_normalize_zero_vector_rejected():
    with pytest.raises(DegenerateInputError):
        l2_normalize(Tensor([0.0, 0.0, 0.0]))


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8))
def test_l2_normalize_direction_preserved(vals):
    v = np.asarray(vals)
    if math.sqrt(float((v ** 2).sum())) < 1e-6:
        return
    out = l2_normalize(Tensor(v)).data
    norm = math.sqrt(float((v ** 2).sum()))
    assert np.allclose(out, v / norm, atol=1e-12)


# ---------------------------------------------------------------- softmax_temp

def test_softmax_equal_logits_uniform():
    out = softmax_temp(Tensor([2.0, 2.0, 2.0, 2.0]), tau=0.5)
    assert out.data == pytest.approx([0.25] * 4, abs=1e-15)


def test_softmax_scalar_recomputation_oracle():
    # independent scalar recomputation of exp(x/tau)/sum for x=(2,1,0), tau=1
    x = [2.0, 1.0, 0.0]
    denom = math.exp(2.0) + math.exp(1.0) + math.exp(0.0)
    expected = [math.exp(v) / denom for v in x]
    out = softmax_temp(Tensor(x), tau=1.0)
    assert out.data == pytest.approx(expected, abs=1e-12)


def test_softmax_large_tau_approaches_uniform():
    probs = [softmax_temp(Tensor([1.0, 0.0]), tau=t).data[0]
             for t in (0.1, 1.0, 10.0, 1000.0)]
    assert all(a > b for a, b in zip(probs, probs[1:]))
    assert probs[-1] == pytest.approx(0.5, abs=1e-3)


def test_softmax_survives_extreme_temperature():
    out = softmax_temp(Tensor([100.0, 0.0, -100.0]), tau=1e-4)
    assert np.all(np.isfinite(out.data))
    assert float(out.data.sum()) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16),
       st.floats(1e-3, 10.0))
def test_softmax_sums_to_one(vals, tau):
    out = softmax_temp(Tensor(np.asarray(vals)), tau=tau)
    assert float(out.data.sum()) == pytest.approx(1.0, abs=1e-9)
    assert np.all(out.data >= 0)


def test_softmax_nonpositive_tau_rejected():
    with pytest.raises(ConfigError):
        softmax_temp(Tensor([1.0, 2.0]), tau=0.0)
    with pytest.raises(ConfigError):
        softmax_temp(Tensor([1.0, 2.0]), tau=-1.0)


def test_softmax_nonfinite_logits_rejected():
    with pytest.raises(NumericsError):
        softmax_temp(Tensor([1.0, float("nan")]), tau=1.0)


# ---------------------------------------------------------------- cosine_sim

def test_cosine_parallel_orthogonal():
    e1 = Tensor([1.0, 0.0])
    assert cosine_sim(e1, Tensor([1.0, 0.0])).item() == pytest.approx(1.0)
    assert cosine_sim(e1, Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-15)


def test_cosine_hand_dot_product_oracle():
    # dot = 2+2+4 = 8, norms 3*3 = 9
    a, b = Tensor([1.0, 2.0, 2.0]), Tensor([2.0, 1.0, 2.0])
    assert cosine_sim(a, b).item() == pytest.approx(8.0 / 9.0, abs=1e-12)


def test_cosine_zero_norm_rejected():
    with pytest.raises(DegenerateInputError):
        cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3),
       st.lists(st.floats(-100, 100), min_size=3, max_size=3),
       st.floats(0.01, 50.0))
def test_cosine_symmetry_and_scale_invariance(u, v, c):
    u, v = np.asarray(u), np.asarray(v)
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    s1 = cosine_sim(Tensor(u), Tensor(v)).item()
    s2 = cosine_sim(Tensor(v), Tensor(u)).item()
    s3 = cosine_sim(Tensor(c * u), Tensor(v)).item()
    assert s1 == pytest.approx(s2, abs=1e-10)
    assert s1 == pytest.approx(s3, abs=1e-9)
    assert -1.0 - 1e-9 <= s1 <= 1.0 + 1e-9


# ---------------------------------------------------------------- pca

def test_pca_2d_input_is_rotation():
    rng = Rng(11)
    x = rng.normal((40, 2))
    y = pca_project_2d(x)
    centered = x - x.mean(axis=0)
    assert float(y.var(axis=0).sum()) == pytest.approx(
        float(centered.var(axis=0).sum()), rel=1e-9)
    # rotations preserve pairwise distances
    d_in = np.linalg.norm(centered[0] - centered[1])
    d_out = np.linalg.norm(y[0] - y[1])
    assert d_out == pytest.approx(d_in, rel=1e-9)


def test_pca_collinear_second_coordinate_zero():
    base = np.array([1.0, 2.0, 3.0])
    x = np.array([base * t for t in (0.0, 1.0, 2.0, 5.0)])
    y = pca_project_2d(x)
    assert np.abs(y[:, 1]).max() < 1e-9


def test_pca_eigenvalue_oracle():
    # projection variances must match the top-2 covariance eigenvalues
    rng = Rng(5)
    x = rng.normal((10, 8)) * np.linspace(3.0, 0.5, 8)
    y = pca_project_2d(x)
    centered = x - x.mean(axis=0)
    eigvals = np.sort(np.linalg.eigvalsh(centered.T @ centered / 9.0))[::-1]
    got = y.var(axis=0, ddof=1)
    assert got[0] == pytest.approx(eigvals[0], rel=1e-9)
    assert got[1] == pytest.approx(eigvals[1], rel=1e-9)


def test_pca_variance_never_exceeds_input():
    rng = Rng(9)
    x = rng.normal((25, 6))
    y = pca_project_2d(x)
    assert y.var(axis=0, ddof=1).sum() <= x.var(axis=0, ddof=1).sum() + 1e-12


def test_pca_deterministic_sign():
    rng = Rng(13)
    x = rng.normal((12, 5))
    y1 = pca_project_2d(x)
    y2 = pca_project_2d(np.array(x))
    assert np.array_equal(y1, y2)


def test_pca_rejects_degenerate_shapes():
    with pytest.raises(DegenerateInputError):
        pca_project_2d(np.zeros((2, 4)))
    with pytest.raises(DegenerateInputError):
        pca_project_2d(np.zeros((5, 1)))


# ---------------------------------------------------------------- gradients

def _fd(loss_fn, param, eps=1e-5):
    return finite_diff_check(loss_fn, param, eps)


def test_grad_quadratic_exact():
    p = Param(np.array([1.0, -2.0, 3.0]))
    err = _fd(lambda q: mul(sum_all(mul(q.value, q.value)), 0.5), p)
    assert err < 1e-8


def test_grad_matmul_tanh_chain():
    rng = Rng(21)
    w = rng.normal((4, 3))
    p = Param(rng.normal((2, 4)))
    err = _fd(lambda q: sum_all(tanh(matmul(q.value, Tensor(w)))), p)
    assert err < 1e-6


def test_grad_l2norm_rows():
    p = Param(Rng(22).normal((3, 5)))
    t = Tensor(Rng(23).normal((3, 5)))
    err = _fd(lambda q: sum_all(mul(l2norm_rows(q.value), t)), p)
    assert err < 1e-6


def test_grad_log_softmax_pick():
    p = Param(Rng(24).normal((4, 6)))
    idx = [0, 3, 5, 2]
    err = _fd(lambda q: mul(mean_all(take_per_row(log_softmax_rows(q.value), idx)), -1.0), p)
    assert err < 1e-6


def test_softmax_rows_forward_matches_log_form():
    x = Rng(51).normal((4, 6))
    y = softmax_rows(Tensor(x)).data
    assert np.allclose(y, np.exp(log_softmax_rows(Tensor(x)).data))
    assert np.allclose(y.sum(axis=1), 1.0)


def test_grad_softmax_rows_mix():
    p = Param(Rng(52).normal((3, 4)))
    t = Tensor(Rng(53).normal((3, 4)))
    err = _fd(lambda q: sum_all(mul(softmax_rows(q.value), t)), p)
    assert err < 1e-6


def test_grad_attention_pooling_chain():
    # scores from a frozen query, softmax weights, weighted row mix
    q = Tensor(Rng(54).normal((5, 4)))
    w = Tensor(Rng(55).normal((4, 3)))
    p = Param(Rng(56).normal((2, 4)))

    def loss(param):
        scores = matmul_t(q, param.value) * 0.7
        alpha = softmax_rows(scores)
        mix = matmul(alpha, param.value)
        return sum_all(tanh(matmul(mix, w)))

    assert _fd(loss, p) < 1e-6


def test_grad_softmax_temp_and_cosine():
    p = Param(Rng(25).normal((5,)))
    t = Tensor(Rng(26).normal((5,)))
    err = _fd(lambda q: sum_all(mul(softmax_temp(q.value, 0.3), t)), p)
    assert err < 1e-6
    err2 = _fd(lambda q: cosine_sim(q.value, t), p)
    assert err2 < 1e-6


def test_grad_matmul_t_and_sum_rows():
    p = Param(Rng(27).normal((3, 4)))
    other = Tensor(Rng(28).normal((2, 4)))
    err = _fd(lambda q: sum_all(matmul_t(q.value, other)), p)
    assert err < 1e-7
    err2 = _fd(lambda q: sum_all(tanh(sum_rows(q.value))), p)
    assert err2 < 1e-6


def test_grad_reused_tensor_accumulates():
    p = Param(np.array([2.0, -1.0]))
    loss = sum_all(mul(p.value, p.value))  # same tensor on both sides
    loss.backward()
    assert p.grad == pytest.approx([4.0, -2.0])


def test_constant_loss_zero_gradient():
    p = Param(np.array([1.0, 2.0]))
    err = _fd(lambda q: Tensor(5.0) + mul(sum_all(q.value), 0.0), p)
    assert err < 1e-12


def test_finite_diff_eps_range_enforced():
    p = Param(np.array([1.0]))
    with pytest.raises(ConfigError):
        finite_diff_check(lambda q: sum_all(q.value), p, eps=1e-8)
    with pytest.raises(ConfigError):
        finite_diff_check(lambda q: sum_all(q.value), p, eps=1e-2)


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NumericsError):
        add(t, t).backward()


def test_frozen_param_gets_no_grad():
    frozen = Param(np.array([1.0, 2.0]), trainable=False)
    live = Param(np.array([3.0, 4.0]))
    loss = sum_all(mul(live.value, frozen.value))
    loss.backward()
    assert np.array_equal(frozen.grad, np.zeros(2))
    assert live.grad == pytest.approx([1.0, 2.0])


def test_no_grad_blocks_taping():
    p = Param(np.array([1.0, 2.0]))
    with no_grad():
        out = sum_all(mul(p.value, p.value))
    assert not out.requires_grad
    assert out._parents == ()


# ---------------------------------------------------------------- rng

def test_rng_identical_seed_identical_stream():
    a = Rng(42).normal((10,))
    b = Rng(42).normal((10,))
    assert np.array_equal(a, b)


def test_rng_substreams_differ_and_are_stable():
    root = Rng(7)
    x = root.substream("alpha").normal((6,))
    y = root.substream("beta").normal((6,))
    again = Rng(7).substream("alpha").normal((6,))
    assert np.array_equal(x, again)
    assert not np.array_equal(x, y)


def test_rng_substream_independent_of_parent_draws():
    a = Rng(7)
    a.normal((100,))  # consuming the parent must not shift the child
    x = a.substream("s").normal((4,))
    y = Rng(7).substream("s").normal((4,))
    assert np.array_equal(x, y)


def test_rng_nested_substreams():
    x = Rng(1).substream("a").substream("b").normal((3,))
    y = Rng(1).substream("a").substream("b").normal((3,))
    z = Rng(1).substream("b").substream("a").normal((3,))
    assert np.array_equal(x, y)
    assert not np.array_equal(x, z)


def test_rng_choice_without_replacement():
    got = Rng(3).choice(list(range(10)), size=10, replace=False)
    assert sorted(got) == list(range(10))


# ---------------------------------------------------------------- memory

def test_memory_tracker_counts_live_buffers():
    import gc

    gc.collect()
    reset_peak_memory()
    live0, peak0 = memory_stats()
    keep = Tensor(np.zeros(1000))
    live1, peak1 = memory_stats()
    assert live1 - live0 == 8000
    assert peak1 >= peak0 + 8000
    del keep
    gc.collect()
    live2, _ = memory_stats()
    assert live2 == live0


def test_memory_peak_covers_graph():
    reset_peak_memory()
    _, peak0 = memory_stats()
    p = Param(np.zeros((50, 50)))
    loss = sum_all(tanh(mul(p.value, 2.0)))
    loss.backward()
    _, peak1 = memory_stats()
    assert peak1 - peak0 >= 3 * 50 * 50 * 8  # value, grad, and intermediates


def test_determinism_bitwise_repeat():
    rng = Rng(77)
    x = rng.normal((6, 6))
    a = np.array(tanh(matmul(Tensor(x), Tensor(x))).data)
    b = np.array(tanh(matmul(Tensor(x), Tensor(x))).data)
    assert a.tobytes() == b.tobytes()
