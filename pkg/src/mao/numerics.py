"""Deterministic float64 tensor kernel with reverse-mode gradients.

Everything downstream (encoders, losses, diagnostics) is built from the
small op set in this module.  Tensors wrap row-major ``numpy`` buffers;
gradients are accumulated by walking a tape of backward closures.  A
module-level allocator keeps a byte count of live tensor buffers so run
costs can report a deterministic peak instead of process RSS.
"""
from __future__ import annotations

import hashlib
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericsError

_NORM_FLOOR = 1e-300  # norms at or below this count as degenerate


# --------------------------------------------------------------------------
# allocator

class _MemoryTracker:
    __slots__ = ("live_bytes", "peak_bytes")

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0

    def note(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes


tracker = _MemoryTracker()


def memory_stats() -> tuple[int, int]:
    """Return ``(live_bytes, peak_bytes)`` of tracked tensor buffers."""
    return tracker.live_bytes, tracker.peak_bytes


def reset_peak_memory() -> None:
    """Restart peak tracking from the currently live byte count."""
    tracker.peak_bytes = tracker.live_bytes


# --------------------------------------------------------------------------
# autodiff tape

_grad_enabled: list[bool] = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """Row-major float64 array plus gradient and backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        tracker.note(arr.nbytes)
        weakref.finalize(self, tracker.release, arr.nbytes)

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            g = np.zeros_like(self.data)
            self.grad = g
            tracker.note(g.nbytes)
            weakref.finalize(self, tracker.release, g.nbytes)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._ensure_grad()[...] = 1.0
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, mul(_coerce(other), -1.0))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def sum_rows(self) -> "Tensor":
        return sum_rows(self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _track(out: Tensor, parents: tuple[Tensor, ...],
           backward: Callable[[], None]) -> Tensor:
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# primitive ops

def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)

    def backward() -> None:
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(g, b.data.shape)

    return _track(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data)

    def backward() -> None:
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()[...] += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b._ensure_grad()[...] += _unbroadcast(g * a.data, b.data.shape)

    return _track(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericsError("matmul expects 2-d operands")
    out = Tensor(a.data @ b.data)

    def backward() -> None:
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()[...] += g @ b.data.T
        if b.requires_grad:
            b._ensure_grad()[...] += a.data.T @ g

    return _track(out, (a, b), backward)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` without materialising a transposed tensor."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericsError("matmul_t expects 2-d operands")
    out = Tensor(a.data @ b.data.T)

    def backward() -> None:
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()[...] += g @ b.data
        if b.requires_grad:
            b._ensure_grad()[...] += g.T @ a.data

    return _track(out, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.tanh(a.data))

    def backward() -> None:
        if a.requires_grad:
            a._ensure_grad()[...] += out.grad * (1.0 - out.data * out.data)

    return _track(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.sum())

    def backward() -> None:
        if a.requires_grad:
            a._ensure_grad()[...] += out.grad

    return _track(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    a = _coerce(a)
    n = a.data.size
    out = Tensor(a.data.sum() / n)

    def backward() -> None:
        if a.requires_grad:
            a._ensure_grad()[...] += out.grad / n

    return _track(out, (a,), backward)


def sum_rows(a: Tensor) -> Tensor:
    """Sum a 2-d tensor over axis 0, yielding one row."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise NumericsError("sum_rows expects a 2-d tensor")
    out = Tensor(a.data.sum(axis=0))

    def backward() -> None:
        if a.requires_grad:
            a._ensure_grad()[...] += out.grad[None, :]

    return _track(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.reshape(shape))

    def backward() -> None:
        if a.requires_grad:
            a._ensure_grad()[...] += out.grad.reshape(a.data.shape)

    return _track(out, (a,), backward)


def l2norm_rows(x: Tensor) -> Tensor:
    """Row-wise L2 normalization of a 2-d tensor."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise NumericsError("l2norm_rows expects a 2-d tensor")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if not np.all(norms > _NORM_FLOOR):
        raise DegenerateInputError("row with zero norm cannot be normalized")
    out = Tensor(x.data / norms)

    def backward() -> None:
        if x.requires_grad:
            g = out.grad
            dot = (x.data * g).sum(axis=1, keepdims=True)
            x._ensure_grad()[...] += g / norms - x.data * (dot / norms ** 3)

    return _track(out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction for stability."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise NumericsError("log_softmax_rows expects a 2-d tensor")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("non-finite logits in log_softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(shifted - lse)

    def backward() -> None:
        if x.requires_grad:
            g = out.grad
            soft = np.exp(out.data)
            x._ensure_grad()[...] += g - soft * g.sum(axis=1, keepdims=True)

    return _track(out, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise NumericsError("softmax_rows expects a 2-d tensor")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("non-finite logits in softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=1, keepdims=True))

    def backward() -> None:
        if x.requires_grad:
            g = out.grad
            y = out.data
            x._ensure_grad()[...] += y * (g - (g * y).sum(axis=1, keepdims=True))

    return _track(out, (x,), backward)


def take_per_row(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Pick one column per row: ``out[i] = x[i, idx[i]]``."""
    x = _coerce(x)
    cols = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, cols])

    def backward() -> None:
        if x.requires_grad:
            g = x._ensure_grad()
            np.add.at(g, (rows, cols), out.grad)

    return _track(out, (x,), backward)


# --------------------------------------------------------------------------
# exposed vector ops

def l2_normalize(v: Tensor) -> Tensor:
    """Normalize a 1-d tensor to unit L2 norm."""
    v = _coerce(v)
    if v.data.ndim != 1:
        raise NumericsError("l2_normalize expects a 1-d tensor")
    norm = float(np.sqrt((v.data * v.data).sum()))
    if not norm > _NORM_FLOOR:
        raise DegenerateInputError("zero-norm vector cannot be normalized")
    out = Tensor(v.data / norm)

    def backward() -> None:
        if v.requires_grad:
            g = out.grad
            dot = float((v.data * g).sum())
            v._ensure_grad()[...] += g / norm - v.data * (dot / norm ** 3)

    return _track(out, (v,), backward)


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Temperature softmax over a 1-d tensor of logits.

    Computes ``exp(x/tau) / sum exp(x/tau)`` with the maximum subtracted
    before exponentiation so large ``1/tau`` factors cannot overflow.
    """
    if not tau > 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    logits = _coerce(logits)
    if logits.data.ndim != 1:
        raise NumericsError("softmax_temp expects a 1-d tensor")
    if not np.all(np.isfinite(logits.data)):
        raise NumericsError("non-finite logits in softmax_temp")
    z = logits.data / tau
    z = z - z.max()
    e = np.exp(z)
    out = Tensor(e / e.sum())

    def backward() -> None:
        if logits.requires_grad:
            g = out.grad
            y = out.data
            dot = float((y * g).sum())
            logits._ensure_grad()[...] += y * (g - dot) / tau

    return _track(out, (logits,), backward)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-d tensors (scalar in [-1, 1])."""
    a_hat = l2_normalize(_coerce(a))
    b_hat = l2_normalize(_coerce(b))
    return sum_all(mul(a_hat, b_hat))


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity matrix between rows of two 2-d tensors."""
    return matmul_t(l2norm_rows(a), l2norm_rows(b))


# --------------------------------------------------------------------------
# principal component projection (forward only, diagnostics)

def pca_project_2d(points) -> np.ndarray:
    """Project points onto their top two principal components.

    Accepts a 2-d array, a 2-d :class:`Tensor`, or an iterable of 1-d
    rows.  Components are ordered by descending eigenvalue of the sample
    covariance and sign-fixed so each component's first nonzero loading
    is positive.  Rank-deficient inputs are handled by zero-padding the
    missing components, so collinear clouds project to a line.
    """
    if isinstance(points, Tensor):
        x = np.array(points.data, dtype=np.float64)
    elif isinstance(points, np.ndarray):
        x = np.array(points, dtype=np.float64)
    else:
        rows = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in points]
        x = np.array(rows, dtype=np.float64)
    if x.ndim != 2:
        raise DegenerateInputError("pca_project_2d expects points as rows")
    n, d = x.shape
    if n < 3:
        raise DegenerateInputError(f"need at least 3 points, got {n}")
    if d < 2:
        raise DegenerateInputError(f"need dimension >= 2, got {d}")
    if not np.all(np.isfinite(x)):
        raise NumericsError("non-finite coordinates in pca_project_2d")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    total = float(eigvals.sum())
    rank_tol = max(total, 1.0) * 1e-12
    comps = np.zeros((d, 2))
    for j in range(2):
        if eigvals[j] > rank_tol:
            v = eigvecs[:, j]
            nz = np.nonzero(np.abs(v) > 1e-12)[0]
            if nz.size and v[nz[0]] < 0:
                v = -v
            comps[:, j] = v
    return centered @ comps


# --------------------------------------------------------------------------
# gradient verification

def finite_diff_check(loss_fn: Callable[["Param"], Tensor], param: "Param",
                      eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    Returns the maximum relative error over the parameter's coordinates,
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    param.zero_grad()
    out = loss_fn(param)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise NumericsError("loss_fn must return a scalar Tensor")
    if not np.isfinite(out.data):
        raise NumericsError("loss is non-finite at the evaluation point")
    out.backward()
    analytic = np.array(param.grad, copy=True)

    flat = param.value.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = float(loss_fn(param).data)
        flat[i] = orig - eps
        with no_grad():
            lo = float(loss_fn(param).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericsError("loss is non-finite at a perturbed point")
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(a - numeric) / denom))


# --------------------------------------------------------------------------
# parameters and random streams

class Param:
    """A named tensor that may be trainable; frozen ones never get grads."""

    __slots__ = ("value", "trainable")

    def __init__(self, value, trainable: bool = True):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = bool(trainable)
        self.trainable = bool(trainable)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.zero_grad()


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:4], "big")


class Rng:
    """Counter-based random stream with labeled, non-overlapping substreams.

    The same ``(seed, labels...)`` path always reproduces the same draws,
    and substreams derived under different labels are independent.
    """

    __slots__ = ("seed", "_key", "_gen")

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        bits = np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self._key))
        self._gen = np.random.Generator(bits)

    def substream(self, label: str) -> "Rng":
        return Rng(self.seed, self._key + (_label_key(label),))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, options: Sequence, size: int, replace: bool = False) -> list:
        idx = self._gen.choice(len(options), size=size, replace=replace)
        return [options[int(i)] for i in idx]
