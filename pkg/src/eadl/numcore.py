"""Dense float tensors with reverse-mode differentiation on an explicit tape.

Everything downstream (attention kernels, the encoder, the training loops)
is built from the operations here. Design points:

* 32-bit floats by default; the gradient checker may temporarily evaluate
  in 64-bit, training and inference stay in f32.
* Gradients accumulate with += and are cleared explicitly.
* Every tensor payload (data and grad buffers) is counted against a global,
  thread-safe allocation counter so peak memory is observable and
  deterministic for a fixed seed.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    InputError,
    NumericGuardError,
    ParameterError,
    ProtocolError,
    ShapeError,
)

# ---------------------------------------------------------------------------
# allocation tracking


class AllocStats:
    """Thread-safe byte counter for live tensor payloads.

    `peak_bytes` is monotone nondecreasing until `reset_peak` pins it back
    to the current level.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._current = 0
        self._peak = 0

    def add(self, nbytes: int) -> None:
        with self._lock:
            self._current += nbytes
            if self._current > self._peak:
                self._peak = self._current

    def sub(self, nbytes: int) -> None:
        with self._lock:
            self._current -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self._peak = self._current

    @property
    def current_bytes(self) -> int:
        with self._lock:
            return self._current

    @property
    def peak_bytes(self) -> int:
        with self._lock:
            return self._peak


alloc_stats = AllocStats()


# ---------------------------------------------------------------------------
# RNG: counter-based 64-bit generator, cheap to derive per-purpose streams


def make_rng(*seed_parts: int) -> np.random.Generator:
    """Deterministic Philox generator keyed on one or more integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed_parts))))


def derive_seed(*parts: int) -> int:
    """Deterministically mix integers into a child seed."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# dtype and mode state (thread-local so independent tapes can run in parallel)

_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _grad_check_active() -> bool:
    return getattr(_state, "grad_check", False)


@contextlib.contextmanager
def grad_check_mode():
    """While active, stochastic ops (dropout) become identities."""
    prev = _grad_check_active()
    _state.grad_check = True
    try:
        yield
    finally:
        _state.grad_check = prev


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense float array with an optional gradient buffer.

    Tensors are written once by their producing operation and treated as
    immutable afterwards. `release()` drops the payload and uncounts it;
    it is called by `Tape.clear()` for intermediates and by the finalizer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_counted", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype())
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._counted = arr.nbytes
        alloc_stats.add(arr.nbytes)

    @classmethod
    def _from_op(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._counted = arr.nbytes
        alloc_stats.add(arr.nbytes)
        return t

    # -- payload bookkeeping ------------------------------------------------

    def release(self) -> None:
        if self._counted:
            alloc_stats.sub(self._counted)
            self._counted = 0
        self.data = None
        self.grad = None

    def __del__(self):
        try:
            self.release()
        except Exception:
            pass

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            buf = np.array(g, dtype=self.data.dtype)
            self.grad = buf
            self._counted += buf.nbytes
            alloc_stats.add(buf.nbytes)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def clear_grad(self) -> None:
        if self.grad is not None:
            alloc_stats.sub(self.grad.nbytes)
            self._counted -= self.grad.nbytes
            self.grad = None

    def _swap_data(self, arr: np.ndarray) -> np.ndarray:
        """Replace the payload in place (gradient checker use). Returns the
        previous array untouched so it can be restored bit-exactly."""
        old = self.data
        alloc_stats.sub(old.nbytes)
        self._counted -= old.nbytes
        arr = np.ascontiguousarray(arr)
        self.data = arr
        self._counted += arr.nbytes
        alloc_stats.add(arr.nbytes)
        return old

    # -- conveniences ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape if self.data is not None else 'released'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of operations; replaying it backwards produces
    gradients for every requires_grad tensor reachable from a loss."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._entries.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every requires_grad tensor contributing to
        `loss`. Repeated calls accumulate."""
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward in reversed(self._entries):
            g = flowing.get(id(out))
            if g is None:
                continue
            contribs = backward(g)
            for inp, contrib in zip(inputs, contribs):
                if contrib is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in flowing:
                    flowing[key] = flowing[key] + contrib
                else:
                    flowing[key] = np.asarray(contrib, dtype=inp.data.dtype)
                    touched[key] = inp
        for key, t in touched.items():
            if t.requires_grad:
                t._accumulate_grad(flowing[key])

    def clear(self) -> None:
        """Free every intermediate produced under this tape."""
        for out, _inputs, _backward in self._entries:
            out.release()
        self._entries.clear()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Hide the active tape: operations inside record nothing."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from `loss` on the active tape."""
    t = active_tape()
    if t is None:
        raise ProtocolError("backward called with no active tape")
    t.backward(loss)


def _emit(out_arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _emit(ad / bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics; operands must be >= 2-D."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _emit(np.matmul(ad, bd), (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit(a.data.reshape(tuple(shape)), (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _emit(ad.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    if axis is None:
        count = ad.size
    else:
        count = np.prod([ad.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, ad.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, ad.shape).copy(),)

    return _emit(ad.mean(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties split the gradient evenly (subgradient choice)."""
    ad = a.data
    out = ad.max(axis=axis, keepdims=keepdims)

    def backward(g):
        full = out if keepdims or axis is None else np.expand_dims(out, axis)
        mask = (ad == full).astype(ad.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (mask * gg,)

    return _emit(out, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def exp(a: Tensor) -> Tensor:
    out_arr = np.exp(a.data)
    return _emit(out_arr, (a,), lambda g: (g * out_arr,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out_arr = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit(out_arr, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization over the last axis with learnable
    gain/bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_arr = xhat * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _emit(out_arr, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer index array `ids`."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InputError("embedding index out of range")
    td = table.data

    def backward(g):
        dt = np.zeros_like(td)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        return (dt,)

    return _emit(td[ids], (table,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Seeded inverted dropout; identity in eval mode and while the
    gradient checker is active."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0 or _grad_check_active():
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _emit(x.data * keep, (x,), backward)


# ---------------------------------------------------------------------------
# probability and loss primitives


def softmax_T(z: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax over the trailing axis, computed with
    max-subtraction. Each trailing-axis slice sums to 1."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    zd = z.data / temperature
    zd = zd - zd.max(axis=-1, keepdims=True)
    e = np.exp(zd)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return _emit(p, (z,), backward)


def _log_softmax(zd: np.ndarray) -> np.ndarray:
    zs = zd - zd.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def cross_entropy_soft(student_logits: Tensor, teacher_probs: Tensor, temperature: float) -> Tensor:
    """Cross entropy of temperature-softened student predictions against a
    fixed soft target distribution.

    Accepts a single distribution over the trailing axis or a batch of
    rows; returns the mean over rows. Differentiable in the logits only.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    sd, pd = student_logits.data, teacher_probs.data
    if sd.shape != pd.shape:
        raise ShapeError(f"logits shape {sd.shape} != target shape {pd.shape}")
    sums = pd.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise InputError("teacher probabilities do not sum to 1 within 1e-5")
    logq = _log_softmax(sd / temperature)
    rows = -np.where(pd > 0, pd * logq, 0.0).sum(axis=-1)
    n_rows = int(np.prod(rows.shape)) if rows.ndim else 1
    q = np.exp(logq)

    def backward(g):
        return (g * (q - pd) / (temperature * n_rows), None)

    return _emit(np.asarray(rows.mean(), dtype=sd.dtype), (student_logits, teacher_probs), backward)


def mlm_cross_entropy(logits: Tensor, targets: Iterable[tuple]) -> Tensor:
    """Mean negative log-likelihood at the listed positions only.

    For 2-D logits [L, V] targets are (position, token_id) pairs; for 3-D
    logits [B, L, V] they are (batch, position, token_id). An empty list
    yields a zero loss with no gradient.
    """
    targets = list(targets)
    ld = logits.data
    if not targets:
        return Tensor(np.zeros((), dtype=ld.dtype))
    idx = np.asarray(targets, dtype=np.int64)
    if ld.ndim == 2:
        if idx.shape[1] != 2:
            raise ShapeError("2-D logits need (position, token_id) targets")
        pos = (idx[:, 0],)
        tok = idx[:, 1]
    elif ld.ndim == 3:
        if idx.shape[1] != 3:
            raise ShapeError("3-D logits need (batch, position, token_id) targets")
        pos = (idx[:, 0], idx[:, 1])
        tok = idx[:, 2]
    else:
        raise ShapeError(f"mlm_cross_entropy expects 2-D or 3-D logits, got {ld.ndim}-D")
    for axis, p in enumerate(pos):
        if p.min() < 0 or p.max() >= ld.shape[axis]:
            raise InputError("target position out of range")
    if tok.min() < 0 or tok.max() >= ld.shape[-1]:
        raise InputError("target token id out of range")

    rows = ld[pos]  # [K, V]
    logq = _log_softmax(rows)
    k = len(targets)
    loss = -logq[np.arange(k), tok].mean()
    q = np.exp(logq)
    if ld.ndim == 3:
        flat_pos = pos[0] * ld.shape[1] + pos[1]
    else:
        flat_pos = pos[0]

    def backward(g):
        drows = q.copy()
        drows[np.arange(k), tok] -= 1.0
        drows *= g / k
        dl = np.zeros_like(ld)
        np.add.at(dl.reshape(-1, ld.shape[-1]), flat_pos, drows)
        return (dl,)

    return _emit(np.asarray(loss, dtype=ld.dtype), (logits,), backward)


def cosine_embedding_loss(a: Tensor, b: Tensor) -> Tensor:
    """1 - cosine similarity along the trailing axis, averaged over any
    leading axes. Both inputs must have nonzero norm."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"cosine loss inputs differ in shape: {ad.shape} vs {bd.shape}")
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericGuardError("cosine loss requires nonzero-norm vectors")
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    n_rows = int(np.prod(ad.shape[:-1])) if ad.ndim > 1 else 1

    def backward(g):
        da = -(bd / (na * nb) - cos * ad / (na * na)) * (g / n_rows)
        db = -(ad / (na * nb) - cos * bd / (nb * nb)) * (g / n_rows)
        return da, db

    return _emit(np.asarray((1.0 - cos).mean(), dtype=ad.dtype), (a, b), backward)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    high_precision: bool = True,
) -> float:
    """Compare recorded gradients of `f` against central finite differences.

    Returns the worst relative error over the sampled coordinates, where
    relative error is |fd - grad| / max(1, |fd|, |grad|). `f` must be
    deterministic; it is evaluated twice up front and a mismatch raises
    ProtocolError. With `high_precision` the whole check runs in float64
    (parameters are restored bit-exactly afterwards).
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    rng = rng if rng is not None else make_rng(0)
    saved = None
    if high_precision:
        saved = [p._swap_data(p.data.astype(np.float64)) for p in params]
    ctx = default_dtype(np.float64) if high_precision else contextlib.nullcontext()
    try:
        with ctx, grad_check_mode():
            with no_grad():
                l1 = f().item()
                l2 = f().item()
            if l1 != l2:
                raise ProtocolError("function under gradient check is not deterministic")

            for p in params:
                p.clear_grad()
            with Tape() as tape:
                loss = f()
                tape.backward(loss)
            grads = [None if p.grad is None else p.grad.copy() for p in params]
            tape.clear()

            worst = 0.0
            for p, g in zip(params, grads):
                size = p.data.size
                if max_coords_per_param is None or max_coords_per_param >= size:
                    coords = np.arange(size)
                else:
                    coords = rng.choice(size, size=max_coords_per_param, replace=False)
                flat = p.data.reshape(-1)
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    with no_grad():
                        lp = f().item()
                    flat[c] = orig - eps
                    with no_grad():
                        lm = f().item()
                    flat[c] = orig
                    fd = (lp - lm) / (2.0 * eps)
                    an = 0.0 if g is None else float(g.reshape(-1)[c])
                    err = abs(fd - an) / max(1.0, abs(fd), abs(an))
                    if err > worst:
                        worst = err
            return worst
    finally:
        if saved is not None:
            for p, old in zip(params, saved):
                p._swap_data(old)
                p.clear_grad()
