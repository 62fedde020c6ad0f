"""Dense tensor ops with reverse-mode differentiation.

Only the operations the training graph actually needs are implemented:
matmul, add, relu, conv/pooling, row normalization, temperature softmax,
soft cross-entropy and scalar reductions. Values are numpy arrays; float32
is the training precision, float64 the verification precision for
finite-difference checks.

Recording model: while a `Tape` is active, any op whose inputs are tracked
(parameters, or outputs of previously recorded ops) appends a backward
closure to the tape. `backward(tape, loss)` replays those closures in exact
reverse execution order, accumulating gradients. `Variable.detach` and
running outside any tape both stop gradient flow.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError, UsageError

Array = np.ndarray

_tape_stack: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Execution-ordered record of differentiable operations.

    `traversals` counts backward passes; the trainer asserts it stays at one
    per step.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Variable, Callable[[Array], None]]] = []
        self.traversals = 0

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: "Variable", backward_fn: Callable[[Array], None]) -> None:
        self._records.append((out, backward_fn))


class Variable:
    """A value plus an optional gradient buffer.

    Parameters are constructed with ``requires_grad=True`` and keep a
    persistent zero-initialized ``grad`` of the same shape. Intermediate op
    outputs get a grad buffer lazily during the backward pass.
    """

    __slots__ = ("value", "grad", "requires_grad", "_tracked")

    def __init__(self, value, requires_grad: bool = False, dtype=None):
        self.value = np.asarray(value, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = (
            np.zeros_like(self.value) if self.requires_grad else None
        )
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = None

    def detach(self) -> "Variable":
        """A view of the same value that contributes nothing to any tape."""
        return Variable(self.value)

    def __repr__(self) -> str:
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


def zero_grads(params: Sequence[Variable]) -> None:
    for p in params:
        p.zero_grad()


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x))


def value_of(x) -> Array:
    return x.value if isinstance(x, Variable) else np.asarray(x)


def _accumulate(var: Variable, g: Array) -> None:
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


def _make_output(value: Array, inputs: Sequence[Variable],
                 backward_fn: Callable[["Variable"], Callable[[Array], None]]) -> Variable:
    out = Variable(value)
    tape = active_tape()
    if tape is not None and any(v._tracked for v in inputs):
        out._tracked = True
        tape.record(out, backward_fn(out))
    return out


def backward(tape: Tape, loss: Variable) -> None:
    """Populate gradients of everything `loss` depends on through `tape`."""
    if loss.value.shape != ():
        raise UsageError(
            f"backward expects a scalar loss, got shape {loss.value.shape}"
        )
    _accumulate(loss, np.ones((), dtype=loss.value.dtype))
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)
    tape.traversals += 1


def assert_finite(x: Variable | Array, what: str = "tensor") -> None:
    v = value_of(x)
    if not np.all(np.isfinite(v)):
        raise ArithmeticError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Elementary ops


def matmul(a: Variable | Array, b: Variable | Array) -> Variable:
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")
    out_val = av @ bv

    def make(out):
        def fn(g):
            if a._tracked:
                _accumulate(a, g @ bv.T)
            if b._tracked:
                _accumulate(b, av.T @ g)
        return fn

    return _make_output(out_val, (a, b), make)


def add(a: Variable | Array, b: Variable | Array) -> Variable:
    """Elementwise add; supports an (d,) bias against an (n, d) matrix."""
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    try:
        out_val = av + bv
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {av.shape} + {bv.shape}") from e
    if out_val.shape not in (av.shape, bv.shape):
        raise ShapeError(f"add: incompatible shapes {av.shape} + {bv.shape}")

    def reduce_to(g, shape):
        if g.shape == shape:
            return g
        extra = g.ndim - len(shape)
        g = g.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return g

    def make(out):
        def fn(g):
            if a._tracked:
                _accumulate(a, reduce_to(g, av.shape))
            if b._tracked:
                _accumulate(b, reduce_to(g, bv.shape))
        return fn

    return _make_output(out_val, (a, b), make)


def scale(x: Variable | Array, c: float) -> Variable:
    x = as_variable(x)
    out_val = x.value * c

    def make(out):
        def fn(g):
            if x._tracked:
                _accumulate(x, g * c)
        return fn

    return _make_output(out_val, (x,), make)


def relu(x: Variable | Array) -> Variable:
    x = as_variable(x)
    mask = x.value > 0
    out_val = np.where(mask, x.value, 0)

    def make(out):
        def fn(g):
            if x._tracked:
                _accumulate(x, g * mask)
        return fn

    return _make_output(out_val, (x,), make)


def reshape(x: Variable | Array, shape: tuple[int, ...]) -> Variable:
    x = as_variable(x)
    out_val = x.value.reshape(shape)

    def make(out):
        def fn(g):
            if x._tracked:
                _accumulate(x, g.reshape(x.value.shape))
        return fn

    return _make_output(out_val, (x,), make)


def sum_all(x: Variable | Array) -> Variable:
    x = as_variable(x)
    out_val = np.asarray(x.value.sum(), dtype=x.value.dtype)

    def make(out):
        def fn(g):
            if x._tracked:
                _accumulate(x, np.broadcast_to(g, x.value.shape))
        return fn

    return _make_output(out_val, (x,), make)


def mean_all(x: Variable | Array) -> Variable:
    x = as_variable(x)
    n = x.value.size
    out_val = np.asarray(x.value.mean(), dtype=x.value.dtype)

    def make(out):
        def fn(g):
            if x._tracked:
                _accumulate(x, np.broadcast_to(g / n, x.value.shape))
        return fn

    return _make_output(out_val, (x,), make)


def rowwise_dot(a: Variable | Array, b: Variable | Array) -> Variable:
    """Per-row inner product of two (n, d) matrices, returned as (n, 1)."""
    a, b = as_variable(a), as_variable(b)
    if a.value.shape != b.value.shape or a.value.ndim != 2:
        raise ShapeError(
            f"rowwise_dot: expected equal 2-D shapes, got {a.value.shape} vs {b.value.shape}"
        )
    out_val = np.sum(a.value * b.value, axis=1, keepdims=True)

    def make(out):
        def fn(g):
            if a._tracked:
                _accumulate(a, g * b.value)
            if b._tracked:
                _accumulate(b, g * a.value)
        return fn

    return _make_output(out_val, (a, b), make)


def concat_cols(a: Variable | Array, b: Variable | Array) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(
            f"concat_cols: row counts differ, {a.value.shape} vs {b.value.shape}"
        )
    na = a.value.shape[1]
    out_val = np.concatenate([a.value, b.value], axis=1)

    def make(out):
        def fn(g):
            if a._tracked:
                _accumulate(a, g[:, :na])
            if b._tracked:
                _accumulate(b, g[:, na:])
        return fn

    return _make_output(out_val, (a, b), make)


# ---------------------------------------------------------------------------
# Normalization / softmax / cross-entropy


def l2_normalize_rows(x: Variable | Array, eps: float = 1e-12) -> Variable:
    """Divide each row by max(l2 norm, eps); eps guards the zero row."""
    x = as_variable(x)
    xv = x.value
    norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out_val = xv / denom
    live = norms > eps  # rows where the norm itself depends on x

    def make(out):
        y = out_val

        def fn(g):
            if x._tracked:
                proj = np.sum(g * y, axis=1, keepdims=True)
                _accumulate(x, (g - np.where(live, y * proj, 0)) / denom)
        return fn

    return _make_output(out_val, (x,), make)


def softmax_rows_array(logits: Array, temperature: float) -> Array:
    """Plain-array row softmax of logits/temperature, max-subtracted."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(logits: Variable | Array, temperature: float) -> Variable:
    logits = as_variable(logits)
    p = softmax_rows_array(logits.value, temperature)

    def make(out):
        def fn(g):
            if logits._tracked:
                dot = np.sum(g * p, axis=1, keepdims=True)
                _accumulate(logits, p * (g - dot) / temperature)
        return fn

    return _make_output(p, (logits,), make)


def log_softmax_rows_array(logits: Array, temperature: float) -> Array:
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = logits / temperature
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    return z - lse


def soft_cross_entropy(student_logits: Variable | Array,
                       teacher_probs: Variable | Array,
                       tau_s: float) -> Variable:
    """Mean over rows of -sum_j teacher[i,j] * log softmax(student/tau_s)[i,j].

    The teacher side is treated as a constant: gradient flows only into the
    student logits.
    """
    student_logits = as_variable(student_logits)
    t = value_of(teacher_probs)
    sv = student_logits.value
    if sv.shape != t.shape:
        raise ShapeError(
            f"soft_cross_entropy: student {sv.shape} vs teacher {t.shape}"
        )
    n = sv.shape[0]
    logp = log_softmax_rows_array(sv, tau_s)
    out_val = np.asarray(-(t * logp).sum() / n, dtype=sv.dtype)

    def make(out):
        def fn(g):
            if student_logits._tracked:
                p = np.exp(logp)
                rowmass = t.sum(axis=1, keepdims=True)
                _accumulate(
                    student_logits, g * (p * rowmass - t) / (n * tau_s)
                )
        return fn

    return _make_output(out_val, (student_logits,), make)


# ---------------------------------------------------------------------------
# Convolution / pooling (im2col based)


@lru_cache(maxsize=64)
def _im2col_indices(c: int, h: int, w: int, kh: int, kw: int,
                    pad: int, stride: int):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(oh), ow)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(ow), oh)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)  # (c*kh*kw, oh*ow)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    k = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    return k, i, j, oh, ow


@lru_cache(maxsize=64)
def _col2im_flat_indices(n: int, c: int, h: int, w: int, kh: int, kw: int,
                         pad: int, stride: int) -> Array:
    """Flat scatter targets for a (K, n*L) column gradient, K = c*kh*kw."""
    k, i, j, _, _ = _im2col_indices(c, h, w, kh, kw, pad, stride)
    hp, wp = h + 2 * pad, w + 2 * pad
    absidx = k * hp * wp + i * wp + j                     # (K, L)
    per_image = c * hp * wp
    offsets = (np.arange(n) * per_image)[None, :, None]   # (1, n, 1)
    return (absidx[:, None, :] + offsets).ravel()         # (K, n, L) order


def conv2d(x: Variable | Array, weight: Variable | Array, bias: Variable | Array,
           stride: int = 1, padding: int = 0) -> Variable:
    """2-D convolution of an (N,C,H,W) batch with (F,C,kh,kw) filters.

    im2col columns are kept in a (K, N*L) layout so both passes run as
    single large matrix products.
    """
    x, weight, bias = as_variable(x), as_variable(weight), as_variable(bias)
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d: input {xv.shape} vs weight {wv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ShapeError(f"conv2d: bias {bv.shape} vs filters {wv.shape[0]}")
    n, c, h, w = xv.shape
    f, _, kh, kw = wv.shape
    k, i, j, oh, ow = _im2col_indices(c, h, w, kh, kw, padding, stride)
    if padding:
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xv
    nl = n * oh * ow
    kdim = c * kh * kw
    cols = np.ascontiguousarray(
        xp[:, k, i, j].transpose(1, 0, 2)).reshape(kdim, nl)
    w2 = wv.reshape(f, kdim)
    out_f = w2 @ cols + bv[:, None]             # (f, n*L)
    out_val = np.ascontiguousarray(
        out_f.reshape(f, n, oh * ow).transpose(1, 0, 2)).reshape(n, f, oh, ow)
    pshape = xp.shape

    def make(out):
        def fn(g):
            g_f = np.ascontiguousarray(
                g.reshape(n, f, oh * ow).transpose(1, 0, 2)).reshape(f, nl)
            if bias._tracked:
                _accumulate(bias, g_f.sum(axis=1))
            if weight._tracked:
                _accumulate(weight, (g_f @ cols.T).reshape(wv.shape))
            if x._tracked:
                gcols = w2.T @ g_f              # (kdim, n*L)
                flat = _col2im_flat_indices(n, c, h, w, kh, kw, padding, stride)
                gxp = np.bincount(
                    flat, weights=gcols.ravel().astype(np.float64),
                    minlength=int(np.prod(pshape)),
                ).reshape(pshape).astype(xv.dtype)
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
                _accumulate(x, gxp)
        return fn

    return _make_output(out_val, (x, weight, bias), make)


def avg_pool2d(x: Variable | Array, k: int) -> Variable:
    """Non-overlapping k-by-k average pooling; spatial dims must divide by k."""
    x = as_variable(x)
    n, c, h, w = x.value.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out_val = x.value.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def make(out):
        def fn(g):
            if x._tracked:
                up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
                _accumulate(x, up)
        return fn

    return _make_output(out_val, (x,), make)


def global_avg_pool(x: Variable | Array) -> Variable:
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = as_variable(x)
    n, c, h, w = x.value.shape
    out_val = x.value.mean(axis=(2, 3))

    def make(out):
        def fn(g):
            if x._tracked:
                _accumulate(x, np.broadcast_to(
                    g[:, :, None, None] / (h * w), x.value.shape))
        return fn

    return _make_output(out_val, (x,), make)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def grad_check(f: Callable[[], Variable], params: Sequence[Variable],
               h: float = 1e-4, max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` re-evaluates the scalar objective from the current parameter values;
    it is run once under a fresh tape for the analytic gradients and then
    twice per probed coordinate with no tape active. Requires float64
    parameters; relative error uses max(1, |analytic|, |numeric|) as scale.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ParameterError(f"grad_check step h={h} outside [1e-6, 1e-3]")
    for p in params:
        if p.value.dtype != np.float64:
            raise ParameterError("grad_check requires float64 parameters")
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=max_coords_per_param, replace=False)
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + h
            fp = float(f().value)
            flat[idx] = keep - h
            fm = float(f().value)
            flat[idx] = keep
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(gflat[idx]), abs(numeric))
            worst = max(worst, err)
    return worst
