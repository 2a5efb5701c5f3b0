"""Small dense tensor layer with tape-based reverse-mode gradients.

Tensors wrap a numpy array. Operations run eagerly; when a :class:`GradTape`
is active on the current thread and at least one input requires a gradient,
the op is appended to the tape together with a closure computing its
vector-Jacobian product. Shapes are never broadcast implicitly: the only
row-broadcasting ops are ``linear``/``add_bias`` (bias), ``layer_norm`` (gain/bias) and
``sequence_nll``, where it is part of the op's definition.

Activations are row-major ``(batch, features)``; a weight ``W`` of shape
``(n_out, n_in)`` is applied as ``linear(x, W) == x @ W.T``, i.e. ``W·x`` per row.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError

__all__ = [
    "Tensor", "GradTape", "as_tensor", "matmul", "linear", "add_bias", "add", "sub", "mul",
    "sigmoid", "tanh", "layer_norm", "softmax", "log_softmax", "embedding",
    "sequence_nll", "dot", "total", "elementwise", "finite_diff_check",
]

_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable-by-convention array holder.

    ``requires_grad`` marks leaves we want gradients for and any value
    computed from them on an active tape.
    """

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of primitive ops, replayed backward by :meth:`gradient`.

    Use as a context manager; a tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """d target / d source for every source (zeros if untouched)."""
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(out_data, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape.records.append((out, inputs, backward))
        return out
    return Tensor(out_data)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.data.shape} by {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), backward)


def linear(x, w, bias=None) -> Tensor:
    """Apply ``W`` (n_out, n_in) to a vector or to each row of a batch, plus optional bias."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim not in (1, 2) or xd.shape[-1] != wd.shape[1]:
        raise DimensionError(f"linear: weight {wd.shape} incompatible with input {xd.shape}")
    out = xd @ wd.T
    if bias is None:
        def backward(g):
            gw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
            return g @ wd, gw

        return _record(out, (x, w), backward)

    b = as_tensor(bias)
    if b.data.shape != (wd.shape[0],):
        raise DimensionError(f"linear: bias {b.data.shape} does not match weight {wd.shape}")
    out = out + b.data

    def backward_b(g):
        gw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return g @ wd, gw, gb

    return _record(out, (x, w, b), backward_b)


def add_bias(x, bias) -> Tensor:
    """Add a (n,) bias to every row of a (B, n) tensor."""
    x, b = as_tensor(x), as_tensor(bias)
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise DimensionError(f"add_bias: bias {b.data.shape} does not fit rows of {x.data.shape}")
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "mul": mul, "add": add, "sub": sub}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- normalisation

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) * gain + bias over the last axis."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    n = xd.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise DimensionError(
            f"layer_norm: input {xd.shape}, gain {gain.data.shape}, bias {bias.data.shape}")
    if n < 2:
        raise DimensionError("layer_norm: need at least 2 features")
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if g.ndim == 1:
            return dx, g * xhat, g
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(xhat * gd + bias.data, (x, gain, bias), backward)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise DomainError("log_softmax of an empty vector")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)
    return _record(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------- lookup / losses

def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    td = table.data

    def backward(g):
        out = np.zeros_like(td)
        np.add.at(out, ids, g)
        return (out,)

    return _record(td[ids], (table,), backward)


def sequence_nll(logits: Sequence[Tensor], targets, weights) -> Tensor:
    """Per-row weighted negative log-likelihood over a time-major list of logits.

    ``logits[t]`` has shape (B, V); ``targets`` and ``weights`` have shape
    (B, T). Returns a (B,) tensor ``sum_t weights[b, t] * -log p_t[b, targets[b, t]]``.
    Zero weights mask padding.
    """
    logits = tuple(as_tensor(l) for l in logits)
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights)
    n_rows, n_steps = targets.shape
    if len(logits) != n_steps or weights.shape != targets.shape:
        raise DimensionError(
            f"sequence_nll: {len(logits)} steps of logits vs targets {targets.shape}, "
            f"weights {weights.shape}")
    rows = np.arange(n_rows)
    out = np.zeros(n_rows, dtype=logits[0].data.dtype if logits else weights.dtype)
    probs = []
    for t, lt in enumerate(logits):
        z = lt.data - lt.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        out = out + weights[:, t] * (lse - z[rows, targets[:, t]])
        probs.append(z)

    def backward(g):
        grads = []
        for t, z in enumerate(probs):
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            p[rows, targets[:, t]] -= 1.0
            grads.append((g * weights[:, t])[:, None] * p)
        return grads

    return _record(out, logits, backward)


def dot(x, weights) -> Tensor:
    """Scalar ``sum(x * weights)``; ``weights`` is a constant."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.data.shape:
        raise DimensionError(f"dot: shape mismatch {x.data.shape} vs {w.shape}")
    return _record(np.sum(x.data * w), (x,), lambda g: (g * w,))


def total(x) -> Tensor:
    x = as_tensor(x)
    return _record(np.sum(x.data), (x,), lambda g: (np.full_like(x.data, g),))


# ---------------------------------------------------------------- gradient checking

def tape_gradients(f, params: dict) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f`` on leaf tensors and return (value, gradients by name)."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with GradTape() as tape:
        out = f(leaves)
    grads = tape.gradient(out, list(leaves.values()))
    return float(out.data), dict(zip(leaves, grads))


def finite_diff_check(f, params: dict, h: float = 1e-5, grad=None,
                      coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a dict of parameter arrays/tensors to a scalar. The analytic
    gradient comes from the tape unless ``grad`` (params -> dict of arrays) is
    given. ``coords`` limits the check to that many randomly chosen entries per
    parameter. The error per entry is ``|a - n| / max(1, |a|)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base = float(np.asarray(f(params)))
    if not np.isfinite(base):
        raise EvaluationError(f"f(theta) is not finite: {base}")
    analytic = grad(params) if grad is not None else tape_gradients(f, params)[1]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat_idx: Iterable[int] = range(value.size)
        if coords is not None and value.size > coords:
            flat_idx = rng.choice(value.size, size=coords, replace=False)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in flat_idx:
            idx = np.unravel_index(i, value.shape)
            plus, minus = dict(params), dict(params)
            vp, vm = value.copy(), value.copy()
            vp[idx] += h
            vm[idx] -= h
            plus[name], minus[name] = vp, vm
            fp, fm = float(np.asarray(f(plus))), float(np.asarray(f(minus)))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite f near {name}{list(idx)}")
            numeric = (fp - fm) / (2.0 * h)
            a = a_flat[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def directional_diff_check(f, params: dict, h: float = 1e-5, directions: int = 1,
                           seed: int = 0) -> float:
    """Compare <grad, d> with a central difference along random unit directions d.

    One direction perturbs every parameter at once, so this covers the whole
    gradient at the cost of two evaluations. Error is ``|a - n| / max(1, |a|)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base, analytic = tape_gradients(f, params)
    if not np.isfinite(base):
        raise EvaluationError(f"f(theta) is not finite: {base}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        d = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        norm = np.sqrt(sum(float(np.vdot(x, x)) for x in d.values()))
        d = {k: x / norm for k, x in d.items()}
        fp = float(np.asarray(f({k: v + h * d[k] for k, v in params.items()})))
        fm = float(np.asarray(f({k: v - h * d[k] for k, v in params.items()})))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError("non-finite f along check direction")
        numeric = (fp - fm) / (2.0 * h)
        a = math.fsum(float(np.vdot(analytic[k], d[k])) for k in params)
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
