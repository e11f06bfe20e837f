"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 for training, float64 for gradient
checks). Every differentiable primitive records a backward closure on the
active :class:`Tape`; ``Tape.backward`` replays the closures in exact
reverse order of recording, accumulating into ``Tensor.grad``. With no
tape active the same primitives run as plain numpy, which is the
inference fast path.

``check_gradients`` is the independent oracle: central finite differences
per coordinate, subsampled for large tensors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ParameterError",
    "NumericError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "sum_",
    "mean",
    "slice_",
    "gather",
    "cross_entropy",
    "check_gradients",
    "GradientReport",
    "rng_from_seed",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid operation parameters (e.g. non-positive temperature)."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values where it must not."""


class Tensor:
    """Dense multi-dimensional array with an optional accumulated gradient.

    Tensors are treated as immutable once produced by an operation;
    gradient accumulation via the tape is the only sanctioned mutation.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the stored values (length == product(shape))."""
        return self.data.reshape(-1)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the module-level primitives so
    # everything lands on the tape.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Single-writer: a tape must not be shared across threads. Backward
    traversal visits nodes in exact reverse order of recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)=1 and propagate through the recorded nodes in reverse."""
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node.out.grad is not None:
                node.backward(node.out.grad)

    def clear(self) -> None:
        self.nodes.clear()


_TAPE_STACK: list[Tape] = []


def _record(out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1].nodes.append(_Node(out, backward))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64), requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    """Matrix product with standard broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    _record(out, backward)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    _record(out, backward)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape))

    _record(out, backward)
    return out


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes), requires_grad=x.requires_grad)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.transpose(inverse))

    _record(out, backward)
    return out


def slice_(x, index) -> Tensor:
    """Basic slicing (ints/slices/ellipsis); backward scatters into zeros."""
    x = as_tensor(x)
    out = Tensor(x.data[index], requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    _record(out, backward)
    return out


def gather(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding); backward scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(
            f"gather ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    _record(out, backward)
    return out


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """exp((x - max)/temperature), normalized along ``axis``."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        inner = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate((s * (g - inner)) / temperature)

    _record(out, backward)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by gain and shift by bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data,
                 requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad)

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            # d xhat/dx folded analytically: remove mean and projection on xhat
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    _record(out, backward)
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """Tanh-form gaussian error linear unit."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        x._accumulate(g * dv)

    _record(out, backward)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    s = s.astype(v.dtype, copy=False)
    out = Tensor(s, requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * s * (1.0 - s))

    _record(out, backward)
    return out


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    _record(out, backward)
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis] if isinstance(axis, int) else int(np.prod([x.shape[a] for a in axis]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class ``labels`` (0-based).

    logits: (batch, classes). Stable log-sum-exp; backward is
    (softmax - onehot) / batch.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ParameterError(f"labels out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    value = nll.mean(dtype=logits.dtype)
    if not np.isfinite(value):
        raise NumericError("cross_entropy produced a non-finite loss")
    out = Tensor(np.asarray(value, dtype=logits.dtype), requires_grad=logits.requires_grad)

    def backward(g: np.ndarray) -> None:
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# RNG plumbing


def _stream_key(name) -> int:
    digest = hashlib.blake2s(str(name).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_from_seed(seed: int, *stream: object) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and a named stream.

    Identical (seed, stream) always yields the identical sequence, which
    is what makes dataset generation and training reproducible.
    """
    entropy = [int(seed)] + [_stream_key(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradientReport:
    """Outcome of a finite-difference check over a set of parameters."""

    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e}"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    *,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    subsample_above: int = 4096,
    seed: int = 0,
) -> GradientReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic scalar computation over ``params``
    (64-bit recommended; finite differences are unreliable at 32-bit).
    Tensors larger than ``subsample_above`` entries are probed at
    ``max_coords`` sampled coordinates.
    """
    params = dict(params)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ParameterError(f"check_gradients requires float64 parameters ({name} is {p.data.dtype})")
        p.zero_grad()

    with Tape() as tape:
        loss = fn()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is non-finite at the evaluation point")
        tape.backward(loss)

    analytic = {}
    for name, p in params.items():
        analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.zero_grad()

    rng = rng_from_seed(seed, "gradcheck")
    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= subsample_above:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=min(max_coords, size), replace=False)
        a_flat = analytic[name].reshape(-1)
        gmax = float(np.abs(a_flat).max()) if size else 0.0
        floor = max(1e-3 * gmax, 1e-8)
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = float(fn().data)
            flat[idx] = orig - step
            f_minus = float(fn().data)
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = float(a_flat[idx])
            denom = max(abs(ad), abs(fd), floor)
            worst = max(worst, abs(ad - fd) / denom)
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    return GradientReport(max_rel_err=max_err, per_param=per_param, tol=tol)
