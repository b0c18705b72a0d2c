"""Minimal reverse-mode autodiff on a dynamically recorded tape.

The tree recursion in the actors has morphology-dependent structure, so ops
record onto an explicit tape as they execute; backward replays the nodes in
reverse order exactly once. Only the operations the actors and losses need
exist here: dense linear maps, a few pointwise nonlinearities, reductions,
and shape plumbing. Broadcasting is restricted to row-vector bias/scale so
every shape stays explicit.

Training runs in single precision; tests that check gradients switch the
default dtype to float64 via `set_default_dtype`.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

Array = np.ndarray

_DEFAULT_DTYPE = np.float32


class ShapeError(Exception):
    pass


class NotScalarError(Exception):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Value holder; `data` is a numpy array that ops never mutate."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("name", "stage", "out", "inputs", "vjp", "out_shape", "in_shapes")

    def __init__(self, name, stage, out, inputs, vjp):
        self.name = name
        self.stage = stage
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.out_shape = out.data.shape
        self.in_shapes = tuple(t.data.shape for t in inputs)


class Tape:
    """Records executed ops; context-manages the active recording scope."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _push(self)
        return self

    def __exit__(self, *exc):
        _pop(self)
        return False

    def op_counts(self, stage: str | None = None) -> dict[str, int]:
        out: dict[str, int] = {}
        for n in self.nodes:
            if stage is None or n.stage == stage:
                out[n.name] = out.get(n.name, 0) + 1
        return out

    def muladd_count(self, stage: str | None = None) -> int:
        """Multiply-add count of the recorded forward ops (see `_muladds`)."""
        return sum(_muladds(n) for n in self.nodes if stage is None or n.stage == stage)


_TAPES: list[Tape] = []
_STAGE: list[str] = ["default"]


def _push(t: Tape):
    _TAPES.append(t)


def _pop(t: Tape):
    assert _TAPES and _TAPES[-1] is t
    _TAPES.pop()


@contextmanager
def stage(name: str):
    """Label ops recorded inside the block (used by the FLOPs instrumentation)."""
    _STAGE.append(name)
    try:
        yield
    finally:
        _STAGE.pop()


def _record(name, out, inputs, vjp):
    if _TAPES:
        _TAPES[-1].nodes.append(Node(name, _STAGE[-1], out, inputs, vjp))
    return out


def _muladds(node: Node) -> int:
    """Mul-add cost of one forward op. Pointwise transcendentals cost zero;
    linear maps cost the classic m*k*n; pointwise arithmetic costs its size."""
    name = node.name
    if name in ("matmul", "matmul_bt", "matmul_at"):
        (m, k), second = node.in_shapes
        if name == "matmul_at":
            m, k = k, m
        n = second[0] if name == "matmul_bt" else second[1]
        return m * k * n
    if name == "matvec":
        m, k = node.in_shapes[0]
        return m * k
    if name in ("add", "sub", "elementwise_mul", "scalar_mul", "square",
                "add_rowvec", "mul_rowvec", "mul_colvec", "minimum", "add_scalar"):
        return int(np.prod(node.out_shape))
    if name in ("sum", "mean", "frobenius_norm_sq", "sum_axis", "mean_axis"):
        return int(np.prod(node.in_shapes[0]))
    return 0  # softplus, tanh, exp, log, clamp, concat, narrow, reshape


def backward(tape: Tape, loss: Tensor, wrt=None) -> dict[Tensor, Array]:
    """Gradients of a scalar loss for every requires_grad leaf on the tape.

    Visits the recorded nodes in reverse order exactly once. Leaves listed in
    `wrt` that never influenced the loss come back as zeros.
    """
    if loss.data.shape != ():
        raise NotScalarError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    tensors: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.out))
        if g_out is None:
            continue
        for t, g in node.vjp(g_out):
            if g is None:
                continue
            key = id(t)
            tensors[key] = t
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=t.data.dtype)

    out: dict[Tensor, Array] = {}
    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                out[t] = grads.get(id(t), np.zeros_like(t.data))
    if loss.requires_grad and id(loss) not in seen:
        out[loss] = grads[id(loss)]
    for t in wrt or ():
        if t not in out:
            out[t] = np.zeros_like(t.data)
    return out


def _binary_same_shape(name, a, b, fwd, vjp_builder):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(fwd(a.data, b.data), dtype=a.data.dtype)
    return _record(name, out, (a, b), vjp_builder(a, b, out))


def add(a, b) -> Tensor:
    return _binary_same_shape(
        "add", a, b, lambda x, y: x + y, lambda a, b, o: lambda g: [(a, g), (b, g)]
    )


def sub(a, b) -> Tensor:
    return _binary_same_shape(
        "sub", a, b, lambda x, y: x - y, lambda a, b, o: lambda g: [(a, g), (b, -g)]
    )


def elementwise_mul(a, b) -> Tensor:
    return _binary_same_shape(
        "elementwise_mul", a, b, lambda x, y: x * y,
        lambda a, b, o: lambda g: [(a, g * b.data), (b, g * a.data)],
    )


def minimum(a, b) -> Tensor:
    def vjp(a, b, o):
        mask = (a.data <= b.data)

        def run(g):
            return [(a, g * mask), (b, g * ~mask)]

        return run

    return _binary_same_shape("minimum", a, b, np.minimum, vjp)


def add_rowvec(a, v) -> Tensor:
    """Bias add: (B, n) + (n,) -> (B, n). The one permitted broadcast."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {a.data.shape} and {v.data.shape} incompatible")
    out = Tensor(a.data + v.data[None, :], dtype=a.data.dtype)
    return _record("add_rowvec", out, (a, v),
                   lambda g: [(a, g), (v, g.sum(axis=0))])


def mul_rowvec(a, v) -> Tensor:
    """Column scaling: (B, n) * (n,) -> (B, n)."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"mul_rowvec: shapes {a.data.shape} and {v.data.shape} incompatible")
    out = Tensor(a.data * v.data[None, :], dtype=a.data.dtype)
    return _record("mul_rowvec", out, (a, v),
                   lambda g: [(a, g * v.data[None, :]), (v, (g * a.data).sum(axis=0))])


def add_scalar(a, s) -> Tensor:
    """Broadcast-add a scalar tensor to every element of `a`."""
    a, s = as_tensor(a), as_tensor(s)
    if s.data.shape != ():
        raise ShapeError(f"add_scalar: scalar operand has shape {s.data.shape}")
    out = Tensor(a.data + s.data, dtype=a.data.dtype)
    return _record("add_scalar", out, (a, s),
                   lambda g: [(a, g), (s, np.asarray(g.sum(), dtype=s.data.dtype))])


def mul_colvec(a, v) -> Tensor:
    """Row scaling: (m, n) * (m,) -> (m, n), i.e. diag(v) @ a."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"mul_colvec: shapes {a.data.shape} and {v.data.shape} incompatible")
    out = Tensor(a.data * v.data[:, None], dtype=a.data.dtype)
    return _record("mul_colvec", out, (a, v),
                   lambda g: [(a, g * v.data[:, None]), (v, (g * a.data).sum(axis=1))])


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * c, dtype=a.data.dtype)
    return _record("scalar_mul", out, (a,), lambda g: [(a, g * c)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")
    out = Tensor(a.data @ b.data, dtype=a.data.dtype)
    return _record("matmul", out, (a, b),
                   lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)])


def matmul_bt(a, b) -> Tensor:
    """a @ b.T without materializing the transpose on the tape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_bt: shapes {a.data.shape} and {b.data.shape} incompatible")
    out = Tensor(a.data @ b.data.T, dtype=a.data.dtype)
    return _record("matmul_bt", out, (a, b),
                   lambda g: [(a, g @ b.data), (b, g.T @ a.data)])


def matmul_at(a, b) -> Tensor:
    """a.T @ b without materializing the transpose on the tape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul_at: shapes {a.data.shape} and {b.data.shape} incompatible")
    out = Tensor(a.data.T @ b.data, dtype=a.data.dtype)
    return _record("matmul_at", out, (a, b),
                   lambda g: [(a, b.data @ g.T), (b, a.data @ g)])


def matvec(A, x) -> Tensor:
    A, x = as_tensor(A), as_tensor(x)
    if A.data.ndim != 2 or x.data.ndim != 1 or A.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"matvec: shapes {A.data.shape} and {x.data.shape} incompatible")
    out = Tensor(A.data @ x.data, dtype=A.data.dtype)
    return _record("matvec", out, (A, x),
                   lambda g: [(A, np.outer(g, x.data)), (x, A.data.T @ g)])


def _unary(name, a, fwd, grad_fn):
    a = as_tensor(a)
    out = Tensor(fwd(a.data), dtype=a.data.dtype)

    def vjp(g):
        return [(a, g * grad_fn(a.data, out.data))]

    return _record(name, out, (a,), vjp)


def softplus(a) -> Tensor:
    # log(1 + e^x), computed stably; gradient is the logistic sigmoid.
    return _unary("softplus", a, lambda x: np.logaddexp(0.0, x),
                  lambda x, y: 1.0 / (1.0 + np.exp(-x)))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda x, y: 2.0 * x)


def clamp(a, lo: float, hi: float) -> Tensor:
    return _unary("clamp", a, lambda x: np.clip(x, lo, hi),
                  lambda x, y: ((x >= lo) & (x <= hi)).astype(x.dtype))


def sum_(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), dtype=a.data.dtype)
    return _record("sum", out, (a,), lambda g: [(a, np.full_like(a.data, g))])


def mean(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(), dtype=a.data.dtype)
    n = a.data.size
    return _record("mean", out, (a,), lambda g: [(a, np.full_like(a.data, g / n))])


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), dtype=a.data.dtype)

    def vjp(g):
        return [(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())]

    return _record("sum_axis", out, (a,), vjp)


def mean_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis), dtype=a.data.dtype)
    n = a.data.shape[axis]

    def vjp(g):
        return [(a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy())]

    return _record("mean_axis", out, (a,), vjp)


def frobenius_norm_sq(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data * a.data), dtype=a.data.dtype)
    return _record("frobenius_norm_sq", out, (a,), lambda g: [(a, 2.0 * g * a.data)])


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), dtype=ts[0].data.dtype)
    sizes = [t.data.shape[axis] for t in ts]

    def vjp(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return list(zip(ts, pieces))

    return _record("concat", out, tuple(ts), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {tuple(shape)}")
    out = Tensor(a.data.reshape(shape).copy(), dtype=a.data.dtype)
    return _record("reshape", out, (a,), lambda g: [(a, g.reshape(a.data.shape))])


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    out = Tensor(a.data[tuple(index)].copy(), dtype=a.data.dtype)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[tuple(index)] = g
        return [(a, full)]

    return _record("narrow", out, (a,), vjp)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.t = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: AdamState,
    lr: float = 3e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update with bias correction; missing grads count as zero."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step '{name}': grad {g.shape} vs param {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
