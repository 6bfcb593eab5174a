"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every differentiable computation in the lab is built from the primitives in
this module. A :class:`Tape` records each primitive as it is evaluated
(define-by-run); :func:`backward` walks the recorded ops in exact reverse
order and accumulates adjoints, pushing parameter gradients into the
:class:`ParamStore` the parameters came from.

Shapes never broadcast except scalar-with-tensor. Mismatches raise
:class:`ShapeError`; any non-finite intermediate raises :class:`NumericalError`.
"""

from __future__ import annotations

import builtins
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, StaleTapeError

__all__ = [
    "ShapeError",
    "NumericalError",
    "StaleTapeError",
    "ParamStore",
    "Node",
    "Tape",
    "evaluate",
    "backward",
    "finite_difference_gradient",
    "adam_step",
    "make_rng",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameters with gradient slots and Adam moments.

    Iteration is lexicographic by name. ``version`` increments whenever a value
    is replaced or updated, which lets tapes detect that they are stale.
    """

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0
        self.version = 0
        for name, value in (values or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        self.version += 1

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self):
        return iter(self.names())

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._values if n.startswith(prefix))

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    def set_moments(self, name: str, m: np.ndarray, v: np.ndarray) -> None:
        self._m[name] = np.array(m, dtype=np.float64).reshape(self._values[name].shape)
        self._v[name] = np.array(v, dtype=np.float64).reshape(self._values[name].shape)

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self._grads[name] += grad

    def bump(self) -> None:
        self.version += 1

    def n_params(self, prefix: str = "") -> int:
        return builtins.sum(self._values[n].size for n in self.names(prefix))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.names():
            out[n] = self._values[n].copy()
            out._m[n] = self._m[n].copy()
            out._v[n] = self._v[n].copy()
        out.step = self.step
        return out

    def values(self) -> dict[str, np.ndarray]:
        return {n: self._values[n] for n in self.names()}

    def update(self, other: "ParamStore") -> None:
        for n in other.names():
            self[n] = other[n].copy()

    def equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) for n in self.names())


def cosine_lr(lr: float, lr_final: float | None, step: int, steps: int) -> float:
    """Cosine decay from ``lr`` at step 0 to ``lr_final`` at ``steps - 1``; constant when ``lr_final`` is None."""
    if lr_final is None or steps <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1 + math.cos(math.pi * step / (steps - 1)))


def adam_step(
    params: ParamStore,
    lr: float,
    names: Iterable[str] | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update on ``names`` (default: all), then zero all grads.

    The step is refused with :class:`NumericalError` if any selected gradient is
    non-finite; nothing is modified in that case.
    """
    selected = params.names() if names is None else sorted(names)
    for n in selected:
        if not np.all(np.isfinite(params.grad(n))):
            raise NumericalError(f"non-finite gradient for {n!r}; Adam step refused")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for n in selected:
        g = params.grad(n)
        m, v = params.moments(n)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params._values[n] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()
    params.bump()
    return params


# ---------------------------------------------------------------------------
# tape


class Node:
    """A value recorded on a tape. Supports ``+ - * @`` and unary minus."""

    __slots__ = ("tape", "id", "value", "op", "inputs", "vjp", "__weakref__")

    def __init__(self, tape: "Tape", value: np.ndarray, op: str, inputs: tuple, vjp):
        self.tape = tape
        self.value = value
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"


class Tape:
    """Ordered record of primitive evaluations.

    Leaves are created with :meth:`constant`, :meth:`input` and :meth:`param`.
    Parameter leaves remember the store version they were read at; running
    :func:`backward` after the store has been updated raises
    :class:`StaleTapeError`.
    """

    def __init__(self, check_finite: bool = True, frozen: Iterable[ParamStore] = ()):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._params: dict[str, tuple[ParamStore, Node]] = {}
        self._param_versions: dict[int, int] = {}
        self._store_by_id: dict[int, ParamStore] = {}
        self._frozen = {id(s) for s in frozen}

    def freeze(self, store: ParamStore) -> None:
        """Read ``store`` as constants: no gradient is ever accumulated into it."""
        self._frozen.add(id(store))

    def constant(self, value) -> Node:
        return Node(self, _as_array(value), "const", (), None)

    def input(self, value) -> Node:
        return Node(self, _as_array(value).copy(), "input", (), None)

    def param(self, store: ParamStore, name: str) -> Node:
        key = f"{id(store)}:{name}"
        if key in self._params:
            return self._params[key][1]
        node = Node(self, store[name], f"param:{name}", (), None)
        if id(store) in self._frozen:
            node.op = f"frozen:{name}"
            return node
        self._params[key] = (store, node)
        self._param_versions[id(store)] = store.version
        self._store_by_id[id(store)] = store
        return node

    def params(self) -> list[tuple[ParamStore, str, Node]]:
        out = []
        for key, (store, node) in self._params.items():
            out.append((store, key.split(":", 1)[1], node))
        return out

    def record(self, value: np.ndarray, op: str, inputs: tuple, vjp) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced by {op} at node {len(self.nodes)}")
        return Node(self, value, op, inputs, vjp)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def evaluate(fn: Callable[..., Node], *inputs, check_finite: bool = True) -> tuple[Node, Tape]:
    """Run ``fn(tape, *input_nodes)`` on a fresh tape; returns ``(output, tape)``."""
    tape = Tape(check_finite=check_finite)
    nodes = [tape.input(x) for x in inputs]
    return fn(tape, *nodes), tape


def backward(output: Node, seed=None) -> dict[int, np.ndarray]:
    """Reverse sweep from ``output``.

    Parameter gradients are accumulated into their stores; the returned dict
    maps node id to adjoint for every node reached (handy for input leaves).
    """
    tape = output.tape
    for sid, ver in tape._param_versions.items():
        if tape._store_by_id[sid].version != ver:
            raise StaleTapeError("parameters changed after this tape was recorded")
    if seed is None:
        seed = np.ones_like(output.value)
    seed = _as_array(seed)
    if seed.shape != output.shape:
        raise ShapeError(f"backward: seed shape {seed.shape} vs output shape {output.shape}")
    adj: dict[int, np.ndarray] = {output.id: seed.copy()}
    for node in reversed(tape.nodes[: output.id + 1]):
        g = adj.get(node.id)
        if g is None or node.vjp is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.id in adj:
                adj[inp.id] = adj[inp.id] + gi
            else:
                adj[inp.id] = gi
    for store, name, node in tape.params():
        if node.id in adj:
            store.accumulate(name, adj[node.id])
    return adj


def grad_of(adj: dict[int, np.ndarray], node: Node) -> np.ndarray:
    """Adjoint for ``node`` from a :func:`backward` result (zeros if unreached)."""
    return adj.get(node.id, np.zeros_like(node.value))


def finite_difference_gradient(
    f: Callable[[], float], params: ParamStore, h: float = 1e-6, names: Sequence[str] | None = None
) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. every scalar parameter.

    ``f`` reads the parameter values from ``params`` each time it is called.
    Values are restored exactly afterwards.
    """
    out = {}
    for n in params.names() if names is None else names:
        arr = params._values[n]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            params.bump()
            fp = f()
            flat[i] = orig - h
            params.bump()
            fm = f()
            flat[i] = orig
            params.bump()
            gflat[i] = (fp - fm) / (2.0 * h)
        out[n] = g
    return out


def finite_difference_input(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f`` at the array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(x)
        xf[i] = orig - h
        fm = f(x)
        xf[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, "add", (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, "sub", (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv, "mul", (a, b), lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape))
    )


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record(a.value * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    mask = a.value > 0
    d = np.where(mask, 1.0, slope)
    return a.tape.record(a.value * d, "leaky_relu", (a,), lambda g: (g * d,))


def silu(a: Node) -> Node:
    x = a.value
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    d = s * (1.0 + x * (1.0 - s))
    return a.tape.record(x * s, "silu", (a,), lambda g: (g * d,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sqrt(a: Node, eps: float = 0.0) -> Node:
    y = np.sqrt(a.value + eps)
    return a.tape.record(y, "sqrt", (a,), lambda g: (g * 0.5 / y,))


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    shape = a.shape
    return a.tape.record(np.sum(a.value, axis=axis), "sum", (a,), lambda g: (_expand(g, shape, axis),))


def mean(a: Node, axis: int | None = None) -> Node:
    shape = a.shape
    n = a.value.size if axis is None else shape[axis]
    return a.tape.record(np.mean(a.value, axis=axis), "mean", (a,), lambda g: (_expand(g, shape, axis) / n,))


def sq_l2(a: Node, axis: int | None = None) -> Node:
    """Sum of squares (over everything, or along ``axis``)."""
    x = a.value
    return a.tape.record(np.sum(x * x, axis=axis), "sq_l2", (a,), lambda g: (2.0 * x * _expand(g, x.shape, axis),))


def max(a: Node, axis: int | None = None) -> Node:  # noqa: A001
    """True max; the adjoint goes to the first maximal entry."""
    x = a.value
    if axis is None:
        idx = np.argmax(x)
        y = x.reshape(-1)[idx]

        def vjp(g):
            out = np.zeros(x.size)
            out[idx] = g
            return (out.reshape(x.shape),)

        return a.tape.record(np.asarray(y), "max", (a,), vjp)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    y = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

    def vjp(g):
        out = np.zeros_like(x)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return a.tape.record(y, "max", (a,), vjp)


def logsumexp(a: Node, axis: int | None = None) -> Node:
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = (np.log(s) + m)
    p = e / s
    y = y.reshape(()) if axis is None else y.squeeze(axis)
    return a.tape.record(y, "logsumexp", (a,), lambda g: (p * _expand(g, x.shape, axis),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return tape.record(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x, w, b) -> Node:
    """``x @ w + b`` with ``b`` (shape ``(out,)``) added to every row."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} vs {(w.shape[1],)}")
    xv, wv = x.value, w.value
    return tape.record(xv @ wv + b.value, "affine", (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape mismatch {tuple(ref)} vs {x.shape}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tape.record(
        np.concatenate([x.value for x in xs], axis=axis),
        "concat",
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice_(a: Node, start: int, stop: int, axis: int = 0) -> Node:
    shape = a.shape
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return a.tape.record(a.value[idx].copy(), "slice", (a,), vjp)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def gather_rows(table: Node, ids) -> Node:
    """Row lookup ``table[ids]`` (embedding lookup); adjoints scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: ids out of range for table {table.shape}")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return table.tape.record(table.value[ids], "gather_rows", (table,), vjp)


def broadcast_rows(v: Node, n: int) -> Node:
    """Repeat a 1-D node ``n`` times as rows of an ``(n, d)`` node."""
    if v.value.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected 1-D, got {v.shape}")
    return v.tape.record(np.tile(v.value, (n, 1)), "broadcast_rows", (v,), lambda g: (g.sum(axis=0),))


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal features of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------------------
# convolution (NCHW, stride 1, zero "same" padding, odd kernels)


def _patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # (N, C, H, W, kh, kw)
    return np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x (N,C,H,W), w (O,C,kh,kw) -> (N,O,H,W); cross-correlation
    p = _patches(x, w.shape[2], w.shape[3])
    return np.einsum("nchwij,ocij->nohw", p, w, optimize=True)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    p = _patches(x, kh, kw)
    return np.einsum("nchwij,nohw->ocij", p, g, optimize=True)


def _conv_input_grad(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _conv_same(g, wf)


def conv2d(x, w, b) -> Node:
    """2-D cross-correlation, weights ``(out, in, kh, kw)``, bias ``(out,)``."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    if wv.shape[2] % 2 == 0 or wv.shape[3] % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd, got {w.shape}")
    if b.shape != (wv.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} vs {(wv.shape[0],)}")
    y = _conv_same(xv, wv) + b.value[None, :, None, None]

    def vjp(g):
        return (_conv_input_grad(g, wv), _conv_weight_grad(xv, g, wv.shape[2], wv.shape[3]), g.sum(axis=(0, 2, 3)))

    return tape.record(y, "conv2d", (x, w, b), vjp)


def conv_transpose2d(x, w, b) -> Node:
    """Transposed convolution, weights ``(in, out, kh, kw)``, stride 1, same size."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"conv_transpose2d: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (wv.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} vs {(wv.shape[1],)}")
    # equivalent cross-correlation kernel: flip spatially, swap in/out
    weq = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    y = _conv_same(xv, weq) + b.value[None, :, None, None]

    def vjp(g):
        gx = _conv_input_grad(g, weq)
        gweq = _conv_weight_grad(xv, g, wv.shape[2], wv.shape[3])
        gw = gweq.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return tape.record(y, "conv_transpose2d", (x, w, b), vjp)


def channel_bias(x: Node, v: Node) -> Node:
    """Add a per-sample, per-channel vector ``v`` ``(N, C)`` to ``x`` ``(N, C, H, W)``."""
    if x.value.ndim != 4 or v.shape != x.shape[:2]:
        raise ShapeError(f"channel_bias: shape mismatch {x.shape} vs {v.shape}")
    tape = _tape_of(x, v)
    return tape.record(
        x.value + v.value[:, :, None, None], "channel_bias", (x, v), lambda g: (g, g.sum(axis=(2, 3)))
    )


def spatial_broadcast(v: Node, h: int, w: int) -> Node:
    """Tile ``(N, C)`` to ``(N, C, h, w)``; used for condition concatenation."""
    if v.value.ndim != 2:
        raise ShapeError(f"spatial_broadcast: expected 2-D, got {v.shape}")
    val = np.broadcast_to(v.value[:, :, None, None], (*v.shape, h, w)).copy()
    return v.tape.record(val, "spatial_broadcast", (v,), lambda g: (g.sum(axis=(2, 3)),))
