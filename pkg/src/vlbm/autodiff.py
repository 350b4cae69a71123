"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to the :class:`Tensor` objects it
produced. :func:`backward` replays the record in reverse and returns a
:class:`GradMap` keyed by leaf name. The op set is deliberately small and closed;
everything else in the package is composed from it.

Elementwise binary ops broadcast like numpy and ``matmul`` broadcasts its batch
dimensions, so a parameter stack of shape ``(B, in, out)`` can be applied to a
shared input of shape ``(rows, in)`` in one op.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

OPS = ("matmul", "add", "sub", "mul", "concat", "slice", "sum", "mean",
       "square", "exp", "log", "sigmoid", "tanh", "softplus")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, where: str = ""):
        self.op = op
        super().__init__(f"non-finite result in op {op!r}{where}")


class Tensor:
    __slots__ = ("value", "tape", "idx")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, idx: int = -1):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, idx={self.idx})"

    def __float__(self):
        return float(self.value)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.op("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.op("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.op("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.op("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.tape.op("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.op("mul", self._lift(other), self)

    def __neg__(self):
        return self.tape.op("sub", self.tape.constant(0.0), self)

    def __matmul__(self, other):
        return self.tape.op("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.op("matmul", self._lift(other), self)

    def __getitem__(self, index):
        return self.tape.op("slice", self, index=index)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    aux: dict = field(default_factory=dict)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))  # never overflows
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _forward(kind: str, vals: list[np.ndarray], aux: dict) -> np.ndarray:
    if kind == "matmul":
        a, b = vals
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            return np.matmul(a, b)
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    if kind in ("add", "sub", "mul"):
        a, b = vals
        _check_broadcast(kind, a, b)
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        return a * b
    if kind == "concat":
        axis = aux["axis"]
        ref = vals[0].shape
        for v in vals[1:]:
            if v.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(v.shape, ref))
                                         if i != axis % len(ref)):
                raise ShapeError(f"concat: incompatible shapes {ref} and {v.shape} along axis {axis}")
        return np.concatenate(vals, axis=axis)
    (x,) = vals
    if kind == "slice":
        return x[aux["index"]]
    if kind == "sum":
        return np.sum(x, axis=aux.get("axis"), keepdims=aux.get("keepdims", False))
    if kind == "mean":
        return np.mean(x, axis=aux.get("axis"), keepdims=aux.get("keepdims", False))
    if kind == "square":
        return x * x
    if kind == "exp":
        return np.exp(x)
    if kind == "log":
        return np.log(x)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softplus":
        return _softplus(x)
    raise ValueError(f"unknown op {kind!r}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def _vjp(node: Node, g: np.ndarray, vals: list[np.ndarray]) -> list[np.ndarray]:
    kind, out, aux = node.kind, node.value, node.aux
    if kind == "matmul":
        a, b = vals
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]
    if kind == "add":
        return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]
    if kind == "sub":
        return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]
    if kind == "mul":
        a, b = vals
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if kind == "concat":
        axis = aux["axis"]
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return np.split(g, bounds, axis=axis)
    (x,) = vals
    if kind == "slice":
        gx = np.zeros_like(x)
        gx[aux["index"]] += g
        return [gx]
    if kind == "sum":
        return [np.array(_expand_reduced(g, x.shape, aux.get("axis"), aux.get("keepdims", False)))]
    if kind == "mean":
        full = _expand_reduced(g, x.shape, aux.get("axis"), aux.get("keepdims", False))
        return [np.array(full) * (out.size / x.size)]
    if kind == "square":
        return [2.0 * x * g]
    if kind == "exp":
        return [out * g]
    if kind == "log":
        return [g / x]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "tanh":
        return [g * (1.0 - out * out)]
    if kind == "softplus":
        return [g * _sigmoid(x)]
    raise ValueError(f"unknown op {kind!r}")


class Tape:
    """Append-only record of operations.

    With ``record=False`` ops still compute values but nothing is stored, which is
    what rollouts use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.leaf_ids: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, inputs, value, aux=None) -> Tensor:
        if not self.record:
            return Tensor(value, self, -1)
        self.nodes.append(Node(kind, inputs, value, aux or {}))
        return Tensor(value, self, len(self.nodes) - 1)

    def leaf(self, name: str | None, value) -> Tensor:
        value = np.array(value, dtype=np.float64)
        if name is None:
            name = f"_leaf{len(self.leaf_ids)}"
        if name in self.leaf_ids:
            raise ValueError(f"duplicate leaf {name!r}")
        t = self._push("leaf", (), value, {"name": name})
        if self.record:
            self.leaf_ids[name] = t.idx
        return t

    def leaves(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.leaf(k, v) for k, v in params.items()}

    def constant(self, value) -> Tensor:
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    def op(self, kind: str, *operands: Tensor, **aux) -> Tensor:
        for t in operands:
            if t.tape is not self:
                raise ValueError(f"{kind}: operand recorded on a different tape")
        vals = [t.value for t in operands]
        with np.errstate(all="ignore"):
            out = _forward(kind, vals, aux)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(kind)
        return self._push(kind, tuple(t.idx for t in operands), out, aux)


# -- functional op wrappers -----------------------------------------------------------

def tensor_op(kind: str, *operands: Tensor, **aux) -> Tensor:
    if kind not in OPS:
        raise ValueError(f"unknown op {kind!r}")
    return operands[0].tape.op(kind, *operands, **aux)


def matmul(a, b):
    return a.tape.op("matmul", a, b)


def concat(xs, axis=-1):
    return xs[0].tape.op("concat", *xs, axis=axis)


def tsum(x, axis=None, keepdims=False):
    return x.tape.op("sum", x, axis=axis, keepdims=keepdims)


def tmean(x, axis=None, keepdims=False):
    return x.tape.op("mean", x, axis=axis, keepdims=keepdims)


def square(x):
    return x.tape.op("square", x)


def exp(x):
    return x.tape.op("exp", x)


def log(x):
    return x.tape.op("log", x)


def sigmoid(x):
    return x.tape.op("sigmoid", x)


def tanh(x):
    return x.tape.op("tanh", x)


def softplus(x):
    return x.tape.op("softplus", x)


def reciprocal(x):
    return exp(-log(x))


def sqrt(x):
    return exp(0.5 * log(x))


# -- gradients ------------------------------------------------------------------------

class GradMap(dict):
    """Gradients keyed by leaf name; leaves that did not reach the loss read as zeros."""

    def __init__(self, grads=(), shapes: Mapping[str, tuple] | None = None):
        super().__init__(grads)
        self.shapes = dict(shapes or {})

    def __missing__(self, key):
        if key in self.shapes:
            return np.zeros(self.shapes[key])
        raise KeyError(key)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    if not tape.record:
        raise ValueError("backward needs a recording tape")
    if loss.tape is not tape or loss.idx < 0:
        raise ValueError("loss was not produced on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * (loss.idx + 1)
    owned = [False] * (loss.idx + 1)  # buffer may be updated in place
    grads[loss.idx] = np.ones_like(loss.value)
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if not node.inputs:
            continue
        if node.kind == "slice":
            # scatter straight into the parent's buffer instead of materialising a
            # full-size zero gradient per slice
            j = node.inputs[0]
            if nodes[j].kind == "const":
                continue
            if grads[j] is None:
                grads[j] = np.zeros_like(nodes[j].value)
                owned[j] = True
            elif not owned[j]:
                grads[j] = np.array(grads[j], dtype=np.float64)
                owned[j] = True
            grads[j][node.aux["index"]] += g
            grads[i] = None
            continue
        vals = [nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, _vjp(node, g, vals)):
            if nodes[j].kind == "const":
                continue
            if grads[j] is None:
                grads[j] = gj
            elif owned[j]:
                grads[j] += gj
            else:
                grads[j] = grads[j] + gj
                owned[j] = True
        grads[i] = None  # free intermediate gradients early
    out = GradMap(shapes={n: nodes[i].value.shape for n, i in tape.leaf_ids.items()})
    for name, i in tape.leaf_ids.items():
        if i < len(grads) and grads[i] is not None:
            out[name] = np.array(grads[i], dtype=np.float64)
    return out


def finite_diff(f: Callable[[dict[str, np.ndarray]], float], params: Mapping[str, np.ndarray],
                h: float = 1e-5, names=None) -> GradMap:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every coordinate of ``params``."""
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = GradMap(shapes={k: v.shape for k, v in work.items()})
    for name in (names or list(work)):
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(work))
            flat[i] = orig - h
            fm = float(f(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("finite_diff", f" at {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Worst coordinate of ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# -- optimiser ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                         self.step)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8,
              l2_decay: float = 0.0, decay_filter: Callable[[str], bool] | None = None,
              lr_scale: Mapping[str, float] | None = None):
    """One Adam descent step with bias correction.

    ``l2_decay * param`` is added to the gradient before the moment updates, for the
    parameters selected by ``decay_filter`` (all of them when it is None). ``lr_scale``
    multiplies the step size of the named parameters. Returns new ``(params, state)``;
    the inputs are not modified.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    new_state = AdamState(dict(state.m), dict(state.v), state.step + 1)
    t = new_state.step
    out = {}
    for name, p in params.items():
        g = grads[name] if name in grads else np.zeros_like(p)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if l2_decay and (decay_filter is None or decay_filter(name)):
            g = g + l2_decay * p
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        new_state.m[name], new_state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        step = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        out[name] = p - step * m_hat / (np.sqrt(v_hat) + eps_adam)
    return out, new_state


def lr_schedule(lr0: float, rate: float, iteration: int) -> float:
    if not 0.0 < rate <= 1.0:
        raise ValueError("decay rate must lie in (0, 1]")
    return lr0 * rate ** iteration
