"""Dense float64 tensors with a reverse-mode gradient tape, plus Adam.

A :class:`Tensor` is an immutable wrapper around a numpy array.  Operations
on tensors that belong to a :class:`Tape` are recorded on it in creation
order, which is already a topological order, so :meth:`Tape.backward` only
has to walk the record once in reverse.  Tensors without a tape are plain
values.  The :class:`plain` namespace offers the same ops on bare arrays
with identical arithmetic, so model code written against either namespace
serves for training (tape) and for fast inference (plain).

>>> tape = Tape()
>>> w = tape.leaf("w", np.array([1.0, 2.0]))
>>> tape.backward(reduce_sum(w * w))["w"]
array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, TrainingError

__all__ = [
    "Tensor",
    "Tape",
    "Adam",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "sin",
    "cos",
    "exp",
    "softmax_rows",
    "reduce_sum",
    "reduce_mean",
    "swap_last",
    "reshape",
    "take_rows",
    "pinball",
    "plain",
    "glorot_uniform",
    "finite_difference_grad",
]


class Tensor:
    __slots__ = ("_data", "_tape", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, tape=None, parents=(), backward=None, name=None, owned=False):
        if owned and type(data) is np.ndarray and data.dtype == np.float64:
            # fresh op result: freeze it in place instead of copying
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr
        self._tape = tape
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def tape(self):
        return self._tape

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops for one forward/backward pass.

    A tape is single-owner: one trainer, one thread.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def leaf(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ContractError(f"duplicate leaf id {name!r}")
        t = Tensor(value, tape=self, name=name)
        self.leaves[name] = t
        self.nodes.append(t)
        return t

    def _record(self, t: Tensor) -> Tensor:
        self.nodes.append(t)
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every leaf.

        Leaves that do not influence the loss get an exact zero array.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss must be a tensor recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent.tape is not self:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {
            name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64)
            for name, t in self.leaves.items()
        }


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _make(value, parents, backward):
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value, owned=True)
    return tape._record(Tensor(value, tape=tape, parents=parents, backward=backward, owned=True))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _matmul_value(av, bv):
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")
    return np.matmul(av, bv)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions of 3-D operands act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    out = _matmul_value(av, bv)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), backward)


def _broadcast_op(op, av, bv, opname):
    try:
        return op(av, bv)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {av.shape} with {bv.shape}") from None


def _elementwise(op, a, b, opname):
    return _broadcast_op(op, a.data, b.data, opname)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(_elementwise(np.add, a, b, "add"), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(_elementwise(np.subtract, a, b, "sub"), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _make(_elementwise(np.multiply, a, b, "mul"), (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def _softmax_value(z, mask):
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis, shifted by the row max.

    ``mask`` is an optional boolean array broadcastable to ``x``; False
    entries get zero weight.  Every row must keep at least one True entry.
    """
    x = as_tensor(x)
    y = _softmax_value(x.data, mask)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take_rows(a, rows) -> Tensor:
    """``a[rows]`` along the first axis; repeated rows accumulate gradient."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), backward)


def _pinball_value(r, above, tau):
    return np.where(above, tau * r, (tau - 1.0) * r)


def pinball(y, yhat, tau: float) -> Tensor:
    """Elementwise quantile loss of prediction ``yhat`` against target ``y``.

    ``y`` is data and receives no gradient.  At the kink (y == yhat) the
    subgradient 0 is taken, so a batch with zero loss leaves Adam idle.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    yhat = as_tensor(yhat)
    r = y - yhat.data
    above = r > 0
    out = _pinball_value(r, above, tau)
    dyhat = np.where(above, -tau, np.where(r < 0, 1.0 - tau, 0.0))
    return _make(out, (yhat,), lambda g: (_unbroadcast(g * dyhat, yhat.shape),))


class plain:
    """Untracked versions of the ops on plain float64 arrays.

    They evaluate the same numpy expressions as the taped ops, so values
    agree bit for bit, without the bookkeeping of tensors and closures.
    Used for inference and for loss-only evaluation.
    """

    @staticmethod
    def matmul(a, b):
        return _matmul_value(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))

    @staticmethod
    def mul(a, b):
        return _broadcast_op(np.multiply, np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), "mul")

    tanh = staticmethod(np.tanh)

    @staticmethod
    def softmax_rows(x, mask=None):
        return _softmax_value(np.asarray(x, dtype=np.float64), mask)

    @staticmethod
    def reduce_sum(a, axis=None, keepdims=False):
        return np.asarray(a).sum(axis=axis, keepdims=keepdims)

    @staticmethod
    def reduce_mean(a, axis=None, keepdims=False):
        a = np.asarray(a)
        n = a.size if axis is None else a.shape[axis]
        return a.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    @staticmethod
    def swap_last(a):
        return np.swapaxes(a, -1, -2)

    @staticmethod
    def reshape(a, shape):
        return np.asarray(a).reshape(shape)

    @staticmethod
    def take_rows(a, rows):
        return np.asarray(a)[np.asarray(rows, dtype=np.int64)]

    @staticmethod
    def pinball(y, yhat, tau: float):
        r = np.asarray(y, dtype=np.float64) - yhat
        return _pinball_value(r, r > 0, tau)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Adam:
    """Adam with bias correction over a name -> array parameter mapping."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def reset(self):
        self.step_count = 0
        self.m = {}
        self.v = {}

    def copy(self) -> "Adam":
        return Adam(self.lr, self.beta1, self.beta2, self.eps, self.step_count,
                    {k: a.copy() for k, a in self.m.items()},
                    {k: a.copy() for k, a in self.v.items()})

    def step(self, params: dict, grads: dict) -> dict:
        """Return updated parameters; ``params`` itself is left untouched."""
        if set(grads) - set(params):
            raise ContractError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name!r}", leaf_id=name)
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")

        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        out = dict(params)
        for name, g in grads.items():
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            out[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def finite_difference_grad(f, params: dict, name: str, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f(params)`` w.r.t. ``params[name]``.

    ``f`` must not keep references to the arrays it is given: one working
    copy of ``params[name]`` is perturbed in place and restored entry by entry.
    """
    work = np.array(params[name], dtype=np.float64)
    probe = {**params, name: work}
    flat_in = work.reshape(-1)
    grad = np.zeros_like(work)
    flat = grad.reshape(-1)
    for i in range(work.size):
        x = flat_in[i]
        flat_in[i] = x + h
        fp = f(probe)
        flat_in[i] = x - h
        fm = f(probe)
        flat_in[i] = x
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
