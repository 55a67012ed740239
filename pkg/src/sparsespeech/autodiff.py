"""Reverse-mode automatic differentiation over dense float64 arrays.

Small tape-free design: every op returns a Tensor that records its parents
and a closure computing parent gradients from the output gradient.
``backward`` walks the graph once in reverse topological order. Arrays are
kept in float64 throughout so finite-difference checks are meaningful; every
op verifies its result is finite and raises NumericError naming the op
otherwise.

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes, a row vector against a matrix, or a scalar. Anything else is a
ContractError.
"""

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError

# Grad mode is per-thread: worker threads doing inference under no_grad must
# not flip recording off for anyone else.
_GRAD_STATE = threading.local()


def _grad_enabled():
    return getattr(_GRAD_STATE, "enabled", True)


class no_grad:
    """Context manager disabling graph recording in the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_STATE.enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus the op record that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op",
                 "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ContractError("tensors are at most 2-d, got ndim=%d" % arr.ndim)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return "Tensor(op=%s, shape=%s)" % (self._op, self.data.shape)

    # Operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(op, data, parents, bwd):
    """Wrap an op result, recording parents only when gradients are needed.

    Finite check: NaN/Inf poisons a sum, so a finite sum proves every entry
    finite; the full scan only decides the rare case of a benignly
    overflowing sum of finite values.
    """
    if not math.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericError("non-finite result in op '%s'" % op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
        out._op = op
    return out


def _binary_prep(op, a, b):
    """Validate the restricted broadcast rules; return (a, b, mode).

    mode: "same", "row" (b is a row vector under matrix a), "scalar"
    (b single element). b may also be a plain number.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        return a, b, "same"
    if b.data.size == 1:
        return a, b, "scalar"
    if a.data.ndim == 2 and b.data.ndim in (1, 2):
        brow = b.data.reshape(-1)
        if a.data.shape[1] == brow.shape[0] and (b.data.ndim == 1 or b.data.shape[0] == 1):
            return a, b, "row"
    raise ContractError("%s: incompatible shapes %s and %s"
                        % (op, a.data.shape, b.data.shape))


def _reduce_like(grad, tensor, mode):
    """Sum an output gradient back to a broadcast operand's shape."""
    if mode == "same":
        return grad
    if mode == "scalar":
        return np.asarray(grad.sum()).reshape(tensor.data.shape)
    return grad.sum(axis=0).reshape(tensor.data.shape)


def add(a, b):
    a, b, mode = _binary_prep("add", a, b)
    data = a.data + (b.data if mode != "row" else b.data.reshape(1, -1))

    def bwd(g):
        return g, _reduce_like(g, b, mode)

    return _result("add", data, (a, b), bwd)


def sub(a, b):
    a, b, mode = _binary_prep("sub", a, b)
    data = a.data - (b.data if mode != "row" else b.data.reshape(1, -1))

    def bwd(g):
        return g, -_reduce_like(g, b, mode)

    return _result("sub", data, (a, b), bwd)


def mul(a, b):
    a, b, mode = _binary_prep("mul", a, b)
    bview = b.data if mode != "row" else b.data.reshape(1, -1)
    data = a.data * bview

    def bwd(g):
        return g * bview, _reduce_like(g * a.data, b, mode)

    return _result("mul", data, (a, b), bwd)


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractError("matmul: incompatible shapes %s and %s"
                            % (a.data.shape, b.data.shape))
    data = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result("matmul", data, (a, b), bwd)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    if axis not in (0, 1):
        raise ContractError("concat: axis must be 0 or 1")
    if any(t.data.ndim != 2 for t in tensors):
        raise ContractError("concat: all inputs must be 2-d")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(sizes)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _result("concat", data, tensors, bwd)


def narrow(t, key):
    """Contiguous slicing (the tape's 'slice' op)."""
    t = _as_tensor(t)
    data = t.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)

    def bwd(g):
        out = np.zeros_like(t.data)
        out[key] = g
        return (out,)

    return _result("slice", data, (t,), bwd)


def sigmoid(t):
    t = _as_tensor(t)
    # Stable for any magnitude: tanh saturates instead of exp overflowing.
    data = 0.5 * (np.tanh(0.5 * t.data) + 1.0)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _result("sigmoid", data, (t,), bwd)


def tanh(t):
    t = _as_tensor(t)
    data = np.tanh(t.data)

    def bwd(g):
        return (g * (1.0 - data * data),)

    return _result("tanh", data, (t,), bwd)


def exp(t):
    t = _as_tensor(t)
    data = np.exp(t.data)

    def bwd(g):
        return (g * data,)

    return _result("exp", data, (t,), bwd)


def log(t):
    t = _as_tensor(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(t.data)

    def bwd(g):
        return (g / t.data,)

    return _result("log", data, (t,), bwd)


def softmax(t):
    """Row-wise softmax over the last axis, with max subtraction."""
    t = _as_tensor(t)
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result("softmax", data, (t,), bwd)


def log_softmax(t):
    """Row-wise log softmax over the last axis (shift by the row max)."""
    t = _as_tensor(t)
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def bwd(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", data, (t,), bwd)


def custom(op, data, parents, bwd):
    """Insert an externally computed op with a hand-written backward rule.

    bwd receives the output gradient and must return one gradient (or None)
    per parent.
    """
    return _result(op, np.asarray(data, dtype=np.float64), tuple(parents), bwd)


def mean(t, axis=None):
    t = _as_tensor(t)
    data = np.asarray(t.data.mean(axis=axis))
    count = t.data.size if axis is None else t.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full_like(t.data, float(g) / count)
                    if np.ndim(g) == 0 else np.full_like(t.data, g.reshape(()) / count),)
        return (np.broadcast_to(np.expand_dims(np.asarray(g), axis) / count,
                                t.data.shape).copy(),)

    return _result("mean", data, (t,), bwd)


def total(t, axis=None):
    t = _as_tensor(t)
    data = np.asarray(t.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(t.data, np.asarray(g).reshape(())),)
        return (np.broadcast_to(np.expand_dims(np.asarray(g), axis),
                                t.data.shape).copy(),)

    return _result("sum", data, (t,), bwd)


def square_error(a, b):
    """Scalar sum of squared differences."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ContractError("square_error: shapes %s and %s differ"
                            % (a.data.shape, b.data.shape))
    diff = a.data - b.data
    data = np.asarray((diff * diff).sum())

    def bwd(g):
        scaled = 2.0 * np.asarray(g).reshape(()) * diff
        return scaled, -scaled

    return _result("square_error", data, (a, b), bwd)


def rowmax(t):
    """Per-row maximum, shape (m, 1). Ties route the gradient to the first max."""
    t = _as_tensor(t)
    if t.data.ndim != 2:
        raise ContractError("rowmax: input must be 2-d")
    idx = t.data.argmax(axis=1)
    data = t.data[np.arange(t.data.shape[0]), idx].reshape(-1, 1)

    def bwd(g):
        out = np.zeros_like(t.data)
        out[np.arange(t.data.shape[0]), idx] = np.asarray(g).reshape(-1)
        return (out,)

    return _result("rowmax", data, (t,), bwd)


def _topo_order(loss):
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf.

    Returns a dict mapping leaf Tensor -> gradient array and also assigns
    each leaf's .grad. A graph can be consumed once; calling backward again
    on the same loss raises ContractError.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss, got shape %s"
                            % (loss.data.shape,))
    if loss._consumed:
        raise ContractError("backward called twice on the same graph")
    loss._consumed = True
    if not loss.requires_grad:
        raise ContractError("backward on a graph with no requires_grad leaves")

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            if node.requires_grad and node._op == "leaf":
                node.grad = g
                leaves[node] = g
            continue
        parent_grads = node._bwd(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            if acc is None:
                grads[id(p)] = np.asarray(pg, dtype=np.float64).reshape(p.data.shape)
            else:
                grads[id(p)] = acc + np.asarray(pg, dtype=np.float64).reshape(p.data.shape)
    return leaves


@dataclass
class GradCheckReport:
    per_param: dict
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(f, params, step=1e-4, tolerance=1e-4, floor=1e-3):
    """Compare analytic gradients of f() against central finite differences.

    f is a zero-argument callable returning a scalar Tensor; it must close
    over the Tensors in ``params`` (dict name -> Tensor) and be deterministic
    (it is evaluated twice up front and must reproduce the same value
    exactly). Relative error per parameter element is
    |analytic - fd| / max(|analytic|, |fd|, floor).
    """
    for name, p in params.items():
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ContractError("grad_check: param %r must be a requires_grad Tensor" % name)
    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise ContractError("grad_check: f is not deterministic (%r != %r)" % (v1, v2))

    loss = f()
    leaf_grads = backward(loss)
    per_param = {}
    worst = 0.0
    for name, p in params.items():
        analytic = leaf_grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst_here = 0.0
        # Probe evaluations only need values, not a recorded graph.
        with no_grad():
            for i in range(flat.shape[0]):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                a = analytic.reshape(-1)[i]
                rel = abs(a - fd) / max(abs(a), abs(fd), floor)
                if rel > worst_here:
                    worst_here = rel
        per_param[name] = worst_here
        if worst_here > worst:
            worst = worst_here
    return GradCheckReport(per_param=per_param, max_rel_error=worst,
                           tolerance=tolerance, passed=worst < tolerance)
