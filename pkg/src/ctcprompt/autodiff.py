"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation is registered by name in ``OPS`` and invoked
through :func:`forward`.  An op returns its output array together with a
closure mapping the output gradient to one gradient per input (``None`` for
inputs that need none).  Nodes are linked only when an input requires a
gradient; :func:`backward` walks them in reverse topological order.

Broadcasting is deliberately narrow: the second operand of ``add``/``mul``
may have a shape equal to a suffix of the first operand's shape (bias-style
leading-dimension expansion); ``matmul`` accepts a 2-D right operand against
a batched left operand.  Nothing else broadcasts.
"""

import contextlib
from contextvars import ContextVar

import numpy as np

from . import _kernels

MASK_FILL = -1e30

_grad_enabled = ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class UnknownOpError(KeyError):
    pass


class InfeasibleTargetError(ValueError):
    """No CTC alignment maps the frames onto the target."""


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A float64 array that can take part in a computation record."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data.reshape(-1)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return forward("add", [self, _as_tensor(other)])

    def __sub__(self, other):
        return forward("add", [self, forward("scale", [_as_tensor(other)], factor=-1.0)])

    def __mul__(self, other):
        if np.isscalar(other):
            return forward("scale", [self], factor=float(other))
        return forward("mul", [self, _as_tensor(other)])

    def __neg__(self):
        return forward("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return forward("matmul", [self, _as_tensor(other)])


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def forward(op_id, inputs, **attrs):
    """Apply a registered op to ``inputs``; record it when any input needs grad."""
    try:
        fn = OPS[op_id]
    except KeyError:
        raise UnknownOpError(f"unknown op {op_id!r}") from None
    out, grad_fn = fn(*(t.data for t in inputs), **attrs)
    result = Tensor(out)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.op = op_id
        result._parents = tuple(inputs)
        result._grad_fn = grad_fn
    return result


def topological_order(root):
    """Nodes reachable from ``root`` with every input before its consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# op implementations: each returns (output, grad_fn)
# ---------------------------------------------------------------------------


def _check_suffix(op, a, b):
    if a.shape[a.ndim - b.ndim:] != b.shape or b.ndim > a.ndim:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g, shape):
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _add(a, b):
    _check_suffix("add", a, b)
    return a + b, lambda g: (g, _reduce_to(g, b.shape))


def _mul(a, b):
    _check_suffix("mul", a, b)
    return a * b, lambda g: (g * b, _reduce_to(g * a, b.shape))


def _scale(a, factor):
    return a * factor, lambda g: (g * factor,)


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def grad_fn(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return a @ b, grad_fn


def _softmax_array(a, axis):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax(a, axis=-1):
    y = _softmax_array(a, axis)
    return y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return y, grad_fn


def _logsumexp(a, axis=-1):
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (np.expand_dims(g, axis) * np.exp(a - out),)

    return np.squeeze(out, axis=axis), grad_fn


def _layer_norm(x, gamma, beta, eps=1e-5):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: shapes {x.shape} and {gamma.shape} are incompatible"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def grad_fn(g):
        gx_hat = g * gamma
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _reduce_to(g * xhat, gamma.shape), _reduce_to(g, beta.shape)

    return xhat * gamma + beta, grad_fn


def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _embedding_lookup(table, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError(
            f"embedding_lookup: shapes {table.shape} and {idx.shape} are incompatible"
        )

    def grad_fn(g):
        gt = np.zeros_like(table)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return table[idx], grad_fn


def _concat(*arrays, axis=0):
    ref = arrays[0]
    for other in arrays[1:]:
        if other.ndim != ref.ndim or any(
            p != q for k, (p, q) in enumerate(zip(ref.shape, other.shape))
            if k != axis % ref.ndim
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {other.shape} are incompatible")
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return np.concatenate(arrays, axis=axis), grad_fn


def _slice(a, start, stop, axis=0):
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def grad_fn(g):
        ga = np.zeros_like(a)
        ga[index] = g
        return (ga,)

    return a[index], grad_fn


def _transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort(axes)
    return np.transpose(a, axes), lambda g: (np.transpose(g, inverse),)


def _reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shapes {a.shape} and {shape} are incompatible") from None
    return out, lambda g: (g.reshape(a.shape),)


def _masked_fill(a, mask, value=MASK_FILL):
    mask = np.asarray(mask, dtype=bool)
    if a.shape[a.ndim - mask.ndim:] != mask.shape:
        raise ShapeError(f"masked_fill: shapes {a.shape} and {mask.shape} are incompatible")
    return np.where(mask, value, a), lambda g: (np.where(mask, 0.0, g),)


def _reduce_sum(a, axis=None):
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return np.asarray(a.sum(axis=axis)), grad_fn


def _reduce_mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    out, sum_grad = _reduce_sum(a, axis)
    return out / n, lambda g: sum_grad(g / n)


def _conv1d_strided(x, w, stride):
    """x: [T, c_in]; w: [kernel, c_in, c_out]; valid padding."""
    kernel, c_in, c_out = w.shape
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d_strided: shapes {x.shape} and {w.shape} are incompatible")
    if x.shape[0] < kernel:
        raise ShapeError(
            f"conv1d_strided: input length {x.shape[0]} shorter than kernel {kernel}"
        )
    n_out = (x.shape[0] - kernel) // stride + 1
    idx = np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]
    cols = x[idx].reshape(n_out, kernel * c_in)
    w2 = w.reshape(kernel * c_in, c_out)

    def grad_fn(g):
        gcols = (g @ w2.T).reshape(n_out, kernel, c_in)
        gx = np.zeros_like(x)
        np.add.at(gx, idx.reshape(-1), gcols.reshape(-1, c_in))
        return gx, (cols.T @ g).reshape(w.shape)

    return cols @ w2, grad_fn


def _pick(a, indices):
    """a: [n, C]; returns a[i, indices[i]]."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: shapes {a.shape} and {idx.shape} are incompatible")
    rows = np.arange(a.shape[0])

    def grad_fn(g):
        ga = np.zeros_like(a)
        ga[rows, idx] = g
        return (ga,)

    return a[rows, idx], grad_fn


def ctc_feasible(n_frames, labels):
    labels = list(labels)
    repeats = sum(1 for p, q in zip(labels, labels[1:]) if p == q)
    return n_frames >= len(labels) + repeats


def _ctc_loss(log_probs, labels, blank=0):
    """Negative log-probability of ``labels`` summed over all CTC alignments.

    ``log_probs`` rows are treated as free inputs; the gradient is minus the
    per-frame class occupancy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_frames = log_probs.shape[0]
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss: log_probs must be 2-D, got {log_probs.shape}")
    if not ctc_feasible(n_frames, labels):
        raise InfeasibleTargetError(
            f"ctc_loss: {n_frames} frames cannot emit {len(labels)} labels"
        )
    ext = _kernels.extend_with_blanks(labels, blank)
    alpha, beta = _kernels.ctc_alpha_beta(log_probs, ext)
    tail = alpha[-1, -2:] if len(ext) > 1 else alpha[-1, -1:]
    log_total = np.logaddexp.reduce(tail)

    def grad_fn(g):
        occ = np.exp(alpha + beta - log_total)
        gl = np.zeros_like(log_probs)
        np.add.at(gl, (slice(None), ext), -occ)
        return (gl * g,)

    return np.asarray(-log_total), grad_fn


OPS = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "scale": _scale,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "logsumexp": _logsumexp,
    "layer_norm": _layer_norm,
    "relu": _relu,
    "embedding_lookup": _embedding_lookup,
    "concat": _concat,
    "slice": _slice,
    "transpose": _transpose,
    "reshape": _reshape,
    "masked_fill": _masked_fill,
    "reduce_sum": _reduce_sum,
    "reduce_mean": _reduce_mean,
    "conv1d_strided": _conv1d_strided,
    "pick": _pick,
    "ctc_loss": _ctc_loss,
}


# ---------------------------------------------------------------------------
# thin functional wrappers
# ---------------------------------------------------------------------------


def matmul(a, b):
    return forward("matmul", [a, b])


def add(a, b):
    return forward("add", [a, b])


def mul(a, b):
    return forward("mul", [a, b])


def scale(a, factor):
    return forward("scale", [a], factor=float(factor))


def softmax(a, axis=-1):
    return forward("softmax", [a], axis=axis)


def log_softmax(a, axis=-1):
    return forward("log_softmax", [a], axis=axis)


def logsumexp(a, axis=-1):
    return forward("logsumexp", [a], axis=axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    return forward("layer_norm", [x, gamma, beta], eps=eps)


def relu(a):
    return forward("relu", [a])


def embedding_lookup(table, indices):
    return forward("embedding_lookup", [table], indices=indices)


def concat(tensors, axis=0):
    return forward("concat", list(tensors), axis=axis)


def slice_(a, start, stop, axis=0):
    return forward("slice", [a], start=start, stop=stop, axis=axis)


def transpose(a, axes=None):
    return forward("transpose", [a], axes=axes)


def reshape(a, shape):
    return forward("reshape", [a], shape=shape)


def masked_fill(a, mask, value=MASK_FILL):
    return forward("masked_fill", [a], mask=mask, value=value)


def reduce_sum(a, axis=None):
    return forward("reduce_sum", [a], axis=axis)


def reduce_mean(a, axis=None):
    return forward("reduce_mean", [a], axis=axis)


def conv1d_strided(x, w, stride):
    return forward("conv1d_strided", [x, w], stride=stride)


def pick(a, indices):
    return forward("pick", [a], indices=indices)


def ctc_loss(log_probs, labels, blank=0):
    return forward("ctc_loss", [log_probs], labels=labels, blank=blank)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numeric_grad(fn, arrays, step=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*arrays)
            flat[i] = orig - step
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    err = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            err = max(err, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return err


def check_function(fn, arrays, step=1e-4, seed=0):
    """Max relative error between backward() and central differences.

    ``fn`` maps Tensors to a Tensor; a fixed random projection turns
    non-scalar outputs into a scalar.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    probe = np.random.default_rng(seed).standard_normal(out.shape)
    reduce_sum(mul(out, Tensor(probe))).backward()
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def objective(*arrs):
        with no_grad():
            return float(np.sum(fn(*(Tensor(a) for a in arrs)).data * probe))

    return relative_error(analytic, numeric_grad(objective, arrays, step))


def grad_check(op_id, inputs, step=1e-4, **attrs):
    """Max relative error of one registered op's gradient against central differences."""
    arrays = [t.data if isinstance(t, Tensor) else t for t in inputs]
    return check_function(lambda *ts: forward(op_id, list(ts), **attrs), arrays, step)
