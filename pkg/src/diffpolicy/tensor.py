"""Dense float64 tensors with tape-based reverse-mode autodiff.

The op set is deliberately small: broadcasting arithmetic, matmul,
reductions, reshape/transpose/slice/concat, embedding lookup, softmax,
layer norm, GELU, and the two training losses (masked MSE, cross-entropy).
That is everything the models in this package need. All math is float64
so gradient checks against central finite differences are tight.

Forward values are plain numpy arrays; every op that participates in a
graph stores its parents and a backward function returning the gradients
with respect to those parents. `backward()` walks the graph once in
reverse topological order.
"""

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ParameterError(ValueError):
    """A scalar argument is outside its legal range."""


class ContractError(RuntimeError):
    """An op was called in a way its contract forbids."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but carries no usable information."""


_grad_enabled = True

# When True, every op verifies its output is finite. Cheap relative to
# the matmuls at desk scale; tests and trainers keep it on.
finite_checks = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _check_finite(data, op_name):
    # Single-pass probe: any NaN/Inf drives the sum non-finite (inf-inf
    # is nan). Can only false-alarm if a legitimate sum overflows 1e308.
    if finite_checks:
        with np.errstate(over="ignore", invalid="ignore"):
            if not np.isfinite(data.sum()):
                if np.all(np.isfinite(data)):
                    return  # overflowing sum of finite values
                raise NumericError(f"non-finite values produced by {op_name}")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    # ---- graph plumbing ----

    def _tracked(self):
        return self.requires_grad or self._parents

    def backward(self):
        """Populate .grad of every reachable requires_grad tensor.

        Accumulation is additive; call zero_grad() on parameters between
        passes to get fresh gradients.
        """
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss")

        # Iterative topo sort; graphs are deep enough to overflow recursion.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not in the op set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op_name):
    _check_finite(data, op_name)
    out = Tensor(data)
    if _grad_enabled and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, rng=None, scale=None):
    """Create a requires_grad leaf. With rng, `data` is a shape tuple."""
    if rng is not None:
        data = rng.standard_normal(data) * (scale if scale is not None else 1.0)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# ---- arithmetic ----


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(data, (a, b), bw, "mul")


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.shape} @ {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if b.ndim == 2 and a.ndim > 2:
            # Linear-layer pattern: fold batch dims into one gemm instead
            # of materializing per-batch weight gradients.
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.shape != b.shape:
                gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(data, (a, b), bw, "matmul")


# ---- shape ops ----


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _make(data, (a,), bw, "reshape")


def transpose(a, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(data, (a,), bw, "transpose")


def take(a, idx):
    """Basic slicing/indexing; gradient scatters back additively."""
    data = a.data[idx]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(data, (a,), bw, "take")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bw, "concat")


def embedding(table, ids):
    """Row lookup into a 2-D table with an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    data = table.data[ids]

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), bw, "embedding")


# ---- reductions ----


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(data, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---- neural primitives ----


def softmax_lastdim(x):
    """Softmax over the last dimension, stabilized by max subtraction."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last dim to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError("layer_norm eps must be > 0")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match the last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        g_gain = _unbroadcast(g * xhat, gain.shape)
        g_bias = _unbroadcast(g, bias.shape)
        gh = g * gain.data
        # d/dx of (x - mu) * inv with mu, inv functions of x.
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        assert gx.shape[-1] == n
        return gx, g_gain, g_bias

    return _make(data, (x, gain, bias), bw, "layer_norm")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU with the tanh approximation."""
    xd = x.data
    x2 = xd * xd                      # x**3 via mults; np.power is slow here
    t = np.tanh(_GELU_C * (xd + 0.044715 * (x2 * xd)))
    data = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dt = (1.0 - t * t) * du
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(data, (x,), bw, "gelu")


# ---- losses ----


def mse_loss(pred, target, mask=None):
    """Mean squared error over mask==1 entries (mask=None means all)."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse_loss shapes disagree: {pred.shape} vs {target.shape}"
        )
    if mask is None:
        m = np.ones(pred.shape)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != pred.shape:
            raise DimensionError("mse_loss mask shape must match pred")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ContractError("mse_loss mask must be 0/1")
    count = m.sum()
    if count == 0:
        raise DegenerateInputError("mse_loss mask selects no entries")
    diff = (pred.data - target.data) * m
    data = np.asarray((diff * diff).sum() / count)

    def bw(g):
        gp = g * 2.0 * diff / count
        return gp, -gp

    return _make(data, (pred, target), bw, "mse_loss")


def cross_entropy(logits, labels):
    """Mean negative log-softmax at the label indices. logits: (n, C)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects 2-D logits")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError("cross_entropy labels must be (n,)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError("cross_entropy label out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    data = np.asarray(-logp[np.arange(n), labels].mean())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(data, (logits,), bw, "cross_entropy")
