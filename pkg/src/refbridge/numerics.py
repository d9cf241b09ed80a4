"""Small dense-tensor autograd engine on top of numpy.

Every op returns a new :class:`Tensor`; when gradient recording is enabled the
result keeps references to its parents and a closure that pushes the upstream
gradient back.  Gradients accumulate (``+=``) so a node consumed by several ops
receives the sum of all contributions.

Arrays are float32 unless the inputs are float64 (used by the gradient checks).
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

# recording switch, per thread so parallel tile inference cannot flip it
# under a training loop running elsewhere
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this node.

        ``grad`` defaults to ones, which for a scalar loss is the usual seed.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward):
    out = Tensor(data)
    if grad_enabled():
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        a = as_tensor(a)

        def backward_scalar(g):
            a._accumulate(g * a.data.dtype.type(c))

        return _make(a.data * a.data.dtype.type(c), (a,), backward_scalar)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def silu(x):
    x = as_tensor(x)
    sig = expit(x.data)
    out = x.data * sig

    def backward(g):
        x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(out.astype(x.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None

    def backward(g):
        x._accumulate(g.reshape(old))

    return _make(out, (x,), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), backward)


def getitem(x, idx):
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return _make(x.data[idx], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for a of shape (..., m, k) and b of shape (k, n) or (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation / attention pieces
# ---------------------------------------------------------------------------

def softmax_rows(x):
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward)


def layer_norm(x, eps=1e-5, weight=None, bias=None):
    """Normalise the last axis to zero mean and unit variance, then apply the
    optional affine ``weight``/``bias`` (both of the last-axis width)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype, copy=False)

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - xhat * gx))

    out = _make(xhat, (x,), backward)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x):
    # x: (B, C, H, W) -> (B, C*9, H*W) with zero padding 1
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(cols, shape):
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x, kernels, bias=None):
    """3x3 convolution, stride 1, zero padding 1.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernels`` is (C_out, C_in, 3, 3).
    This is cross-correlation, as in every deep-learning framework.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    if xd.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"conv2d: input has {xd.shape[1]} channels, kernels expect {kernels.shape[1]}"
        )
    b, _, h, w = xd.shape
    cout = kernels.shape[0]
    cols = _im2col(xd)
    kmat = kernels.data.reshape(cout, -1)
    out = np.matmul(kmat, cols).reshape(b, cout, h, w)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gflat = g4.reshape(b, cout, h * w)
        if kernels.requires_grad:
            gk = np.matmul(gflat, np.swapaxes(cols, 1, 2)).sum(axis=0)
            kernels._accumulate(gk.reshape(kernels.shape))
        if x.requires_grad:
            gcols = np.matmul(kmat.T, gflat)
            gx = _col2im(gcols, xd.shape)
            x._accumulate(gx[0] if squeeze else gx)

    out_t = _make(out, (x, kernels), backward)
    if bias is not None:
        bias = as_tensor(bias)
        out_t = add(out_t, reshape(bias, (cout, 1, 1)))
    return out_t


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_all(x):
    x = as_tensor(x)
    n = x.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def mse(a, b):
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        scale = g * (2.0 / n)
        if a.requires_grad:
            a._accumulate(scale * diff)
        if b.requires_grad:
            b._accumulate(-scale * diff)

    return _make(np.asarray((diff * diff).mean(), dtype=diff.dtype), (a, b), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_grad(fn, arrays, step=1e-3):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. each array.

    ``fn`` receives plain numpy arrays and returns a float.
    """
    grads = []
    for arr in arrays:
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


def relative_error(a, b):
    """max |a-b| / max(|a|, |b|, tiny) over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_gradients(build, arrays, step=1e-3, seed=0):
    """Compare autograd against central differences.

    The scalar probed is ``sum(build(*tensors) * R)`` with a fixed random
    cotangent ``R`` (a plain sum would hide errors in ops whose outputs have
    a constant sum, softmax for one).  ``arrays`` become float64 leaves.
    Returns the largest relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    cot = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(cot)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def f(*arrs):
        with no_grad():
            return float(np.sum(build(*[Tensor(a) for a in arrs]).data * cot))

    numeric = numerical_grad(f, arrays, step=step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def dense_jacobian(build, x):
    """Full Jacobian of ``build(x)`` by one backward pass per output element.

    Only meant for tiny tensors (the composed-graph oracle in the tests).
    """
    x = np.array(x, dtype=np.float64)
    with no_grad():
        n_out = build(Tensor(x)).size
    jac = np.zeros((n_out, x.size))
    for i in range(n_out):
        leaf = Tensor(x, requires_grad=True)
        out = build(leaf)
        seed = np.zeros(out.size)
        seed[i] = 1.0
        out.backward(seed.reshape(out.shape))
        jac[i] = leaf.grad.reshape(-1)
    return jac
