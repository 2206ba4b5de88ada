"""Small reverse-mode tensor library on numpy storage.

Values are stored in 32-bit floats by default; reductions accumulate in 64-bit
and cast back, which keeps results reproducible across platforms.  A graph
built from float64 leaves stays float64 end to end, so the same code can be
gradient-checked at tight tolerances.

Gradients are computed by a closure tape: every op records its parents and a
backward closure, `Tensor.backward()` walks the graph in reverse topological
order.  Tensors are write-once; all ops return new tensors, so sharing nodes
between graphs is safe.
"""

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GradCheckError, NumericError

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape construction inside its body."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """N-d array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise DimensionError(
                f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor with a stable name for checkpoints.

    Stored at DEFAULT_DTYPE unless a dtype is given; ad-hoc float64 numpy
    inputs must not silently promote a whole model.
    """

    __slots__ = ("name",)

    def __init__(self, name, data, dtype=DEFAULT_DTYPE):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def reset_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def astensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _wrap_pair(a, b):
    """Coerce operands to tensors, matching scalar dtype to the partner."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    else:
        a, b = astensor(a), astensor(b)
    return a, b


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = _wrap_pair(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _wrap_pair(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _wrap_pair(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = _wrap_pair(a, b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a):
    a = astensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def exp(a):
    a = astensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a):
    a = astensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    a = astensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / data))

    return _make(data, (a,), backward)


def square(a):
    a = astensor(a)

    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


def pow_const(a, p):
    a = astensor(a)
    p = float(p)

    def backward(g):
        _accum(a, g * (p * np.power(a.data, p - 1.0)))

    return _make(np.power(a.data, p), (a,), backward)


def sigmoid(a):
    a = astensor(a)
    # split by sign to avoid overflow in exp
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a):
    a = astensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""
    a = astensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * d.astype(x.dtype))

    return _make(data, (a,), backward)


def clip(a, lo=None, hi=None):
    """Clamp values; gradient is passed through inside [lo, hi] and cut outside."""
    a = astensor(a)
    data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(data, (a,), backward)


def detach(a):
    return astensor(a).detach()


def cast(a, dtype):
    """Change storage dtype inside the graph; gradients cast back on the way out."""
    a = astensor(a)
    if a.data.dtype == np.dtype(dtype):
        return a
    out = a.data.astype(dtype)

    def backward(g):
        _accum(a, g.astype(a.data.dtype))
    return _make(out, (a,), backward)


# -- shape ops ---------------------------------------------------------------


def matmul(a, b):
    a, b = _wrap_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs 2-d or batched operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dims disagree, {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    a = astensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape):
    a = astensor(a)
    old = a.data.shape

    def backward(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def index(a, idx):
    """Basic indexing (ints, slices, tuples of those)."""
    a = astensor(a)
    data = a.data[idx]

    def backward(g):
        gz = np.zeros_like(a.data)
        gz[idx] += g
        _accum(a, gz)

    return _make(data, (a,), backward)


def gather_last(a, idx):
    """Select columns per row: a[B, N], idx[B, K] int array -> [B, K]."""
    a = astensor(a)
    idx = np.asarray(idx)
    if a.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(
            f"gather_last: got data {a.shape}, indices {idx.shape}")
    rows = np.arange(a.shape[0])[:, None]
    data = a.data[rows, idx]

    def backward(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, (rows, idx), g)
        _accum(a, gz)

    return _make(data, (a,), backward)


def broadcast_rows(a, n):
    """Prepend an axis of length n by repetition; gradient sums it back."""
    a = astensor(a)
    data = np.broadcast_to(a.data, (n,) + a.data.shape).copy()

    def backward(g):
        _accum(a, g.sum(axis=0, dtype=np.float64).astype(a.data.dtype))

    return _make(data, (a,), backward)


# -- reductions (64-bit accumulation) ----------------------------------------


def _check_nonempty(arr, axis):
    if arr.size == 0 or (axis is not None and np.size(arr, axis) == 0):
        raise NumericError("reduction over an empty axis")


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    _check_nonempty(a.data, axis)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    _check_nonempty(a.data, axis)
    count = a.data.size if axis is None else np.size(a.data, axis)
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        gd = g / count
        if axis is None:
            _accum(a, np.broadcast_to(gd, a.data.shape).copy())
        else:
            ge = gd if keepdims else np.expand_dims(gd, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).copy())

    return _make(data, (a,), backward)


# -- fused softmax family ----------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis`."""
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1):
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(a.data.dtype)
    data = shifted - lse

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        _accum(a, g - np.exp(data) * gsum)

    return _make(data, (a,), backward)


# -- composites --------------------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then rescale."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(square(centered), axis=-1, keepdims=True)
    inv = div(centered, sqrt(add(var, eps)))
    return add(mul(inv, gain), bias)


def l2_normalize_rows(x, eps=1e-12):
    """Scale each row of the last axis to unit Euclidean norm."""
    norms = sqrt(tsum(square(x), axis=-1, keepdims=True))
    return div(x, clip(norms, lo=eps))


def cosine_rows(a, b, eps=1e-12):
    """Row-wise cosine similarity along the last axis (graph-friendly)."""
    return tsum(mul(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps)), axis=-1)


def cosine_sim(a, b):
    """Cosine similarity of two 1-d vectors as a plain float.

    Both inputs degenerate (zero norm) returns 0.0 with a warning rather
    than raising, so callers scanning heterogeneous data keep going.
    """
    av = astensor(a).data.astype(np.float64).ravel()
    bv = astensor(b).data.astype(np.float64).ravel()
    if av.shape != bv.shape:
        raise DimensionError(f"cosine_sim: shapes {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na < 1e-12 or nb < 1e-12:
        warnings.warn("cosine_sim of a zero vector, returning 0.0")
        return 0.0
    return float(av @ bv / (na * nb))


# -- layers ------------------------------------------------------------------


class Linear:
    """Affine map y = x W + b with checkpoint-stable parameter names."""

    def __init__(self, name, d_in, d_out, rng=None, zero_init=False,
                 identity_init=False, dtype=DEFAULT_DTYPE):
        if zero_init:
            w = np.zeros((d_in, d_out))
        elif identity_init:
            if d_in != d_out:
                raise DimensionError("identity init needs a square map")
            w = np.eye(d_in)
        else:
            w = rng.normal((d_in, d_out)) / np.sqrt(d_in)
        self.weight = Parameter(f"{name}.weight", w, dtype=dtype)
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out), dtype=dtype)

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]


@dataclass
class AttentionParams:
    """Projection weights for scaled dot-product attention.

    `wo` is optional; when absent the head output is returned unprojected,
    which matches the single-head formulation used throughout the models.
    """

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter = None
    n_heads: int = 1

    @classmethod
    def create(cls, name, d_q, d_kv, d_inner, rng, d_value=None, n_heads=1,
               with_output=False, dtype=DEFAULT_DTYPE):
        d_value = d_inner if d_value is None else d_value
        if d_inner % n_heads or d_value % n_heads:
            raise DimensionError("inner and value dims must divide n_heads")
        mk = lambda nm, di, do: Parameter(
            f"{name}.{nm}", rng.normal((di, do)) / np.sqrt(di), dtype=dtype)
        wo = mk("wo", d_value, d_q) if with_output else None
        return cls(mk("wq", d_q, d_inner), mk("wk", d_kv, d_inner),
                   mk("wv", d_kv, d_value), wo, n_heads)

    def named_parameters(self):
        out = [(self.wq.name, self.wq), (self.wk.name, self.wk),
               (self.wv.name, self.wv)]
        if self.wo is not None:
            out.append((self.wo.name, self.wo))
        return out


def _split_heads(t, n_heads):
    # [..., L, H*dh] -> [..., H, L, dh]
    *lead, L, d = t.shape
    t = reshape(t, tuple(lead) + (L, n_heads, d // n_heads))
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return transpose(t, perm)


def _merge_heads(t):
    # [..., H, L, dh] -> [..., L, H*dh]
    *lead, H, L, dh = t.shape
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return reshape(transpose(t, perm), tuple(lead) + (L, H * dh))


def cross_attention(q_tokens, kv_tokens, params):
    """softmax(Q K^T / sqrt(d_head)) V with optional output projection.

    Accepts [L, d] token matrices or batched [..., L, d] stacks; query and
    key/value stacks must share their leading batch shape.
    """
    q_tokens, kv_tokens = astensor(q_tokens), astensor(kv_tokens)
    if q_tokens.ndim < 2 or kv_tokens.ndim < 2:
        raise DimensionError("attention operands need at least 2 dims")
    q = matmul(q_tokens, params.wq)
    k = matmul(kv_tokens, params.wk)
    v = matmul(kv_tokens, params.wv)
    if params.n_heads > 1:
        q, k, v = (_split_heads(t, params.n_heads) for t in (q, k, v))
    d_head = q.shape[-1]
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d_head))
    out = matmul(softmax(scores, axis=-1), v)
    if params.n_heads > 1:
        out = _merge_heads(out)
    if params.wo is not None:
        out = matmul(out, params.wo)
    return out


# -- randomness --------------------------------------------------------------


class Rng:
    """Deterministic splittable random stream.

    Counter-based Philox generator keyed by a hash of (seed, split path), so
    identical seeds give identical sequences on every platform and child
    streams are independent of draw order.
    """

    algorithm = "philox4x64"

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self.path = tuple(_path)
        digest = hashlib.sha256(repr((self.seed, self.path)).encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label):
        """Derive an independent child stream named by `label`."""
        return Rng(self.seed, self.path + (str(label),))

    def normal(self, shape=(), scale=1.0):
        return self._gen.standard_normal(shape) * scale

    def uniform(self, shape=(), low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)


# -- gradient verification ---------------------------------------------------


def grad_check(loss_fn, params, epsilon=1e-4):
    """Compare reverse-mode gradients against central finite differences.

    `loss_fn` is a zero-argument closure over `params` returning a scalar
    Tensor.  Returns the worst elementwise relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    The analytic gradient is taken at the parameters' native precision, but
    the finite-difference reference always evaluates the loss with float64
    parameters: a float32 central difference at epsilon=1e-4 carries rounding
    noise around 1e-4 absolute, which would drown the signal the check is
    after.  Parameters are restored bitwise before returning.
    """
    params = list(params)
    first = loss_fn()
    if not isinstance(first, Tensor) or first.data.size != 1:
        raise GradCheckError("loss_fn must return a scalar Tensor")
    with no_grad():
        again = loss_fn()
    if float(first.data) != float(again.data):
        raise GradCheckError(
            f"loss_fn is not deterministic: {float(first.data)!r} vs {float(again.data)!r}")
    if not np.isfinite(first.data):
        raise GradCheckError("loss is not finite")

    for p in params:
        p.grad = None
    first.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    native = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        worst = 0.0
        for p, ana in zip(params, analytic):
            flat = p.data.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                with no_grad():
                    hi = float(loss_fn().data)
                flat[i] = orig - epsilon
                with no_grad():
                    lo = float(loss_fn().data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * epsilon)
                a = float(ana.ravel()[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
    finally:
        for p, arr in zip(params, native):
            p.data = arr
            p.grad = None
    return worst
