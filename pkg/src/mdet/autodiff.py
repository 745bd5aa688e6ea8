"""Minimal dense-tensor reverse-mode autodiff on numpy arrays.

Design rules, chosen to keep gradient code auditable:

* every differentiable computation goes through a module-level op
  function; each op stores a closure that maps the output gradient to
  input gradients (a VJP),
* shapes must match exactly; there is no implicit broadcasting, the
  few broadcast-like patterns that are needed (bias over rows, outer
  products for state-space scans) exist as dedicated ops,
* dtypes must agree between operands; float32 is the working precision
  and float64 is used for gradient checking,
* ``log`` only exists in a clamped form so losses cannot produce
  infinities.

Graph construction can be suspended with :func:`no_grad` for inference
and benchmarking paths.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DeterminismError,
    DimensionError,
    NumericError,
)

LOG_CLAMP_LO = 1e-7
LOG_CLAMP_HI = 1.0

# Fixed constants of the tanh-form gelu.
_GELU_K = 0.7978845608028654  # sqrt(2 / pi)
_GELU_C = 0.044715

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables tape construction."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional place on the tape.

    ``data`` is always a numpy array of float32 or float64.  ``grad``
    is filled by :func:`backward` and always has the same shape and
    dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ConfigError(
                f"mixed dtypes {dt} and {t.data.dtype}; cast explicitly"
            )
    return dt


def _make(out_data, parents, vjp):
    """Wrap op output; attach the tape node only when it can matter."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into leaf tensors."""
    if loss.data.shape != ():
        raise DimensionError(
            f"backward needs a scalar, got shape {loss.data.shape}"
        )
    if not loss.requires_grad:
        raise ConfigError("backward on a tensor without a tape")

    # Iterative topological order; graphs can be deep.
    topo = []
    state = {}  # id -> 0 discovered, 1 finished
    stack = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid) == 1:
            stack.pop()
            continue
        if nid in state:
            state[nid] = 1
            topo.append(node)
            stack.pop()
            continue
        state[nid] = 0
        for p in node._parents:
            if p.requires_grad and id(p) not in state:
                stack.append(p)

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match "
                    f"parent shape {parent.data.shape}"
                )
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=True)
            else:
                parent.grad = parent.grad + g
        if node._parents:
            # Interior gradients are not needed after propagation.
            node.grad = None


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes {a.data.shape} x {b.data.shape} incompatible"
        )
    _same_dtype(a, b)
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(out, (a, b), vjp)


def _binary(a, b, fwd, vjp_factory):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"elementwise shapes {a.data.shape} and {b.data.shape} differ"
        )
    _same_dtype(a, b)
    return _make(fwd(a.data, b.data), (a, b), vjp_factory(a.data, b.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda x, y: lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda x, y: lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda x, y: lambda g: (g * y, g * x))


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda x, y: lambda g: (g / y, -g * x / (y * y)),
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    # Ties send the gradient to the first operand.
    return _binary(
        a, b, np.minimum,
        lambda x, y: lambda g: (g * (x <= y), g * (x > y)),
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        a, b, np.maximum,
        lambda x, y: lambda g: (g * (x >= y), g * (x < y)),
    )


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data + c, (x,), lambda g: (g,))


def add_row(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-D vector to every row of a (T, D) matrix."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"add_row shapes {x.data.shape} and {v.data.shape} incompatible"
        )
    _same_dtype(x, v)
    return _make(x.data + v.data[None, :], (x, v),
                 lambda g: (g, g.sum(axis=0)))


def mul_row(x: Tensor, v: Tensor) -> Tensor:
    """Scale every row of a (T, D) matrix by a length-D vector."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"mul_row shapes {x.data.shape} and {v.data.shape} incompatible"
        )
    _same_dtype(x, v)
    xd, vd = x.data, v.data
    return _make(xd * vd[None, :], (x, v),
                 lambda g: (g * vd[None, :], (g * xd).sum(axis=0)))


def clamp_min(x: Tensor, c: float) -> Tensor:
    c = float(c)
    mask = x.data > c
    return _make(np.maximum(x.data, c), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape surgery


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d needs a matrix, got {x.data.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def grid_to_rows(x: Tensor) -> Tensor:
    """(D, rows, cols) feature grid to (rows*cols, D) raster-order rows."""
    if x.data.ndim != 3:
        raise DimensionError(f"grid_to_rows needs rank 3, got {x.data.shape}")
    d, r, c = x.data.shape
    out = x.data.transpose(1, 2, 0).reshape(r * c, d)

    def vjp(g):
        return (g.reshape(r, c, d).transpose(2, 0, 1).copy(),)

    return _make(out.copy(), (x,), vjp)


def rows_to_grid(x: Tensor, rows: int, cols: int) -> Tensor:
    """(rows*cols, D) raster-order rows to a (D, rows, cols) grid."""
    if x.data.ndim != 2 or x.data.shape[0] != rows * cols:
        raise DimensionError(
            f"rows_to_grid: {x.data.shape} does not hold {rows}x{cols} cells"
        )
    d = x.data.shape[1]
    out = x.data.reshape(rows, cols, d).transpose(2, 0, 1)

    def vjp(g):
        return (g.transpose(1, 2, 0).reshape(rows * cols, d).copy(),)

    return _make(out.copy(), (x,), vjp)


def take_row(x: Tensor, i: int) -> Tensor:
    i = int(i)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _make(x.data[i].copy(), (x,), vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise DimensionError(
            f"gather_rows index out of range for {x.data.shape[0]} rows"
        )

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx].copy(), (x,), vjp)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy ``base`` and overwrite the listed rows with ``rows``.

    Untouched rows keep their bitwise values, which the pruning path
    relies on.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if rows.data.shape != (idx.size,) + base.data.shape[1:]:
        raise DimensionError(
            f"scatter_rows: {rows.data.shape} does not fit {idx.size} slots "
            f"of {base.data.shape}"
        )
    if idx.size != np.unique(idx).size:
        raise DimensionError("scatter_rows indices must be unique")
    _same_dtype(base, rows)
    out = base.data.copy()
    out[idx] = rows.data

    def vjp(g):
        gb = g.copy()
        gb[idx] = 0
        return (gb, g[idx].copy())

    return _make(out, (base, rows), vjp)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_rows of zero parts")
    _same_dtype(*parts)
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]].copy() for i in range(len(parts))
        )

    return _make(out, tuple(parts), vjp)


def reverse_rows(x: Tensor) -> Tensor:
    return _make(x.data[::-1].copy(), (x,), lambda g: (g[::-1].copy(),))


def select_entries(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[k], cols[k]] as a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise DimensionError("select_entries needs matching flat index lists")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _make(x.data[rows, cols].copy(), (x,), vjp)


def tile_rows(v: Tensor, t: int) -> Tensor:
    """Repeat a vector as t identical rows."""
    if v.data.ndim != 1:
        raise DimensionError(f"tile_rows needs a vector, got {v.data.shape}")
    out = np.broadcast_to(v.data, (int(t),) + v.data.shape).copy()
    return _make(out, (v,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    dt = x.data.dtype
    return _make(
        np.asarray(x.data.sum(), dtype=dt), (x,),
        lambda g: (np.full(shape, g, dtype=dt),),
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.data.shape
    dt = x.data.dtype
    return _make(
        np.asarray(x.data.mean(), dtype=dt), (x,),
        lambda g: (np.full(shape, g / n, dtype=dt),),
    )


def sum_rows(x: Tensor) -> Tensor:
    """Row sums of a matrix: (T, D) -> (T,)."""
    if x.data.ndim != 2:
        raise DimensionError(f"sum_rows needs a matrix, got {x.data.shape}")
    d = x.data.shape[1]
    return _make(
        x.data.sum(axis=1), (x,),
        lambda g: (np.repeat(g[:, None], d, axis=1),),
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"elementwise '{name}': non-finite input")


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.data)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log_clamped(x: Tensor) -> Tensor:
    """log of the input clamped into [1e-7, 1]; flat outside the window."""
    _check_finite("log_clamped", x.data)
    clipped = np.clip(x.data, LOG_CLAMP_LO, LOG_CLAMP_HI)
    inside = (x.data >= LOG_CLAMP_LO) & (x.data <= LOG_CLAMP_HI)
    return _make(np.log(clipped), (x,), lambda g: (g * inside / clipped,))


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x.data)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    _check_finite("softplus", x.data)
    out = np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * sig,))


def gelu(x: Tensor) -> Tensor:
    """tanh-form gelu with fixed constants sqrt(2/pi) and 0.044715."""
    _check_finite("gelu", x.data)
    xd = x.data
    inner = _GELU_K * (xd + _GELU_C * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), vjp)


def abs_val(x: Tensor) -> Tensor:
    _check_finite("abs", x.data)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


_ELEMENTWISE = {}


def elementwise(name: str, x: Tensor) -> Tensor:
    """Apply a named unary op; unknown names raise ConfigError."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ConfigError(f"unknown elementwise op '{name}'") from None
    return fn(x)


_ELEMENTWISE.update({
    "exp": exp,
    "log_clamped": log_clamped,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "gelu": gelu,
    "abs": abs_val,
    "neg": neg,
    "identity": lambda x: _make(x.data.copy(), (x,), lambda g: (g,)),
})


def identity(x: Tensor) -> Tensor:
    return elementwise("identity", x)


# ---------------------------------------------------------------------------
# row-wise normalizations


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {x.data.shape}")
    _check_finite("softmax_rows", x.data)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp)


def layernorm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance."""
    if x.data.ndim != 2:
        raise DimensionError(
            f"layernorm_rows needs a matrix, got {x.data.shape}"
        )
    _check_finite("layernorm_rows", x.data)
    mu = x.data.mean(axis=1, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), vjp)


# ---------------------------------------------------------------------------
# state-space scan ops


def _pair_scan_sequential(a, b, x0=None):
    """x_t = a_t * x_{t-1} + b_t with x_0 = 0 (or x0), elementwise."""
    out = np.empty_like(b)
    state = np.zeros(b.shape[1:], dtype=b.dtype) if x0 is None else x0
    for t in range(b.shape[0]):
        state = a[t] * state + b[t]
        out[t] = state
    return out


def _pair_scan_blelloch(a, b, x0=None):
    """Same recurrence evaluated as a work-efficient associative scan.

    Each step is the affine map x -> a*x + b; maps compose as
    (a2, b2) after (a1, b1) = (a2*a1, a2*b1 + b2).  An exclusive
    Blelloch scan (up-sweep then down-sweep over a padded power of
    two) yields the composition of all earlier steps, and one more
    local combine makes it inclusive.
    """
    t_len = a.shape[0]
    tp = 1
    while tp < t_len:
        tp *= 2
    av = np.ones((tp,) + a.shape[1:], dtype=a.dtype)
    bv = np.zeros((tp,) + b.shape[1:], dtype=b.dtype)
    av[:t_len] = a
    bv[:t_len] = b

    d = 1
    while d < tp:
        hi = np.arange(2 * d - 1, tp, 2 * d)
        lo = hi - d
        a_hi = av[hi]
        av[hi] = a_hi * av[lo]
        bv[hi] = a_hi * bv[lo] + bv[hi]
        d *= 2

    # Exclusive down-sweep: the root becomes the identity map.
    av[tp - 1] = 1.0
    bv[tp - 1] = 0.0
    d = tp // 2
    while d >= 1:
        hi = np.arange(2 * d - 1, tp, 2 * d)
        lo = hi - d
        ta = av[lo].copy()
        tb = bv[lo].copy()
        av[lo] = av[hi]
        bv[lo] = bv[hi]
        av[hi] = ta * av[hi]
        bv[hi] = ta * bv[hi] + tb
        d //= 2

    # Inclusive value: apply the local step to the exclusive prefix.
    ax = av[:t_len]
    bx = bv[:t_len]
    if x0 is None:
        return a * bx + b
    return a * (ax * x0 + bx) + b


SCAN_KERNELS = {
    "sequential": _pair_scan_sequential,
    "parallel": _pair_scan_blelloch,
}


def scan_assoc(a: Tensor, b: Tensor, x0=None, kernel: str = "sequential") -> Tensor:
    """First-order linear recurrence along axis 0.

    ``a`` and ``b`` share a shape (T, ...); the result x satisfies
    x_t = a_t * x_{t-1} + b_t with x_0 given by ``x0`` (zeros when
    omitted; not differentiated).  Both evaluation kernels compute the
    same values up to float reassociation.
    """
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"scan shapes {a.data.shape} and {b.data.shape} differ"
        )
    if a.data.ndim < 1 or a.data.shape[0] < 1:
        raise DimensionError("scan needs at least one step")
    if kernel not in SCAN_KERNELS:
        raise ConfigError(f"unknown scan kernel '{kernel}'")
    _same_dtype(a, b)
    x0d = None
    if x0 is not None:
        x0d = np.asarray(x0, dtype=a.data.dtype)
        if x0d.shape != a.data.shape[1:]:
            raise DimensionError(
                f"x0 shape {x0d.shape} does not match state {a.data.shape[1:]}"
            )
    ad, bd = a.data, b.data
    out = SCAN_KERNELS[kernel](ad, bd, x0d)

    def vjp(g):
        # lam_t = g_t + a_{t+1} * lam_{t+1}, computed as a reversed scan.
        a_next = np.empty_like(ad)
        a_next[:-1] = ad[1:]
        a_next[-1] = 0.0
        lam = _pair_scan_sequential(a_next[::-1], g[::-1])[::-1]
        x_prev = np.empty_like(out)
        x_prev[0] = 0.0 if x0d is None else x0d
        x_prev[1:] = out[:-1]
        return (lam * x_prev, lam.copy())

    return _make(out, (a, b), vjp)


def scan_dense(u: Tensor, a: Tensor, b: Tensor, x0=None) -> Tensor:
    """State recurrence x_t = A x_{t-1} + B u_t with dense square A.

    ``u`` is (T, D_in), ``a`` is (S, S), ``b`` is (S, D_in); returns the
    (T, S) state trajectory.  Sequential only; there is no associative
    reformulation for a dense transition here.
    """
    if u.data.ndim != 2 or a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise DimensionError(
            f"scan_dense needs (T,Din) input and square A, got "
            f"{u.data.shape} and {a.data.shape}"
        )
    s = a.data.shape[0]
    if b.data.shape != (s, u.data.shape[1]):
        raise DimensionError(
            f"scan_dense B shape {b.data.shape} does not match "
            f"({s}, {u.data.shape[1]})"
        )
    _same_dtype(u, a, b)
    t_len = u.data.shape[0]
    ud, adm, bdm = u.data, a.data, b.data
    drive = ud @ bdm.T  # (T, S)
    out = np.empty((t_len, s), dtype=ud.dtype)
    state = np.zeros(s, dtype=ud.dtype) if x0 is None else np.asarray(
        x0, dtype=ud.dtype)
    if state.shape != (s,):
        raise DimensionError(f"x0 shape {state.shape} does not match ({s},)")
    x_init = state.copy()
    for t in range(t_len):
        state = adm @ state + drive[t]
        out[t] = state

    def vjp(g):
        # lam_t = g_t + A^T lam_{t+1}, the adjoint recurrence.
        glam = np.empty_like(out)
        lam = np.zeros(s, dtype=ud.dtype)
        for t in range(t_len - 1, -1, -1):
            lam = g[t] + adm.T @ lam
            glam[t] = lam
        x_prev = np.empty_like(out)
        x_prev[0] = x_init
        x_prev[1:] = out[:-1]
        ga = glam.T @ x_prev
        gb = glam.T @ ud
        gu = glam @ bdm
        return (gu, ga, gb)

    return _make(out, (u, a, b), vjp)


def outer_rows(p: Tensor, q: Tensor) -> Tensor:
    """Per-row outer product: (T, D) x (T, N) -> (T, D, N)."""
    if p.data.ndim != 2 or q.data.ndim != 2 or p.data.shape[0] != q.data.shape[0]:
        raise DimensionError(
            f"outer_rows shapes {p.data.shape} and {q.data.shape} incompatible"
        )
    _same_dtype(p, q)
    pd, qd = p.data, q.data
    out = pd[:, :, None] * qd[:, None, :]

    def vjp(g):
        return (
            np.einsum("tdn,tn->td", g, qd),
            np.einsum("tdn,td->tn", g, pd),
        )

    return _make(out, (p, q), vjp)


def outer_vec(p: Tensor, v: Tensor) -> Tensor:
    """Outer product with a shared vector: (T, D) x (N,) -> (T, D, N)."""
    if p.data.ndim != 2 or v.data.ndim != 1:
        raise DimensionError(
            f"outer_vec shapes {p.data.shape} and {v.data.shape} incompatible"
        )
    _same_dtype(p, v)
    pd, vd = p.data, v.data
    out = pd[:, :, None] * vd[None, None, :]

    def vjp(g):
        return (
            np.einsum("tdn,n->td", g, vd),
            np.einsum("tdn,td->n", g, pd),
        )

    return _make(out, (p, v), vjp)


def readout_state(x: Tensor, c: Tensor) -> Tensor:
    """Contract states against per-step read vectors.

    (T, D, N) states with (T, N) read weights give (T, D) outputs.
    """
    if x.data.ndim != 3 or c.data.ndim != 2 or x.data.shape[0] != c.data.shape[0] \
            or x.data.shape[2] != c.data.shape[1]:
        raise DimensionError(
            f"readout shapes {x.data.shape} and {c.data.shape} incompatible"
        )
    _same_dtype(x, c)
    xd, cd = x.data, c.data
    out = np.einsum("tdn,tn->td", xd, cd)

    def vjp(g):
        return (
            g[:, :, None] * cd[:, None, :],
            np.einsum("td,tdn->tn", g, xd),
        )

    return _make(out, (x, c), vjp)


# ---------------------------------------------------------------------------
# depthwise convolution


def depthwise_conv2d(x: Tensor, k: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution (no cross-channel mixing).

    ``x`` is (C, H, W), ``k`` is (C, kh, kw); each channel is convolved
    with its own kernel.  Output spatial size follows the usual
    floor((H + 2 pad - kh) / stride) + 1 rule.
    """
    if x.data.ndim != 3 or k.data.ndim != 3 or x.data.shape[0] != k.data.shape[0]:
        raise DimensionError(
            f"depthwise_conv2d shapes {x.data.shape} and {k.data.shape} "
            "incompatible"
        )
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ConfigError(f"bad stride {stride} or padding {padding}")
    _same_dtype(x, k)
    c, h, w = x.data.shape
    _, kh, kw = k.data.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel ({kh},{kw}) exceeds padded input ({hp},{wp})"
        )
    xp = np.zeros((c, hp, wp), dtype=x.data.dtype)
    xp[:, padding:padding + h, padding:padding + w] = x.data
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, oh, ow, kh, kw)
    out = np.einsum("cijpq,cpq->cij", win, k.data)

    def vjp(g):
        gk = np.einsum("cijpq,cij->cpq", win, g)
        gxp = np.zeros((c, hp, wp), dtype=g.dtype)
        for p in range(kh):
            for q in range(kw):
                gxp[:, p:p + oh * stride:stride, q:q + ow * stride:stride] += (
                    g * k.data[:, p:p + 1, q:q + 1]
                )
        gx = gxp[:, padding:padding + h, padding:padding + w]
        return (gx.copy(), gk)

    return _make(out, (x, k), vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    max_relative_error: float
    per_parameter: dict = field(default_factory=dict)
    step_size: float = 1e-5
    checked_coordinates: int = 0
    deterministic: bool = True

    @property
    def passed(self) -> bool:
        return self.deterministic and self.max_relative_error < 1e-3


def grad_check(f, params, step: float = 1e-5, samples: int = 32,
               seed: int = 0, names=None) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call and
    return a scalar Tensor.  All parameters must be float64; finite
    differences in float32 would drown in rounding noise.  At most
    ``samples`` coordinates per parameter are probed (all of them for
    small tensors).  Two evaluations of ``f`` must agree bitwise or a
    DeterminismError is raised.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError(
                "grad_check requires float64 parameters; got "
                f"{p.data.dtype}"
            )
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    v1 = f().item()
    v2 = f().item()
    if v1 != v2 or not np.isfinite(v1):
        raise DeterminismError(
            f"loss not reproducible or non-finite: {v1!r} vs {v2!r}"
        )

    zero_grads(params)
    out = f()
    backward(out)
    ad_grads = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]

    rng = np.random.default_rng(seed)
    per_parameter = {}
    worst = 0.0
    total = 0
    with no_grad():
        for name, p, gref in zip(names, params, ad_grads):
            flat = p.data.reshape(-1)
            gflat = gref.reshape(-1)
            n = flat.size
            if n <= samples:
                coords = np.arange(n)
            else:
                coords = np.sort(rng.choice(n, size=samples, replace=False))
            worst_here = 0.0
            for i in coords:
                keep = flat[i]
                flat[i] = keep + step
                fp = f().item()
                flat[i] = keep - step
                fm = f().item()
                flat[i] = keep
                fd = (fp - fm) / (2.0 * step)
                adv = gflat[i]
                rel = abs(adv - fd) / max(abs(adv), abs(fd), 1e-6)
                if rel > worst_here:
                    worst_here = rel
                total += 1
            per_parameter[name] = worst_here
            worst = max(worst, worst_here)

    return GradCheckReport(
        max_relative_error=worst,
        per_parameter=per_parameter,
        step_size=step,
        checked_coordinates=total,
        deterministic=True,
    )
