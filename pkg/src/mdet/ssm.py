"""State-space sequence blocks.

The core recurrence over a token sequence u_1..u_T is

    x_t = A_bar x_{t-1} + B_bar u_t
    y_t = C_bar x_t + D_bar u_t

with x_0 = 0 unless stated otherwise.  ``scan_sequential`` evaluates
it step by step for diagonal or dense A_bar; ``scan_parallel``
evaluates the same values through a work-efficient associative scan
and therefore requires a diagonal transition.

In selective mode the transition is input dependent: per token,
delta_t = softplus(W_d u_t + b_d), B_t = W_b u_t, C_t = W_c u_t, and
the discretized transition is A_bar_t = exp(delta_t * a) with a < 0,
B_bar_t u_t = (delta_t * u_t) outer B_t.  The state is (D, N): every
channel carries its own length-N state.

A bidirectional block runs one scan left to right and one right to
left over the (optionally normalized) input and fuses the two streams
with a pointwise nonlinearity:

    h_t = phi(W_f y_f_t + W_b y_b_t)

followed by a residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, UnsupportedModeError


@dataclass
class SsmDirectionParams:
    """Constant (non-selective) scan parameters for one direction.

    ``a_bar`` is a (S,) diagonal or a (S, S) dense transition; dense
    transitions only support sequential evaluation.
    """

    a_bar: ad.Tensor
    b_bar: ad.Tensor  # (S, D_in)
    c_bar: ad.Tensor  # (D_out, S)
    d_bar: ad.Tensor  # (D_out, D_in)

    @property
    def diagonal(self) -> bool:
        return self.a_bar.data.ndim == 1

    @property
    def state_size(self) -> int:
        return self.a_bar.data.shape[0]


@dataclass
class SelectiveProjections:
    """Input-dependent scan parameters for one direction.

    Projections are stored input-major, i.e. applied as ``v @ w``.
    ``a_log`` parameterizes the continuous transition a = -exp(a_log),
    which keeps every discretized factor exp(delta * a) inside (0, 1).
    """

    w_delta: ad.Tensor  # (D, D)
    b_delta: ad.Tensor  # (D,)
    w_b: ad.Tensor      # (D, N)
    w_c: ad.Tensor      # (D, N)
    a_log: ad.Tensor    # (N,)
    d_skip: ad.Tensor   # (D,)


def _check_input(u, d_in):
    if u.data.ndim != 2:
        raise DimensionError(f"scan input must be (T, D), got {u.data.shape}")
    if u.data.shape[1] != d_in:
        raise DimensionError(
            f"scan input width {u.data.shape[1]} does not match "
            f"parameters ({d_in})"
        )
    if u.data.shape[0] < 1:
        raise DimensionError("scan input needs at least one token")


def _readout(x, u, p):
    y = ad.matmul(x, ad.transpose2d(p.c_bar))
    return ad.add(y, ad.matmul(u, ad.transpose2d(p.d_bar)))


def scan_sequential(u, p: SsmDirectionParams, x0=None) -> ad.Tensor:
    """Step-by-step evaluation; supports diagonal and dense A_bar."""
    if not isinstance(u, ad.Tensor):
        u = ad.tensor(u)
    _check_input(u, p.b_bar.data.shape[1])
    t_len = u.data.shape[0]
    if p.diagonal:
        drive = ad.matmul(u, ad.transpose2d(p.b_bar))
        a_rows = ad.tile_rows(p.a_bar, t_len)
        x = ad.scan_assoc(a_rows, drive, x0=x0, kernel="sequential")
    else:
        x = ad.scan_dense(u, p.a_bar, p.b_bar, x0=x0)
    return _readout(x, u, p)


def scan_parallel(u, p: SsmDirectionParams, x0=None) -> ad.Tensor:
    """Associative-scan evaluation; diagonal transitions only."""
    if not isinstance(u, ad.Tensor):
        u = ad.tensor(u)
    if not p.diagonal:
        raise UnsupportedModeError(
            "parallel scan requires a diagonal transition; "
            f"got a_bar of shape {p.a_bar.data.shape}"
        )
    _check_input(u, p.b_bar.data.shape[1])
    t_len = u.data.shape[0]
    drive = ad.matmul(u, ad.transpose2d(p.b_bar))
    a_rows = ad.tile_rows(p.a_bar, t_len)
    x = ad.scan_assoc(a_rows, drive, x0=x0, kernel="parallel")
    return _readout(x, u, p)


def selective_parameters(u_t, proj: SelectiveProjections):
    """Per-token scan parameters for one input row (debug/test view).

    Returns a dict with delta (D,), b (N,), c (N,), a_bar (D, N) and
    b_bar_u (D, N), computed exactly as the vectorized path does.
    """
    u_t = np.asarray(u_t)
    if u_t.ndim != 1 or u_t.shape[0] != proj.w_delta.data.shape[0]:
        raise DimensionError(
            f"token of shape {u_t.shape} does not match projections "
            f"({proj.w_delta.data.shape[0]} wide)"
        )
    with ad.no_grad():
        raw = u_t @ proj.w_delta.data + proj.b_delta.data
        delta = np.logaddexp(np.zeros((), dtype=raw.dtype), raw)
        b = u_t @ proj.w_b.data
        c = u_t @ proj.w_c.data
        a = -np.exp(proj.a_log.data)
        a_bar = np.exp(delta[:, None] * a[None, :])
        b_bar_u = (delta * u_t)[:, None] * b[None, :]
    return {"delta": delta, "b": b, "c": c, "a_bar": a_bar, "b_bar_u": b_bar_u}


def selective_scan(v: ad.Tensor, proj: SelectiveProjections,
                   kernel: str = "sequential") -> ad.Tensor:
    """Input-dependent scan over a whole (T, D) sequence."""
    _check_input(v, proj.w_delta.data.shape[0])
    delta = ad.softplus(ad.add_row(ad.matmul(v, proj.w_delta), proj.b_delta))
    b_seq = ad.matmul(v, proj.w_b)
    c_seq = ad.matmul(v, proj.w_c)
    a = ad.neg(ad.exp(proj.a_log))
    a_bar = ad.exp(ad.outer_vec(delta, a))          # (T, D, N)
    drive = ad.outer_rows(ad.mul(delta, v), b_seq)  # (T, D, N)
    x = ad.scan_assoc(a_bar, drive, kernel=kernel)
    y = ad.readout_state(x, c_seq)
    return ad.add(y, ad.mul_row(v, proj.d_skip))


@dataclass
class BidirectionalBlockParams:
    """One bidirectional block: two directional scans plus fusion.

    ``fwd``/``bwd`` hold either SsmDirectionParams (fixed mode) or
    SelectiveProjections (selective mode); both directions must use
    the same mode.  ``w_f``/``w_b`` are the (D, D) fusion matrices,
    applied input-major.
    """

    fwd: object
    bwd: object
    w_f: ad.Tensor
    w_b: ad.Tensor
    norm_scale: ad.Tensor
    norm_shift: ad.Tensor
    activation: str = "gelu"
    use_residual: bool = True
    use_norm: bool = True


def _direction(v, p, kernel):
    if isinstance(p, SelectiveProjections):
        return selective_scan(v, p, kernel=kernel)
    if isinstance(p, SsmDirectionParams):
        if kernel == "parallel":
            return scan_parallel(v, p)
        return scan_sequential(v, p)
    raise ConfigError(f"unknown direction parameters {type(p).__name__}")


def bidirectional_block(u: ad.Tensor, p: BidirectionalBlockParams,
                        kernel: str = "sequential") -> ad.Tensor:
    """Fuse a forward and a backward scan of one token sequence.

    The backward stream is the forward recurrence run on the reversed
    sequence and reversed back, so state flows from later tokens to
    earlier ones.
    """
    if not isinstance(u, ad.Tensor):
        u = ad.tensor(u)
    v = u
    if p.use_norm:
        v = ad.add_row(ad.mul_row(ad.layernorm_rows(u), p.norm_scale),
                       p.norm_shift)
    y_f = _direction(v, p.fwd, kernel)
    y_b = ad.reverse_rows(_direction(ad.reverse_rows(v), p.bwd, kernel))
    fused = ad.add(ad.matmul(y_f, p.w_f), ad.matmul(y_b, p.w_b))
    h = ad.elementwise(p.activation, fused)
    if p.use_residual:
        return ad.add(u, h)
    return h


@dataclass
class SsmStack:
    """A pipeline of bidirectional blocks over one token width."""

    blocks: list = field(default_factory=list)
    width: int = 0


def run_stack(u, stack: SsmStack, kernel: str = "sequential") -> ad.Tensor:
    if not isinstance(u, ad.Tensor):
        u = ad.tensor(u)
    if stack.width and u.data.shape[1] != stack.width:
        raise DimensionError(
            f"stack width {stack.width} does not match input "
            f"{u.data.shape[1]}"
        )
    out = u
    for block in stack.blocks:
        out = bidirectional_block(out, block, kernel=kernel)
    return out


# ---------------------------------------------------------------------------
# initialization


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def init_selective_projections(width: int, state: int,
                               rng) -> SelectiveProjections:
    scale = 1.0 / np.sqrt(width)
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=width))
    return SelectiveProjections(
        w_delta=ad.param(rng.uniform(
            -scale, scale, size=(width, width)).astype(np.float32)),
        b_delta=ad.param(_inv_softplus(dt).astype(np.float32)),
        w_b=ad.param(rng.uniform(
            -scale, scale, size=(width, state)).astype(np.float32)),
        w_c=ad.param(rng.uniform(
            -scale, scale, size=(width, state)).astype(np.float32)),
        a_log=ad.param(np.log(np.arange(1, state + 1)).astype(np.float32)),
        d_skip=ad.param(np.ones(width, dtype=np.float32)),
    )


def init_fixed_direction(state: int, d_in: int, d_out: int, rng,
                         dense: bool = False) -> SsmDirectionParams:
    if dense:
        a = rng.uniform(-0.4, 0.4, size=(state, state))
    else:
        a = rng.uniform(0.1, 0.95, size=state)
    sb = 1.0 / np.sqrt(d_in)
    sc = 1.0 / np.sqrt(state)
    return SsmDirectionParams(
        a_bar=ad.param(a.astype(np.float32)),
        b_bar=ad.param(rng.uniform(
            -sb, sb, size=(state, d_in)).astype(np.float32)),
        c_bar=ad.param(rng.uniform(
            -sc, sc, size=(d_out, state)).astype(np.float32)),
        d_bar=ad.param(rng.uniform(
            -sb, sb, size=(d_out, d_in)).astype(np.float32)),
    )


def init_block(width: int, state: int, rng,
               selective: bool = True) -> BidirectionalBlockParams:
    scale = 1.0 / np.sqrt(width)
    if selective:
        fwd = init_selective_projections(width, state, rng)
        bwd = init_selective_projections(width, state, rng)
    else:
        fwd = init_fixed_direction(state, width, width, rng)
        bwd = init_fixed_direction(state, width, width, rng)
    return BidirectionalBlockParams(
        fwd=fwd,
        bwd=bwd,
        w_f=ad.param(rng.uniform(
            -scale, scale, size=(width, width)).astype(np.float32)),
        w_b=ad.param(rng.uniform(
            -scale, scale, size=(width, width)).astype(np.float32)),
        norm_scale=ad.param(np.ones(width, dtype=np.float32)),
        norm_shift=ad.param(np.zeros(width, dtype=np.float32)),
    )


def init_stack(depth: int, width: int, state: int, rng,
               selective: bool = True) -> SsmStack:
    if depth < 0:
        raise ConfigError(f"negative stack depth {depth}")
    return SsmStack(
        blocks=[init_block(width, state, rng, selective=selective)
                for _ in range(depth)],
        width=width,
    )
