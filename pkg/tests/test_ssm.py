"""State-space block contracts: recurrences, modes, symmetry, grads."""

import time

import numpy as np
import pytest

import mdet.autodiff as ad
import mdet.ssm as ssm
from mdet.errors import DimensionError, UnsupportedModeError
from mdet.ptree import cast_params, named_parameters


def _fixed(rng, state=4, d_in=3, d_out=3, dense=False):
    return ssm.init_fixed_direction(state, d_in, d_out, rng, dense=dense)


def _loop_oracle(u, a, b, c, d, x0=None):
    """Direct per-step evaluation with explicit matrices."""
    t_len = u.shape[0]
    s = b.shape[0]
    a_mat = np.diag(a) if a.ndim == 1 else a
    x = np.zeros(s) if x0 is None else np.asarray(x0, dtype=np.float64)
    ys = []
    for t in range(t_len):
        x = a_mat @ x + b @ u[t]
        ys.append(c @ x + d @ u[t])
    return np.stack(ys)


@pytest.mark.parametrize("dense", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_scan_sequential_matches_loop_oracle(seed, dense):
    rng = np.random.default_rng(seed)
    p = _fixed(rng, dense=dense)
    cast_params(p, np.float64)
    u = rng.standard_normal((11, 3))
    x0 = rng.standard_normal(4)
    got = ssm.scan_sequential(u, p, x0=x0).data
    ref = _loop_oracle(u, p.a_bar.data, p.b_bar.data, p.c_bar.data,
                       p.d_bar.data, x0)
    assert np.allclose(got, ref, atol=1e-10)


@pytest.mark.parametrize("t_len", [1, 2, 3, 17, 64, 257])
def test_scan_parallel_matches_sequential(t_len):
    rng = np.random.default_rng(t_len)
    p = _fixed(rng)
    u = rng.standard_normal((t_len, 3)).astype(np.float32)
    cast_params(p, np.float32)
    seq = ssm.scan_sequential(u, p).data
    par = ssm.scan_parallel(u, p).data
    assert np.max(np.abs(seq - par)) < 1e-5


def test_scan_parallel_rejects_dense_transition():
    rng = np.random.default_rng(0)
    p = _fixed(rng, dense=True)
    with pytest.raises(UnsupportedModeError):
        ssm.scan_parallel(np.zeros((4, 3), dtype=np.float32), p)


def test_forward_stream_is_causal():
    rng = np.random.default_rng(1)
    p = _fixed(rng)
    cast_params(p, np.float64)
    u = rng.standard_normal((12, 3))
    base = ssm.scan_sequential(u, p).data
    for t in (0, 5, 10):
        u2 = u.copy()
        u2[t + 1:] += rng.standard_normal((12 - t - 1, 3))
        pert = ssm.scan_sequential(u2, p).data
        assert np.array_equal(base[:t + 1], pert[:t + 1])


def test_fixed_mode_is_linear_when_skip_is_zero():
    rng = np.random.default_rng(2)
    p = _fixed(rng)
    cast_params(p, np.float64)
    p.d_bar.data[:] = 0.0
    u = rng.standard_normal((9, 3))
    v = rng.standard_normal((9, 3))
    lhs = ssm.scan_sequential(2.0 * u - 3.0 * v, p).data
    rhs = 2.0 * ssm.scan_sequential(u, p).data \
        - 3.0 * ssm.scan_sequential(v, p).data
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_selective_parameters_match_vectorized_path():
    rng = np.random.default_rng(3)
    proj = ssm.init_selective_projections(6, 4, rng)
    cast_params(proj, np.float64)
    v = rng.standard_normal((5, 6))

    # Rebuild the vectorized intermediates exactly as selective_scan does.
    delta = ad.softplus(
        ad.add_row(ad.matmul(ad.tensor(v), proj.w_delta), proj.b_delta)).data
    b_seq = (v @ proj.w_b.data)
    a = -np.exp(proj.a_log.data)
    a_bar = np.exp(delta[:, :, None] * a[None, None, :])
    for t in range(5):
        per = ssm.selective_parameters(v[t], proj)
        assert np.allclose(per["delta"], delta[t], atol=1e-12)
        assert np.allclose(per["b"], b_seq[t], atol=1e-12)
        assert np.allclose(per["a_bar"], a_bar[t], atol=1e-12)
        # Discretized transition factors stay strictly inside (0, 1).
        assert np.all(per["a_bar"] > 0) and np.all(per["a_bar"] < 1)
        assert np.all(per["delta"] > 0)


@pytest.mark.parametrize("kernel", ["sequential", "parallel"])
def test_selective_scan_kernels_agree(kernel):
    rng = np.random.default_rng(4)
    proj = ssm.init_selective_projections(8, 4, rng)
    v = ad.tensor(rng.standard_normal((33, 8)).astype(np.float32))
    seq = ssm.selective_scan(v, proj, kernel="sequential").data
    other = ssm.selective_scan(v, proj, kernel=kernel).data
    assert np.max(np.abs(seq - other)) < 1e-5


def test_block_reduces_to_forward_readout():
    # W_b = 0, identity activation, no residual, no norm: the block is
    # exactly the forward stream times W_f.
    rng = np.random.default_rng(5)
    block = ssm.init_block(6, 4, rng, selective=False)
    cast_params(block, np.float64)
    block.w_b.data[:] = 0.0
    block.activation = "identity"
    block.use_residual = False
    block.use_norm = False
    u = rng.standard_normal((10, 6))
    got = ssm.bidirectional_block(ad.tensor(u), block).data
    ref = ssm.scan_sequential(u, block.fwd).data @ block.w_f.data
    assert np.allclose(got, ref, atol=1e-12)


def test_block_backward_stream_sees_the_future():
    rng = np.random.default_rng(6)
    block = ssm.init_block(6, 4, rng, selective=True)
    cast_params(block, np.float64)
    block.use_norm = False  # keep token mixing to the scans only
    u = rng.standard_normal((8, 6))
    base = ssm.bidirectional_block(ad.tensor(u), block).data
    u2 = u.copy()
    u2[-1] += 1.0
    pert = ssm.bidirectional_block(ad.tensor(u2), block).data
    # Earlier outputs change because the backward scan carries state
    # from the end of the sequence.
    assert np.max(np.abs(pert[0] - base[0])) > 0


def test_block_direction_swap_symmetry():
    rng = np.random.default_rng(7)
    block = ssm.init_block(6, 4, rng, selective=True)
    u = rng.standard_normal((9, 6)).astype(np.float32)
    out = ssm.bidirectional_block(ad.tensor(u), block).data
    swapped = ssm.BidirectionalBlockParams(
        fwd=block.bwd, bwd=block.fwd, w_f=block.w_b, w_b=block.w_f,
        norm_scale=block.norm_scale, norm_shift=block.norm_shift,
        activation=block.activation, use_residual=block.use_residual,
        use_norm=block.use_norm,
    )
    out_rev = ssm.bidirectional_block(ad.tensor(u[::-1].copy()), swapped).data
    assert np.allclose(out_rev[::-1], out, atol=1e-5)


def test_run_stack_empty_is_identity_and_width_checked():
    rng = np.random.default_rng(8)
    stack = ssm.init_stack(0, 6, 4, rng)
    u = rng.standard_normal((5, 6)).astype(np.float32)
    out = ssm.run_stack(u, stack)
    assert np.array_equal(out.data, u)
    with pytest.raises(DimensionError):
        ssm.run_stack(np.zeros((5, 7), dtype=np.float32), stack)


def test_run_stack_composes_blocks():
    rng = np.random.default_rng(9)
    stack = ssm.init_stack(2, 6, 4, rng)
    u = ad.tensor(rng.standard_normal((5, 6)).astype(np.float32))
    manual = ssm.bidirectional_block(
        ssm.bidirectional_block(u, stack.blocks[0]), stack.blocks[1])
    assert np.array_equal(ssm.run_stack(u, stack).data, manual.data)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("selective", [True, False])
def test_block_gradients(seed, selective):
    rng = np.random.default_rng(seed)
    block = ssm.init_block(5, 3, rng, selective=selective)
    cast_params(block, np.float64)
    params = named_parameters(block)
    u = rng.standard_normal((7, 5))
    w = np.random.default_rng(100 + seed).standard_normal((7, 5))

    def f():
        out = ssm.bidirectional_block(ad.tensor(u), block)
        return ad.sum_all(ad.mul(out, ad.tensor(w)))

    rep = ad.grad_check(f, list(params.values()), step=1e-6,
                        names=list(params))
    assert rep.max_relative_error < 1e-3, rep.per_parameter


def test_sequential_scan_runtime_grows_linearly():
    # Coarse slope check on the raw kernel; the benchmark harness does
    # the rigorous version.
    from mdet.autodiff import _pair_scan_sequential

    sizes = [1024, 4096, 16384]
    times = []
    for t_len in sizes:
        a = np.full((t_len, 16), 0.9, dtype=np.float32)
        b = np.ones((t_len, 16), dtype=np.float32)
        _pair_scan_sequential(a, b)  # warm up
        best = np.inf
        for _ in range(3):
            start = time.perf_counter()
            _pair_scan_sequential(a, b)
            best = min(best, time.perf_counter() - start)
        times.append(best)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert 0.7 < slope < 1.4, (sizes, times, slope)
