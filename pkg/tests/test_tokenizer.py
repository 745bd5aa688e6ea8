"""Tokenizer contracts: grid planning, padding, codes, round trips."""

import numpy as np
import pytest

import mdet.autodiff as ad
from mdet.errors import ConfigError, DimensionError, IntegrityError
from mdet.tokenizer import (
    EmbedParams,
    extract_patches,
    init_embed,
    plan_grid,
    regrid,
    sinusoid_codes,
    tokenize,
)


def test_plan_grid_hd_example():
    g = plan_grid(1080, 1920, 32)
    assert (g.rows, g.cols) == (34, 60)
    assert g.token_count == 2040
    assert (g.pad_bottom, g.pad_right) == (8, 0)


def test_plan_grid_exact_fit_has_no_padding():
    g = plan_grid(256, 256, 16)
    assert (g.rows, g.cols, g.pad_bottom, g.pad_right) == (16, 16, 0, 0)
    assert g.token_count == 256


def test_plan_grid_rejects_nonsense():
    with pytest.raises(ConfigError):
        plan_grid(0, 10, 4)
    with pytest.raises(ConfigError):
        plan_grid(10, 10, 0)


def test_extract_patches_raster_order_and_padding():
    # 2x3 grid of 2x2 patches from a 3x5 image; padding must be zero.
    img = np.arange(3 * 3 * 5, dtype=np.float64).reshape(3, 3, 5)
    mat, grid = extract_patches(img, 2)
    assert (grid.rows, grid.cols) == (2, 3)
    assert mat.shape == (6, 12)
    # Patch (0, 0): channel-major, row-major within the patch.
    expect = np.concatenate([img[c, 0:2, 0:2].reshape(-1) for c in range(3)])
    assert np.array_equal(mat[0], expect)
    # Patch (0, 2) hits the right edge: one real column, one zero column.
    p02 = mat[2].reshape(3, 2, 2)
    assert np.array_equal(p02[:, :, 0], img[:, 0:2, 4])
    assert np.all(p02[:, :, 1] == 0)
    # Patch (1, 0) hits the bottom edge.
    p10 = mat[3].reshape(3, 2, 2)
    assert np.array_equal(p10[:, 0, :], img[:, 2, 0:2])
    assert np.all(p10[:, 1, :] == 0)


def test_sinusoid_codes_deterministic_and_position_dependent():
    g = plan_grid(64, 96, 16)
    a = sinusoid_codes(g.rows, g.cols, 32)
    b = sinusoid_codes(g.rows, g.cols, 32)
    assert a.tobytes() == b.tobytes()
    # All rows distinct: positions are uniquely encoded.
    assert len({row.tobytes() for row in a}) == g.token_count
    # Values bounded by construction.
    assert np.max(np.abs(a)) <= 1.0
    with pytest.raises(ConfigError):
        sinusoid_codes(g.rows, g.cols, 30)


def test_zero_image_zero_bias_gives_pure_position_codes():
    rng = np.random.default_rng(0)
    params = init_embed(8, 16, rng)
    params.bias.data[:] = 0
    img = np.zeros((3, 24, 16), dtype=np.float32)
    seq = tokenize(img, params, 8)
    codes = sinusoid_codes(seq.grid.rows, seq.grid.cols, 16, np.float32)
    assert np.array_equal(seq.tokens.data, codes)


def test_tokenize_gradients_reach_embedding():
    rng = np.random.default_rng(1)
    proj = ad.param(rng.standard_normal((3 * 4 * 4, 8)))
    bias = ad.param(rng.standard_normal(8))
    params = EmbedParams(projection=proj, bias=bias)
    img = rng.uniform(0, 1, size=(3, 8, 8))

    def f():
        seq = tokenize(img, params, 4)
        w = ad.tensor(np.random.default_rng(2).standard_normal(
            seq.tokens.data.shape))
        return ad.sum_all(ad.mul(seq.tokens, w))

    rep = ad.grad_check(f, [proj, bias], step=1e-6, names=["proj", "bias"])
    assert rep.max_relative_error < 1e-3


def test_regrid_round_trip():
    rng = np.random.default_rng(3)
    params = init_embed(4, 16, rng)
    img = rng.uniform(0, 1, size=(3, 12, 8)).astype(np.float32)
    seq = tokenize(img, params, 4)
    grid_feat = regrid(seq).data
    assert grid_feat.shape == (16, 3, 2)
    # Token k must land at its raster cell.
    for k, (r, c) in enumerate(seq.positions):
        assert np.array_equal(grid_feat[:, r, c], seq.tokens.data[k])


def test_regrid_rejects_broken_positions():
    rng = np.random.default_rng(4)
    params = init_embed(4, 16, rng)
    img = rng.uniform(0, 1, size=(3, 8, 8)).astype(np.float32)
    seq = tokenize(img, params, 4)
    seq.positions = seq.positions[::-1]
    with pytest.raises(IntegrityError):
        regrid(seq)


def test_tokenize_rejects_bad_image_shape():
    rng = np.random.default_rng(5)
    params = init_embed(4, 16, rng)
    with pytest.raises(DimensionError):
        tokenize(np.zeros((1, 8, 8)), params, 4)


def test_patch_size_mismatch_against_params():
    rng = np.random.default_rng(6)
    params = init_embed(4, 16, rng)
    with pytest.raises(DimensionError):
        tokenize(np.zeros((3, 8, 8)), params, 8)
