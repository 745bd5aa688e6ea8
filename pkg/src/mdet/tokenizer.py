"""Patch tokenization of RGB images with sinusoidal position codes.

An image of shape (3, H, W) in [0, 1] is zero-padded on the bottom and
right to whole multiples of the patch size Z, cut into non-overlapping
Z x Z patches in raster order (top-left first, row major), flattened
channel-major to vectors of length 3*Z*Z, and linearly projected to
the model width.  A fixed (non-learned) 2-D sinusoidal code is added
so that sequence position carries grid geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, IntegrityError


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the patch decomposition of one image."""

    image_height: int
    image_width: int
    patch_size: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int

    @property
    def token_count(self) -> int:
        return self.rows * self.cols


@dataclass
class TokenSequence:
    """Embedded tokens plus the grid they came from.

    ``positions[k]`` is the (row, col) cell of token k; tokens are in
    raster order.
    """

    tokens: ad.Tensor  # (T, D)
    grid: PatchGrid
    positions: list


@dataclass
class EmbedParams:
    projection: ad.Tensor  # (3 * Z * Z, D)
    bias: ad.Tensor        # (D,)


def plan_grid(height: int, width: int, patch_size: int) -> PatchGrid:
    if patch_size < 1 or height < 1 or width < 1:
        raise ConfigError(
            f"bad grid request {height}x{width} patch {patch_size}"
        )
    rows = -(-height // patch_size)
    cols = -(-width // patch_size)
    return PatchGrid(
        image_height=height,
        image_width=width,
        patch_size=patch_size,
        rows=rows,
        cols=cols,
        pad_bottom=rows * patch_size - height,
        pad_right=cols * patch_size - width,
    )


def init_embed(patch_size: int, width: int, rng) -> EmbedParams:
    fan_in = 3 * patch_size * patch_size
    scale = 1.0 / np.sqrt(fan_in)
    proj = rng.uniform(-scale, scale, size=(fan_in, width)).astype(np.float32)
    bias = np.zeros(width, dtype=np.float32)
    return EmbedParams(projection=ad.param(proj), bias=ad.param(bias))


def sinusoid_codes(rows: int, cols: int, width: int,
                   dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sinusoidal position codes, one row per raster cell.

    Half of the channels encode the row index and half the column
    index, each as interleaved sin/cos over geometrically spaced
    frequencies.  Computed in float64 and cast, so the same grid always
    yields bitwise identical codes.
    """
    if width % 4 != 0:
        raise ConfigError(f"position code width {width} must be divisible by 4")
    half = width // 2
    quarter = half // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(quarter) / quarter)
    out = np.zeros((rows, cols, width), dtype=np.float64)
    r = np.arange(rows, dtype=np.float64)[:, None] * freqs[None, :]
    c = np.arange(cols, dtype=np.float64)[:, None] * freqs[None, :]
    out[:, :, 0:half:2] = np.sin(r)[:, None, :]
    out[:, :, 1:half:2] = np.cos(r)[:, None, :]
    out[:, :, half::2] = np.sin(c)[None, :, :]
    out[:, :, half + 1::2] = np.cos(c)[None, :, :]
    return out.reshape(rows * cols, width).astype(dtype)


def extract_patches(image: np.ndarray, patch_size: int):
    """Cut an image into flattened patch vectors (numpy only).

    Returns (matrix of shape (T, 3*Z*Z), grid).  Padding pixels are
    zeros.  Patch vectors are channel-major: all red pixels of the
    patch, then green, then blue, each block in row-major pixel order.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(
            f"expected a (3, H, W) image, got {image.shape}"
        )
    _, h, w = image.shape
    grid = plan_grid(h, w, patch_size)
    z = patch_size
    padded = np.zeros((3, grid.rows * z, grid.cols * z), dtype=image.dtype)
    padded[:, :h, :w] = image
    # (3, rows, Z, cols, Z) -> (rows, cols, 3, Z, Z) -> (T, 3*Z*Z)
    parts = padded.reshape(3, grid.rows, z, grid.cols, z)
    parts = parts.transpose(1, 3, 0, 2, 4)
    return parts.reshape(grid.token_count, 3 * z * z).copy(), grid


def tokenize(image: np.ndarray, params: EmbedParams, patch_size: int,
             add_positions: bool = True) -> TokenSequence:
    """Embed an image into a raster-order token sequence.

    The projection runs on the tape, so gradients reach the embedding
    parameters; the image itself is treated as a constant.
    """
    dtype = params.projection.data.dtype
    patches, grid = extract_patches(np.asarray(image, dtype=dtype), patch_size)
    if patches.shape[1] != params.projection.data.shape[0]:
        raise DimensionError(
            f"patch vectors of length {patches.shape[1]} do not match "
            f"projection input {params.projection.data.shape[0]}"
        )
    tokens = ad.matmul(ad.tensor(patches), params.projection)
    tokens = ad.add_row(tokens, params.bias)
    if add_positions:
        codes = sinusoid_codes(grid.rows, grid.cols,
                               params.projection.data.shape[1], dtype)
        tokens = ad.add(tokens, ad.tensor(codes))
    positions = [(k // grid.cols, k % grid.cols)
                 for k in range(grid.token_count)]
    return TokenSequence(tokens=tokens, grid=grid, positions=positions)


def regrid(seq: TokenSequence) -> ad.Tensor:
    """Reshape a raster-order token sequence back to (D, rows, cols)."""
    grid = seq.grid
    expected = [(k // grid.cols, k % grid.cols)
                for k in range(grid.token_count)]
    if seq.positions != expected:
        raise IntegrityError(
            "token positions are not a complete raster enumeration"
        )
    if seq.tokens.data.shape[0] != grid.token_count:
        raise IntegrityError(
            f"{seq.tokens.data.shape[0]} tokens for {grid.token_count} cells"
        )
    return ad.rows_to_grid(seq.tokens, grid.rows, grid.cols)
