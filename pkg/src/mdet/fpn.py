"""Downsample-only feature pyramid built from state-space blocks.

Each level halves the spatial grid with a stride-2 depthwise 3x3
convolution, mixes channels with a pointwise projection, then runs one
bidirectional state-space block over the level's raster token
sequence.  There is no top-down upsampling path: cross-scale context
travels through the scans, which keeps the pyramid linear in token
count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .ssm import BidirectionalBlockParams, bidirectional_block, init_block


@dataclass
class FpnLevelParams:
    dw_kernel: ad.Tensor  # (D, 3, 3) depthwise stride-2 filter
    pw: ad.Tensor         # (D, D) pointwise channel mix
    pw_bias: ad.Tensor    # (D,)
    block: BidirectionalBlockParams


@dataclass
class FpnParams:
    levels: list = field(default_factory=list)


@dataclass
class PyramidFeatures:
    """Feature grids from finest to coarsest, one per pyramid level."""

    levels: list  # of (D, r_l, c_l) Tensors
    shapes: list  # of (r_l, c_l)


def init_fpn(width: int, state: int, rng, levels: int = 3) -> FpnParams:
    if levels < 1:
        raise ConfigError(f"need at least one pyramid level, got {levels}")
    out = []
    for _ in range(levels):
        # Mean-preserving start for the spatial filter plus noise.
        dw = (np.full((width, 3, 3), 1.0 / 9.0)
              + rng.uniform(-0.05, 0.05, (width, 3, 3)))
        s = 1.0 / np.sqrt(width)
        out.append(FpnLevelParams(
            dw_kernel=ad.param(dw.astype(np.float32)),
            pw=ad.param(rng.uniform(-s, s, (width, width)).astype(np.float32)),
            pw_bias=ad.param(np.zeros(width, dtype=np.float32)),
            block=init_block(width, state, rng, selective=True),
        ))
    return FpnParams(levels=out)


def run_fpn(grid_feat: ad.Tensor, p: FpnParams,
            kernel: str = "sequential") -> PyramidFeatures:
    """Build the pyramid from a (D, rows, cols) backbone feature grid."""
    if grid_feat.data.ndim != 3:
        raise DimensionError(
            f"expected (D, rows, cols) features, got {grid_feat.data.shape}"
        )
    x = grid_feat
    levels = []
    shapes = []
    for lvl in p.levels:
        x = ad.depthwise_conv2d(x, lvl.dw_kernel, stride=2, padding=1)
        _, r, c = x.data.shape
        rows = ad.grid_to_rows(x)
        rows = ad.add_row(ad.matmul(rows, lvl.pw), lvl.pw_bias)
        rows = bidirectional_block(rows, lvl.block, kernel=kernel)
        x = ad.rows_to_grid(rows, r, c)
        levels.append(x)
        shapes.append((r, c))
    return PyramidFeatures(levels=levels, shapes=shapes)
