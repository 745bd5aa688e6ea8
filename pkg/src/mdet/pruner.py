"""Background token pruning.

Water and sky dominate maritime frames, so most patch tokens carry no
object evidence.  A small classifier scores each token with a
foreground probability; the top K = round((1 - r) * T) tokens (round
half up) continue through the main backbone while the rest bypass it
untouched.  Supervision comes from patch labels: a patch is foreground
iff its cell rectangle overlaps any ground-truth box with nonzero
intersection area.

Class balance is handled by weighting the foreground term of the
binary cross entropy by w = M_back / (M_fore + 1e-6), recomputed per
batch.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    AnnotationError,
    CapacityError,
    ConfigError,
    EmptyBatchError,
    IntegrityError,
)
from .ssm import SsmStack, run_stack
from .tokenizer import PatchGrid

BCE_EPS = 1e-6


@dataclass
class PatchLabels:
    """Per-token foreground labels for one patch grid."""

    labels: np.ndarray  # (T,) uint8, 1 = overlaps some box
    foreground_count: int
    background_count: int

    @property
    def token_count(self) -> int:
        return self.labels.shape[0]


@dataclass
class PrunerParams:
    """Two-layer MLP that maps a token to a foreground probability."""

    w1: ad.Tensor  # (D, H)
    b1: ad.Tensor  # (H,)
    w2: ad.Tensor  # (H, 1)
    b2: ad.Tensor  # (1,)


@dataclass
class PruneDecision:
    """Which tokens continue into the main backbone.

    ``kept_indices`` and ``dropped_indices`` are ascending and
    partition range(len(scores)).
    """

    scores: np.ndarray
    kept_indices: np.ndarray
    dropped_indices: np.ndarray
    ratio: float


def generate_patch_labels(grid: PatchGrid, boxes) -> PatchLabels:
    """Label each patch cell by rectangle overlap with the boxes.

    ``boxes`` is an iterable of (x, y, w, h) in pixels.  A cell is
    foreground iff its intersection area with at least one box is
    strictly positive (equivalently, rectangle IoU is nonzero).
    """
    z = grid.patch_size
    t = grid.token_count
    labels = np.zeros(t, dtype=np.uint8)
    cols = np.arange(t) % grid.cols
    rows = np.arange(t) // grid.cols
    px0 = cols * z
    py0 = rows * z
    for x, y, w, h in boxes:
        if w <= 0 or h <= 0:
            raise AnnotationError(f"degenerate box (w={w}, h={h})")
        ix = np.minimum(px0 + z, x + w) - np.maximum(px0, x)
        iy = np.minimum(py0 + z, y + h) - np.maximum(py0, y)
        labels |= ((ix > 0) & (iy > 0)).astype(np.uint8)
    fg = int(labels.sum())
    return PatchLabels(labels=labels, foreground_count=fg,
                       background_count=t - fg)


def concat_labels(parts) -> PatchLabels:
    """Flatten per-image labels into one batch-level label vector."""
    parts = list(parts)
    if not parts:
        raise EmptyBatchError("no label sets to concatenate")
    labels = np.concatenate([p.labels for p in parts])
    fg = int(labels.sum())
    return PatchLabels(labels=labels, foreground_count=fg,
                       background_count=labels.shape[0] - fg)


def init_pruner(width: int, hidden: int, rng) -> PrunerParams:
    s1 = 1.0 / np.sqrt(width)
    s2 = 1.0 / np.sqrt(hidden)
    return PrunerParams(
        w1=ad.param(rng.uniform(-s1, s1, (width, hidden)).astype(np.float32)),
        b1=ad.param(np.zeros(hidden, dtype=np.float32)),
        w2=ad.param(rng.uniform(-s2, s2, (hidden, 1)).astype(np.float32)),
        b2=ad.param(np.zeros(1, dtype=np.float32)),
    )


def score_tokens(tokens: ad.Tensor, p: PrunerParams) -> ad.Tensor:
    """Foreground probability per token, shape (T,), values in (0, 1)."""
    h = ad.gelu(ad.add_row(ad.matmul(tokens, p.w1), p.b1))
    logits = ad.add_row(ad.matmul(h, p.w2), p.b2)
    return ad.sigmoid(ad.reshape(logits, (tokens.data.shape[0],)))


def weighted_bce(scores: ad.Tensor, labels: PatchLabels) -> ad.Tensor:
    """Counter-weighted binary cross entropy over one batch.

    The foreground log term is scaled by w = M_back / (M_fore + 1e-6)
    so that the (rare) foreground class is not drowned out.  The
    weight is recomputed from the labels of every batch.  With no
    background tokens w is 0 and a warning is emitted because nothing
    pulls scores down.
    """
    m = labels.token_count
    if m == 0:
        raise EmptyBatchError("weighted_bce over zero tokens")
    if scores.data.shape != (m,):
        raise IntegrityError(
            f"{scores.data.shape[0]} scores for {m} labels"
        )
    y = labels.labels.astype(scores.data.dtype)
    w = labels.background_count / (labels.foreground_count + BCE_EPS)
    if labels.background_count == 0:
        warnings.warn(
            "weighted_bce: no background tokens in batch, foreground "
            "weight is 0", RuntimeWarning)
    ones = ad.tensor(np.ones(m, dtype=scores.data.dtype))
    log_p = ad.log_clamped(scores)
    log_not_p = ad.log_clamped(ad.sub(ones, scores))
    fg = ad.mul(ad.tensor(w * y), log_p)
    bg = ad.mul(ad.tensor(1.0 - y), log_not_p)
    return ad.scale(ad.sum_all(ad.add(fg, bg)), -1.0 / m)


def keep_count(t: int, ratio: float) -> int:
    """K = round((1 - ratio) * T), rounding halves up."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"prune ratio {ratio} outside [0, 1)")
    k = int(np.floor((1.0 - ratio) * t + 0.5))
    if k < 1:
        raise CapacityError(
            f"ratio {ratio} keeps zero of {t} tokens"
        )
    return k


def select_topk(scores, ratio: float) -> PruneDecision:
    """Keep the K highest-scoring tokens; break ties by lower index."""
    arr = scores.data if isinstance(scores, ad.Tensor) else np.asarray(scores)
    if arr.ndim != 1:
        raise IntegrityError(f"scores must be a vector, got {arr.shape}")
    t = arr.shape[0]
    k = keep_count(t, ratio)
    # lexsort is stable: order by descending score, then ascending index.
    order = np.lexsort((np.arange(t), -arr))
    kept = np.sort(order[:k])
    dropped = np.sort(order[k:])
    return PruneDecision(scores=arr.copy(), kept_indices=kept,
                         dropped_indices=dropped, ratio=float(ratio))


def prune_and_run(tokens: ad.Tensor, decision: PruneDecision,
                  stack: SsmStack, kernel: str = "sequential") -> ad.Tensor:
    """Run the stack on kept tokens only; others pass through untouched.

    Kept tokens are gathered in ascending index order (their relative
    sequence order survives pruning), processed as a shorter sequence,
    and scattered back into their original slots.  Dropped rows of the
    output are bitwise equal to the corresponding input rows.
    """
    t = tokens.data.shape[0]
    if decision.scores.shape[0] != t:
        raise IntegrityError(
            f"decision for {decision.scores.shape[0]} tokens applied "
            f"to {t}"
        )
    merged = np.sort(np.concatenate(
        [decision.kept_indices, decision.dropped_indices]))
    if not np.array_equal(merged, np.arange(t)):
        raise IntegrityError("kept/dropped sets do not partition the tokens")
    kept = ad.gather_rows(tokens, decision.kept_indices)
    processed = run_stack(kept, stack, kernel=kernel)
    return ad.scatter_rows(tokens, decision.kept_indices, processed)


def dump_decision_csv(fh, grid: PatchGrid, decision: PruneDecision,
                      labels: PatchLabels | None = None) -> None:
    """One row per token: index, row, col, score, label, kept flag."""
    writer = csv.writer(fh)
    writer.writerow(["index", "row", "col", "score", "label", "kept"])
    kept = np.zeros(grid.token_count, dtype=bool)
    kept[decision.kept_indices] = True
    for i in range(grid.token_count):
        label = "" if labels is None else int(labels.labels[i])
        writer.writerow([
            i, i // grid.cols, i % grid.cols,
            repr(float(decision.scores[i])), label, int(kept[i]),
        ])
