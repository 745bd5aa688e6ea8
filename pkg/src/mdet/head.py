"""Set-prediction detection head with Hungarian matching.

A fixed set of learned queries cross-attends to the flattened pyramid
tokens through a small decoder; each query emits class logits over
C real classes plus a trailing "no object" slot, and a box in
normalized (cx, cy, w, h) coordinates.

Training treats detection as bipartite assignment: each ground-truth
object is matched to the query minimizing

    cost(i, q) = -p_q(c_i) + box_loss(b_i, b_q)

with box_loss = 5 * L1 + 2 * (1 - GIoU).  Matching minimizes the total
cost; ties resolve to the lexicographically smallest assignment
vector.  The loss then applies a negative log likelihood plus box
terms on matched pairs and a no-object log likelihood, weighted by
0.1, on the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .errors import (
    AnnotationError,
    CapacityError,
    DimensionError,
    IntegrityError,
    NumericError,
)
from .fpn import PyramidFeatures
from .tokenizer import sinusoid_codes

L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
NO_OBJECT_WEIGHT = 0.1


# ---------------------------------------------------------------------------
# box geometry


def boxes_px_to_norm(boxes_px, image_size) -> np.ndarray:
    """(x, y, w, h) pixels to normalized (cx, cy, w, h)."""
    h, w = image_size
    out = np.asarray(boxes_px, dtype=np.float64).reshape(-1, 4).copy()
    if np.any(out[:, 2] <= 0) or np.any(out[:, 3] <= 0):
        raise AnnotationError("boxes must have positive width and height")
    out[:, 0] = (out[:, 0] + out[:, 2] / 2) / w
    out[:, 1] = (out[:, 1] + out[:, 3] / 2) / h
    out[:, 2] = out[:, 2] / w
    out[:, 3] = out[:, 3] / h
    return out


def boxes_norm_to_px(boxes_norm, image_size) -> np.ndarray:
    """Normalized (cx, cy, w, h) to (x, y, w, h) pixels."""
    h, w = image_size
    out = np.asarray(boxes_norm, dtype=np.float64).reshape(-1, 4).copy()
    out[:, 0] = out[:, 0] * w
    out[:, 1] = out[:, 1] * h
    out[:, 2] = out[:, 2] * w
    out[:, 3] = out[:, 3] * h
    out[:, 0] -= out[:, 2] / 2
    out[:, 1] -= out[:, 3] / 2
    return out


def _col(x: ad.Tensor, j: int) -> ad.Tensor:
    n = x.data.shape[0]
    return ad.select_entries(x, np.arange(n), np.full(n, j))


def _corners(b: ad.Tensor):
    cx, cy = _col(b, 0), _col(b, 1)
    w, h = _col(b, 2), _col(b, 3)
    hw, hh = ad.scale(w, 0.5), ad.scale(h, 0.5)
    return (ad.sub(cx, hw), ad.sub(cy, hh),
            ad.add(cx, hw), ad.add(cy, hh), w, h)


def giou_rows(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Generalized IoU per row for (n, 4) cxcywh boxes.

    Requires positive widths and heights (the union is then positive).
    Equal boxes give 1; far-apart boxes approach -1.
    """
    if a.data.shape != b.data.shape or a.data.ndim != 2 \
            or a.data.shape[1] != 4:
        raise DimensionError(
            f"giou_rows needs matching (n, 4) boxes, got {a.data.shape} "
            f"and {b.data.shape}"
        )
    ax1, ay1, ax2, ay2, aw, ah = _corners(a)
    bx1, by1, bx2, by2, bw, bh = _corners(b)
    iw = ad.clamp_min(ad.sub(ad.minimum(ax2, bx2), ad.maximum(ax1, bx1)), 0.0)
    ih = ad.clamp_min(ad.sub(ad.minimum(ay2, by2), ad.maximum(ay1, by1)), 0.0)
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(ad.mul(aw, ah), ad.mul(bw, bh)), inter)
    iou = ad.div(inter, union)
    hw_ = ad.sub(ad.maximum(ax2, bx2), ad.minimum(ax1, bx1))
    hh_ = ad.sub(ad.maximum(ay2, by2), ad.minimum(ay1, by1))
    hull = ad.mul(hw_, hh_)
    return ad.sub(iou, ad.div(ad.sub(hull, union), hull))


def box_loss_rows(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """5 * L1 + 2 * (1 - GIoU) per row of two (n, 4) box sets."""
    l1 = ad.sum_rows(ad.abs_val(ad.sub(a, b)))
    ones = ad.tensor(np.ones(a.data.shape[0], dtype=a.data.dtype))
    return ad.add(ad.scale(l1, L1_WEIGHT),
                  ad.scale(ad.sub(ones, giou_rows(a, b)), GIOU_WEIGHT))


def giou(a, b) -> float:
    ta = ad.tensor(np.asarray(a, dtype=np.float64).reshape(1, 4))
    tb = ad.tensor(np.asarray(b, dtype=np.float64).reshape(1, 4))
    with ad.no_grad():
        return float(giou_rows(ta, tb).data[0])


def box_loss(a, b) -> float:
    ta = ad.tensor(np.asarray(a, dtype=np.float64).reshape(1, 4))
    tb = ad.tensor(np.asarray(b, dtype=np.float64).reshape(1, 4))
    with ad.no_grad():
        return float(box_loss_rows(ta, tb).data[0])


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    """Ground truth i is assigned to query assignment[i]."""

    assignment: tuple
    total_cost: float
    unmatched_queries: tuple


def match_cost(probs_q, box_q, gt_class: int, gt_box) -> float:
    """-p_q(c_i) + box_loss(b_i, b_q) for one (gt, query) pair."""
    probs_q = np.asarray(probs_q)
    if not 0 <= gt_class < probs_q.shape[0] - 1:
        raise AnnotationError(
            f"class id {gt_class} outside {probs_q.shape[0] - 1} real classes"
        )
    return float(-probs_q[gt_class] + box_loss(gt_box, box_q))


def _km_solve(cost: np.ndarray):
    """Potentials-based assignment for an (n, m) cost matrix, n <= m.

    Returns the column chosen for each row.  Deterministic: scanning
    order breaks equal reduced costs toward lower column indices.
    """
    n, m = cost.shape
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign


def _assignment_total(cost, assign) -> float:
    total = 0.0
    for i, q in enumerate(assign):
        total += float(cost[i, q])
    return total


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost row-to-column assignment.

    Among cost-minimal assignments (up to a relative tolerance of
    1e-9, which absorbs float reassociation), the lexicographically
    smallest assignment vector is returned, so exact ties resolve
    deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost must be a matrix, got {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"{n} targets exceed {m} query slots")
    if not np.all(np.isfinite(cost)):
        raise NumericError("hungarian_match: non-finite cost entries")
    if n == 0:
        return MatchResult(assignment=(), total_cost=0.0,
                           unmatched_queries=tuple(range(m)))

    best_total = _assignment_total(cost, _km_solve(cost))
    tol = 1e-9 * (1.0 + abs(best_total))

    # Fix rows left to right, always taking the smallest column that
    # still admits an optimal completion.
    chosen = []
    free_cols = list(range(m))
    for i in range(n):
        prefix = sum(float(cost[k, chosen[k]]) for k in range(i))
        rows_left = n - i - 1
        committed = None
        for q in free_cols:
            value = prefix + float(cost[i, q])
            if rows_left:
                rest_cols = [c for c in free_cols if c != q]
                sub = cost[np.ix_(range(i + 1, n), rest_cols)]
                comp = _km_solve(sub)
                value += sum(
                    float(sub[r, c]) for r, c in enumerate(comp))
            if value <= best_total + tol:
                committed = q
                break
        if committed is None:  # numeric safety net; take the KM answer
            committed = free_cols[0]
        chosen.append(committed)
        free_cols.remove(committed)

    return MatchResult(
        assignment=tuple(chosen),
        total_cost=_assignment_total(cost, chosen),
        unmatched_queries=tuple(sorted(free_cols)),
    )


def brute_force_match(cost) -> MatchResult:
    """Exhaustive reference matcher (test oracle; factorial cost).

    Enumerates ordered column choices in lexicographic order and keeps
    the first minimum, which is exactly the tie-break contract of
    :func:`hungarian_match`.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"{n} targets exceed {m} query slots")
    if n == 0:
        return MatchResult((), 0.0, tuple(range(m)))
    best = None
    best_total = np.inf
    for perm in permutations(range(m), n):
        total = _assignment_total(cost, perm)
        if total < best_total:
            best_total = total
            best = perm
    unmatched = tuple(sorted(set(range(m)) - set(best)))
    return MatchResult(tuple(best), best_total, unmatched)


# ---------------------------------------------------------------------------
# head parameters and decoding


@dataclass
class DecoderLayerParams:
    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor
    wo: ad.Tensor
    n1_scale: ad.Tensor
    n1_shift: ad.Tensor
    n2_scale: ad.Tensor
    n2_shift: ad.Tensor
    ffn_w1: ad.Tensor
    ffn_b1: ad.Tensor
    ffn_w2: ad.Tensor
    ffn_b2: ad.Tensor


@dataclass
class HeadParams:
    queries: ad.Tensor      # (M_q, D)
    level_embed: ad.Tensor  # (L, D)
    layers: list = field(default_factory=list)
    class_w: ad.Tensor = None  # (D, C + 1)
    class_b: ad.Tensor = None
    box_w1: ad.Tensor = None
    box_b1: ad.Tensor = None
    box_w2: ad.Tensor = None
    box_b2: ad.Tensor = None
    box_w3: ad.Tensor = None   # (D, 4)
    box_b3: ad.Tensor = None
    num_classes: int = 3


@dataclass
class DetectionSet:
    """Raw head outputs for one image: one row per query."""

    class_logits: ad.Tensor  # (M_q, C + 1), last column = no object
    boxes: ad.Tensor         # (M_q, 4) normalized cxcywh

    @property
    def query_count(self) -> int:
        return self.class_logits.data.shape[0]

    def probabilities(self) -> np.ndarray:
        with ad.no_grad():
            return ad.softmax_rows(self.class_logits.detach()).data


def init_head(width: int, num_classes: int, num_queries: int,
              num_levels: int, rng, num_layers: int = 2,
              ffn_mult: int = 2) -> HeadParams:
    s = 1.0 / np.sqrt(width)

    def mat(rows, cols, scl=s):
        return ad.param(rng.uniform(-scl, scl, (rows, cols))
                        .astype(np.float32))

    layers = []
    for _ in range(num_layers):
        dff = width * ffn_mult
        layers.append(DecoderLayerParams(
            wq=mat(width, width), wk=mat(width, width),
            wv=mat(width, width), wo=mat(width, width),
            n1_scale=ad.param(np.ones(width, dtype=np.float32)),
            n1_shift=ad.param(np.zeros(width, dtype=np.float32)),
            n2_scale=ad.param(np.ones(width, dtype=np.float32)),
            n2_shift=ad.param(np.zeros(width, dtype=np.float32)),
            ffn_w1=mat(width, dff),
            ffn_b1=ad.param(np.zeros(dff, dtype=np.float32)),
            ffn_w2=mat(dff, width, 1.0 / np.sqrt(dff)),
            ffn_b2=ad.param(np.zeros(width, dtype=np.float32)),
        ))
    class_b = np.zeros(num_classes + 1, dtype=np.float32)
    class_b[-1] = 2.0  # start with confident "no object" everywhere
    return HeadParams(
        queries=mat(num_queries, width),
        level_embed=mat(num_levels, width),
        layers=layers,
        class_w=mat(width, num_classes + 1),
        class_b=ad.param(class_b),
        box_w1=mat(width, width),
        box_b1=ad.param(np.zeros(width, dtype=np.float32)),
        box_w2=mat(width, width),
        box_b2=ad.param(np.zeros(width, dtype=np.float32)),
        box_w3=mat(width, 4),
        box_b3=ad.param(np.zeros(4, dtype=np.float32)),
        num_classes=num_classes,
    )


def _flatten_pyramid(pyramid: PyramidFeatures, p: HeadParams) -> ad.Tensor:
    if len(pyramid.levels) != p.level_embed.data.shape[0]:
        raise IntegrityError(
            f"{len(pyramid.levels)} pyramid levels for "
            f"{p.level_embed.data.shape[0]} level embeddings"
        )
    dtype = p.level_embed.data.dtype
    parts = []
    for idx, (lvl, (r, c)) in enumerate(zip(pyramid.levels, pyramid.shapes)):
        rows = ad.grid_to_rows(lvl)
        width = rows.data.shape[1]
        rows = ad.add(rows, ad.tensor(sinusoid_codes(r, c, width, dtype)))
        rows = ad.add_row(rows, ad.take_row(p.level_embed, idx))
        parts.append(rows)
    return ad.concat_rows(parts)


def _norm(x, scale_t, shift_t):
    return ad.add_row(ad.mul_row(ad.layernorm_rows(x), scale_t), shift_t)


def decode(pyramid: PyramidFeatures, p: HeadParams) -> DetectionSet:
    """Run the query decoder over pyramid tokens.

    Cross-attention is permutation invariant in the token axis (up to
    float reassociation): token order only enters through the position
    codes attached to each token.
    """
    keys = _flatten_pyramid(pyramid, p)
    width = keys.data.shape[1]
    x = p.queries
    inv_sqrt_d = 1.0 / np.sqrt(width)
    for layer in p.layers:
        qn = _norm(x, layer.n1_scale, layer.n1_shift)
        q = ad.matmul(qn, layer.wq)
        k = ad.matmul(keys, layer.wk)
        v = ad.matmul(keys, layer.wv)
        scores = ad.scale(ad.matmul(q, ad.transpose2d(k)), inv_sqrt_d)
        attn = ad.softmax_rows(scores)
        x = ad.add(x, ad.matmul(ad.matmul(attn, v), layer.wo))
        xn = _norm(x, layer.n2_scale, layer.n2_shift)
        f = ad.gelu(ad.add_row(ad.matmul(xn, layer.ffn_w1), layer.ffn_b1))
        f = ad.add_row(ad.matmul(f, layer.ffn_w2), layer.ffn_b2)
        x = ad.add(x, f)
    logits = ad.add_row(ad.matmul(x, p.class_w), p.class_b)
    b = ad.gelu(ad.add_row(ad.matmul(x, p.box_w1), p.box_b1))
    b = ad.gelu(ad.add_row(ad.matmul(b, p.box_w2), p.box_b2))
    boxes = ad.sigmoid(ad.add_row(ad.matmul(b, p.box_w3), p.box_b3))
    return DetectionSet(class_logits=logits, boxes=boxes)


# ---------------------------------------------------------------------------
# loss


def match_cost_matrix(det: DetectionSet, gt_classes, gt_boxes) -> np.ndarray:
    """(N, M_q) matching costs, evaluated without building a tape."""
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = gt_classes.shape[0]
    m = det.query_count
    if np.any(gt_classes < 0) or np.any(gt_classes >= det.class_logits.data.shape[1] - 1):
        raise AnnotationError("ground-truth class id outside real classes")
    with ad.no_grad():
        probs = det.probabilities()
        pred = det.boxes.data.astype(np.float64)
        a_rep = ad.tensor(np.repeat(gt_boxes, m, axis=0))
        b_rep = ad.tensor(np.tile(pred, (n, 1)))
        pair_box = box_loss_rows(a_rep, b_rep).data.reshape(n, m)
    return -probs[:, gt_classes].T + pair_box


def hungarian_loss(det: DetectionSet, gt_classes, gt_boxes,
                   no_object_weight: float = NO_OBJECT_WEIGHT):
    """Set-prediction loss for one image.

    Returns (scalar loss Tensor, MatchResult).  Matched queries pay a
    class negative log likelihood plus the box loss; unmatched queries
    pay the no-object negative log likelihood scaled by
    ``no_object_weight``.  With zero ground truths only the no-object
    term remains.  Matching itself is not differentiated through.
    """
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_classes.shape[0] != gt_boxes.shape[0]:
        raise IntegrityError(
            f"{gt_classes.shape[0]} classes for {gt_boxes.shape[0]} boxes"
        )
    m = det.query_count
    no_obj_col = det.class_logits.data.shape[1] - 1
    dtype = det.class_logits.data.dtype

    if gt_classes.shape[0] == 0:
        match = MatchResult((), 0.0, tuple(range(m)))
    else:
        match = hungarian_match(match_cost_matrix(det, gt_classes, gt_boxes))

    probs = ad.softmax_rows(det.class_logits)
    terms = []
    if match.assignment:
        sigma = np.asarray(match.assignment, dtype=np.intp)
        nll = ad.neg(ad.sum_all(ad.log_clamped(
            ad.select_entries(probs, sigma, gt_classes))))
        matched_boxes = ad.gather_rows(det.boxes, sigma)
        box = ad.sum_all(box_loss_rows(
            ad.tensor(gt_boxes.astype(dtype)), matched_boxes))
        terms.extend([nll, box])
    if match.unmatched_queries:
        rows = np.asarray(match.unmatched_queries, dtype=np.intp)
        noobj = ad.neg(ad.sum_all(ad.log_clamped(ad.select_entries(
            probs, rows, np.full(rows.shape[0], no_obj_col)))))
        terms.append(ad.scale(noobj, no_object_weight))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, match


# ---------------------------------------------------------------------------
# prediction records


def detection_records(det: DetectionSet, image_id: int, image_size,
                      score_threshold: float = 0.0) -> list:
    """Scored detections as plain dicts (COCO-style pixel boxes).

    The score of a query is its highest real-class probability; the
    no-object column only suppresses scores through the softmax.
    """
    probs = det.probabilities()
    real = probs[:, :-1]
    classes = real.argmax(axis=1)
    scores = real[np.arange(real.shape[0]), classes]
    boxes_px = boxes_norm_to_px(det.boxes.data, image_size)
    out = []
    for q in range(det.query_count):
        if scores[q] < score_threshold:
            continue
        out.append({
            "image_id": int(image_id),
            "category_id": int(classes[q]),
            "score": float(scores[q]),
            "bbox": [float(v) for v in boxes_px[q]],
        })
    return out


def dump_detections_jsonl(fh, records) -> None:
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_detections_jsonl(fh) -> list:
    out = []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IntegrityError(
                f"detections line {lineno}: {exc}") from exc
        out.append(rec)
    return out
