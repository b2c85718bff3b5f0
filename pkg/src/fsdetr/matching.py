"""Box geometry, optimal bipartite assignment, and the detection set loss.

Boxes travel as normalized (cx, cy, w, h) in [0,1] and are converted to
corner form for overlap computations. The set loss matches predictions to
targets with a Hungarian assignment on a detached cost matrix, then scores
class / L1 / generalized-overlap terms differentiably through the
predictions (the discrete assignment is held fixed, the usual
straight-through treatment).
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ndgrad
from .errors import DimensionError, InvalidBoxError
from .ndgrad import Tensor


@dataclass
class Box:
    """Normalized center-size box."""
    cx: float
    cy: float
    w: float
    h: float

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def validate(self):
        if self.w < 0 or self.h < 0:
            raise InvalidBoxError(f"negative box size: w={self.w}, h={self.h}")
        return self


def cxcywh_to_xyxy(box):
    """(cx,cy,w,h) -> (x1,y1,x2,y2); accepts a Box or an (...,4) array."""
    if isinstance(box, Box):
        b = box.validate().to_array()
    else:
        b = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _areas_inter_union(a, b):
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter, area_a + area_b - inter


def iou(a, b):
    """Plain intersection over union of corner boxes (elementwise)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter, union = _areas_inter_union(a, b)
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou(a, b):
    """Generalized IoU of corner boxes: IoU - |C \\ (A u B)| / |C|.

    Defined for disjoint boxes (down to -1); identical boxes give exactly 1.
    A zero-area enclosing box means both boxes are the same degenerate point
    (-> 1 when a == b) or degenerate mismatch (-> 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter, union = _areas_inter_union(a, b)
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    iou_val = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    # clip guards the giou <= iou invariant against rounding in `union`
    penalty = np.clip(enclose - union, 0.0, None) / np.where(enclose > 0, enclose, 1.0)
    out = np.where(enclose > 0, iou_val - penalty, np.where(np.all(a == b, axis=-1), 1.0, 0.0))
    return out if out.ndim else float(out)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU of corner boxes: (n,4) x (m,4) -> (n,m)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    inter, union = _areas_inter_union(a, b)
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_matrix(a, b) -> np.ndarray:
    """Pairwise GIoU of corner boxes: (n,4) x (m,4) -> (n,m)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    return giou(np.broadcast_to(a, a.shape[:1] + b.shape[1:2] + (4,)),
                np.broadcast_to(b, a.shape[:1] + b.shape[1:2] + (4,)))


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n,m) pairs for a rectangular matrix.

    Exact solve (scipy's Jonker-Volgenant variant); the surplus side of a
    rectangular matrix stays unmatched.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-d, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(c)
    return list(zip(rows.tolist(), cols.tolist()))


def match_cost(probs: np.ndarray, boxes: np.ndarray, target_classes, target_boxes,
               lam_cls: float = 1.0, lam_l1: float = 5.0, lam_giou: float = 2.0) -> np.ndarray:
    """Prediction-to-target matching cost, N x T.

    C[i][j] = -lam_cls * p_i(c_j) + lam_l1 * ||b_i - b_j||_1
              + lam_giou * (1 - GIoU(b_i, b_j)).
    Uses raw probabilities (not log) for the class term.
    """
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    tc = np.asarray(target_classes, dtype=np.intp)
    tb = np.asarray(target_boxes, dtype=np.float64)
    n = probs.shape[0]
    t = tc.shape[0]
    if t > n:
        raise DimensionError(f"{t} targets exceed {n} predictions (need N >= #targets)")
    if t == 0:
        return np.zeros((n, 0))
    cls_term = -probs[:, tc]
    l1_term = np.abs(boxes[:, None, :] - tb[None, :, :]).sum(axis=-1)
    giou_term = 1.0 - giou_matrix(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(tb))
    return lam_cls * cls_term + lam_l1 * l1_term + lam_giou * giou_term


def _box_columns(b: Tensor):
    cx = ndgrad.take_cols(b, [0])
    cy = ndgrad.take_cols(b, [1])
    w = ndgrad.take_cols(b, [2])
    h = ndgrad.take_cols(b, [3])
    hw = ndgrad.scale(w, 0.5)
    hh = ndgrad.scale(h, 0.5)
    return (ndgrad.sub(cx, hw), ndgrad.sub(cy, hh),
            ndgrad.add(cx, hw), ndgrad.add(cy, hh))


def giou_pairs_grad(pred_boxes: Tensor, target_xyxy: np.ndarray) -> Tensor:
    """Differentiable per-pair GIoU of predicted cxcywh boxes vs fixed targets.

    Requires positive-area targets (true for all dataset ground truth); the
    enclosing box then has positive area, so no degenerate branches exist on
    the gradient path.
    """
    t = np.asarray(target_xyxy, dtype=np.float64)
    px1, py1, px2, py2 = _box_columns(pred_boxes)
    tx1, ty1, tx2, ty2 = (Tensor(t[:, i:i + 1]) for i in range(4))
    iw = ndgrad.relu(ndgrad.sub(ndgrad.minimum(px2, tx2), ndgrad.maximum(px1, tx1)))
    ih = ndgrad.relu(ndgrad.sub(ndgrad.minimum(py2, ty2), ndgrad.maximum(py1, ty1)))
    inter = ndgrad.mul(iw, ih)
    pa = ndgrad.mul(ndgrad.sub(px2, px1), ndgrad.sub(py2, py1))
    ta = Tensor((t[:, 2] - t[:, 0])[:, None] * (t[:, 3] - t[:, 1])[:, None])
    union = ndgrad.sub(ndgrad.add(pa, ta), inter)
    ew = ndgrad.sub(ndgrad.maximum(px2, tx2), ndgrad.minimum(px1, tx1))
    eh = ndgrad.sub(ndgrad.maximum(py2, ty2), ndgrad.minimum(py1, ty1))
    enclose = ndgrad.mul(ew, eh)
    g = ndgrad.sub(ndgrad.div(inter, union), ndgrad.div(ndgrad.sub(enclose, union), enclose))
    return ndgrad.reshape(g, (t.shape[0],))


def set_loss(preds, targets, lam_cls: float = 1.0, lam_l1: float = 5.0,
             lam_giou: float = 2.0, noobj_weight: float = 0.1,
             assignment: list[tuple[int, int]] | None = None,
             return_terms: bool = False):
    """Hungarian-matched set loss over one image's N predictions.

    `preds` needs `.logits` (Tensor, N x (m+1); column m is the no-object
    class), `.probs` and `.boxes` (Tensor, N x 4 cxcywh). `targets` is a
    sequence of (class index, cxcywh box array) pairs. Classification runs
    over all N rows with unmatched rows pushed to the no-object class
    (down-weighted by `noobj_weight`); the L1 and (1 - GIoU) terms cover
    matched pairs only and are normalized by the number of targets.
    """
    logits = preds.logits
    n, n_cls = logits.shape
    m = n_cls - 1
    t = len(targets)
    tgt_classes = np.array([c for c, _ in targets], dtype=np.intp)
    tgt_boxes = np.array([np.asarray(b, dtype=np.float64) for _, b in targets]).reshape(t, 4)
    if t > 0 and (tgt_classes.min() < 0 or tgt_classes.max() >= m):
        raise IndexError(f"target class outside [0, {m})")

    if assignment is None and t > 0:
        cost = match_cost(preds.probs.data, preds.boxes.data, tgt_classes, tgt_boxes,
                          lam_cls=lam_cls, lam_l1=lam_l1, lam_giou=lam_giou)
        assignment = hungarian(cost)
    assignment = assignment or []

    ce_targets = np.full(n, m, dtype=np.intp)
    for pi, tj in assignment:
        ce_targets[pi] = tgt_classes[tj]
    weights = np.ones(n_cls)
    weights[m] = noobj_weight
    ce = ndgrad.cross_entropy_logits(logits, ce_targets, class_weights=weights)

    terms = {"ce": float(ce.data), "l1": 0.0, "giou": 0.0, "matched": len(assignment)}
    total = ndgrad.scale(ce, lam_cls)
    if t > 0:
        pred_idx = np.array([pi for pi, _ in assignment], dtype=np.intp)
        tgt_idx = np.array([tj for _, tj in assignment], dtype=np.intp)
        pb = ndgrad.take_rows(preds.boxes, pred_idx)
        tb = tgt_boxes[tgt_idx]
        l1 = ndgrad.tsum(ndgrad.absolute(ndgrad.sub(pb, Tensor(tb))))
        g = giou_pairs_grad(pb, cxcywh_to_xyxy(tb))
        giou_loss = ndgrad.tsum(ndgrad.sub(Tensor(np.ones(len(assignment))), g))
        terms["l1"] = float(l1.data) / t
        terms["giou"] = float(giou_loss.data) / t
        total = ndgrad.add(total, ndgrad.scale(l1, lam_l1 / t))
        total = ndgrad.add(total, ndgrad.scale(giou_loss, lam_giou / t))
    terms["total"] = float(total.data)
    if return_terms:
        return total, terms
    return total
