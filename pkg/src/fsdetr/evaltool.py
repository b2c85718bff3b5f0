"""Episodic k-shot evaluation: detection readout, AP computation, reporting.

Detections pool across episodes per real class id, then average precision is
computed per class at IoU thresholds 0.50:0.95 (step 0.05) with all-point
interpolation; a class's pool covers every episode that presented it, so
false positives on absent classes count against it. Classes that never had
ground truth in the evaluated episodes are excluded from aggregates.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .matching import cxcywh_to_xyxy, iou_matrix
from .prompts import assign_pseudo_classes
from .synthworld import sample_episode

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


@dataclass
class EvalReport:
    protocol: str
    k: int
    m: int
    episodes: int
    iou_thresholds: tuple = IOU_THRESHOLDS
    per_class: dict = field(default_factory=dict)   # id -> {"ap50","ap75","ap"}
    novel: dict = field(default_factory=dict)
    base: dict = field(default_factory=dict)
    all_classes: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "iou_thresholds": [float(t) for t in self.iou_thresholds],
            "k": self.k,
            "m": self.m,
            "episodes": self.episodes,
            "flags": self.flags,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "novel": self.novel,
            "base": self.base,
            "all": self.all_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def score_detections(dets, threshold: float = 0.0) -> list:
    """Readout: per query, score = max non-null probability, class = argmax.

    Queries whose overall argmax is the no-object column, or whose score
    falls below `threshold`, are dropped. Returns (class index, cxcywh box,
    score) in query order.
    """
    probs = dets.probs.data
    boxes = dets.boxes.data
    null_col = probs.shape[1] - 1
    out = []
    for i in range(probs.shape[0]):
        cls = int(probs[i].argmax())
        score = float(probs[i, :null_col].max())
        if cls == null_col or score < threshold:
            continue
        out.append((cls, boxes[i].astype(np.float64).copy(), score))
    return out


def average_precision(detections, ground_truth, iou_threshold: float) -> float:
    """All-point-interpolated AP for one class.

    `detections`: list of (image_id, xyxy box, score), any order; ties in
    score break by insertion order. `ground_truth`: dict image_id -> (T,4)
    xyxy array. Returns NaN when there is no ground truth at all.
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        return float("nan")
    if not detections:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in ground_truth.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, box, _score = detections[i]
        gts = ground_truth.get(img)
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix(np.asarray(box)[None], np.asarray(gts))[0]
        ious = np.where(used[img], -1.0, ious)
        j = int(ious.argmax())
        if ious[j] >= iou_threshold:
            tp[rank] = 1.0
            used[img][j] = True
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / (np.arange(len(order)) + 1.0)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _summarize(ap_by_thr: dict) -> dict:
    return {
        "ap50": ap_by_thr[0.5],
        "ap75": ap_by_thr[0.75],
        "ap": float(np.mean([ap_by_thr[t] for t in IOU_THRESHOLDS])),
    }


def _aggregate(per_class: dict, ids) -> dict:
    rows = [per_class[c] for c in sorted(ids) if c in per_class]
    if not rows:
        return {"ap50": float("nan"), "ap75": float("nan"), "ap": float("nan"), "classes": 0}
    agg = {key: float(np.mean([r[key] for r in rows])) for key in ("ap50", "ap75", "ap")}
    agg["classes"] = len(rows)
    return agg


def evaluate(detector, dataset, k: int, m: int, n_episodes: int, seed: int,
             novel_ids=(), base_ids=(), include_absent: bool = True,
             threshold: float = 0.0, flags: dict | None = None) -> EvalReport:
    """Run a deterministic episode stream and report per-class / grouped AP."""
    detections: dict = {}
    ground_truth: dict = {}
    for ep_idx in range(n_episodes):
        r = rngmod.stream(seed, "eval", ep_idx)
        episode = sample_episode(dataset, m=m, k=k, rng=r, include_absent=include_absent,
                                 patch_size=detector.cfg.patch_size)
        assignment = assign_pseudo_classes(episode.m, detector.bank, r)
        prompt_set = detector.encode_prompts(episode.templates, assignment, training=False)
        dets = detector.forward(episode.scene.image, prompt_set, training=False)
        for ci, box, score in score_detections(dets, threshold):
            real = episode.class_ids[ci]
            detections.setdefault(real, []).append((ep_idx, cxcywh_to_xyxy(box), score))
            ground_truth.setdefault(real, {}).setdefault(ep_idx, [])
        for ci, gt_box in episode.targets:
            real = episode.class_ids[ci]
            ground_truth.setdefault(real, {}).setdefault(ep_idx, []).append(cxcywh_to_xyxy(gt_box.to_array()))

    per_class = {}
    for c in sorted(ground_truth):
        gt = {img: np.array(boxes).reshape(-1, 4) for img, boxes in ground_truth[c].items()}
        if sum(len(v) for v in gt.values()) == 0:
            continue
        dets_c = detections.get(c, [])
        ap_by_thr = {t: average_precision(dets_c, gt, t) for t in IOU_THRESHOLDS}
        per_class[c] = _summarize(ap_by_thr)

    novel_set, base_set = set(novel_ids), set(base_ids)
    report = EvalReport(protocol="episodic-gfsod-allpoint", k=k, m=m, episodes=n_episodes,
                        per_class=per_class, flags=dict(flags or {}))
    report.novel = _aggregate(per_class, novel_set)
    report.base = _aggregate(per_class, base_set)
    report.all_classes = _aggregate(per_class, set(per_class))
    return report
