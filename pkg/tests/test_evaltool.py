"""Evaluation: detection readout, average precision, report aggregation.

The 3-detection/2-gt AP fixture is checked against a brute-force
integration oracle (fine recall grid over the interpolated precision
envelope) as well as the hand-derived closed form 5/6.
"""

import numpy as np
import pytest

from fsdetr import evaltool, rng as rngmod, synthworld
from fsdetr.evaltool import EvalReport, average_precision, evaluate, score_detections
from fsdetr.model import FSDetr, ModelConfig
from fsdetr.ndgrad import Tensor


class FakeDets:
    def __init__(self, probs, boxes):
        self.probs = Tensor(np.asarray(probs, dtype=np.float64))
        self.boxes = Tensor(np.asarray(boxes, dtype=np.float64))


class TestScoreDetections:
    def test_all_null_gives_empty(self):
        probs = np.tile([0.1, 0.2, 0.7], (4, 1))
        dets = FakeDets(probs, np.tile([0.5, 0.5, 0.2, 0.2], (4, 1)))
        assert score_detections(dets, 0.0) == []

    def test_threshold_zero_keeps_all_non_null(self):
        probs = np.tile([0.5, 0.3, 0.2], (6, 1))
        dets = FakeDets(probs, np.tile([0.5, 0.5, 0.2, 0.2], (6, 1)))
        assert len(score_detections(dets, 0.0)) == 6

    def test_hand_filtered_fixture(self):
        probs = np.array([
            [0.70, 0.20, 0.10],   # class 0, score 0.70 -> kept
            [0.15, 0.60, 0.25],   # class 1, score 0.60 -> kept
            [0.30, 0.20, 0.50],   # argmax null -> dropped
            [0.45, 0.10, 0.45],   # class 0, score 0.45 -> dropped at 0.5
        ])
        boxes = np.tile([0.4, 0.4, 0.2, 0.2], (4, 1))
        kept = score_detections(FakeDets(probs, boxes), 0.5)
        assert [(c, round(s, 2)) for c, _, s in kept] == [(0, 0.70), (1, 0.60)]


def brute_force_ap(detections, ground_truth, iou_threshold, grid=200001):
    """Integrate the interpolated precision envelope on a fine recall grid."""
    n_gt = sum(len(v) for v in ground_truth.values())
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    used = {img: np.zeros(len(b), bool) for img, b in ground_truth.items()}
    points = []
    tp = 0
    from fsdetr.matching import iou_matrix
    for rank, i in enumerate(order):
        img, box, _ = detections[i]
        gts = ground_truth.get(img)
        hit = False
        if gts is not None and len(gts):
            ious = iou_matrix(np.asarray(box)[None], np.asarray(gts))[0]
            ious = np.where(used[img], -1.0, ious)
            j = int(ious.argmax())
            if ious[j] >= iou_threshold:
                used[img][j] = True
                hit = True
        tp += hit
        points.append((tp / n_gt, tp / (rank + 1)))
    rs = np.linspace(0, 1, grid)
    ps = np.zeros(grid)
    for r, p in points:
        ps[rs <= r] = np.maximum(ps[rs <= r], p)
    return float(np.trapezoid(ps, rs))


BOX = np.array([0.0, 0.0, 0.1, 0.1])
FAR = np.array([0.5, 0.5, 0.6, 0.6])


class TestAveragePrecision:
    def test_perfect_detections(self):
        gt = {0: np.array([BOX]), 1: np.array([FAR])}
        dets = [(0, BOX, 0.3), (1, FAR, 0.9)]
        assert average_precision(dets, gt, 0.5) == 1.0

    def test_no_detections(self):
        assert average_precision([], {0: np.array([BOX])}, 0.5) == 0.0

    def test_no_ground_truth_is_nan(self):
        assert np.isnan(average_precision([(0, BOX, 0.5)], {}, 0.5))

    def test_tp_fp_tp_fixture_is_five_sixths(self):
        gt = {0: np.array([BOX, FAR])}
        dets = [(0, BOX, 0.9), (0, np.array([0.3, 0.3, 0.35, 0.35]), 0.8), (0, FAR, 0.7)]
        ap = average_precision(dets, gt, 0.5)
        assert abs(ap - 5.0 / 6.0) < 1e-12
        assert abs(ap - brute_force_ap(dets, gt, 0.5)) < 1e-3

    def test_matches_brute_force_on_random_pools(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n_img = int(rng.integers(1, 4))
            gt = {}
            for img in range(n_img):
                k = int(rng.integers(0, 4))
                x = rng.uniform(0, 0.7, (k, 2))
                gt[img] = np.concatenate([x, x + rng.uniform(0.05, 0.3, (k, 2))], axis=1)
            if sum(len(v) for v in gt.values()) == 0:
                continue
            dets = []
            for _ in range(int(rng.integers(1, 12))):
                img = int(rng.integers(0, n_img))
                if len(gt[img]) and rng.random() < 0.6:
                    base = gt[img][rng.integers(len(gt[img]))]
                    box = base + rng.uniform(-0.03, 0.03, 4)
                else:
                    x = rng.uniform(0, 0.7, 2)
                    box = np.concatenate([x, x + rng.uniform(0.05, 0.3, 2)])
                dets.append((img, box, float(rng.random())))
            for thr in (0.5, 0.75):
                ap = average_precision(dets, gt, thr)
                assert abs(ap - brute_force_ap(dets, gt, thr)) < 2e-3

    def test_adding_perfect_detection_never_decreases_ap(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            gt = {0: np.array([BOX, FAR, np.array([0.8, 0.1, 0.9, 0.3])])}
            dets = []
            for _ in range(int(rng.integers(1, 8))):
                x = rng.uniform(0, 0.6, 2)
                dets.append((0, np.concatenate([x, x + rng.uniform(0.05, 0.3, 2)]), float(rng.random())))
            before = average_precision(dets, gt, 0.5)
            # a fresh gt box detected exactly, ranked above everything
            extra = dets + [(0, np.array([0.8, 0.1, 0.9, 0.3]), 2.0)]
            after = average_precision(extra, gt, 0.5)
            assert after >= before - 1e-12

    def test_ap50_at_least_ap75(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            gt = {0: np.array([BOX, FAR])}
            dets = []
            for _ in range(6):
                base = gt[0][rng.integers(2)]
                dets.append((0, base + rng.uniform(-0.05, 0.05, 4), float(rng.random())))
            assert average_precision(dets, gt, 0.5) >= average_precision(dets, gt, 0.75) - 1e-12


class TestEvaluate:
    @pytest.fixture(scope="class")
    def setup(self):
        ds = synthworld.generate_dataset(lambda i: rngmod.stream(40, "e", i), 40,
                                         synthworld.DEFAULT_NOVEL_CLASSES)
        det = FSDetr.init(ModelConfig(d=32, n_heads=4, n_enc_layers=1, n_dec_layers=1,
                                      n_queries=8, bank_size=8, ffn_dim=32, head_hidden=16),
                          seed=0)
        return det, ds

    def test_deterministic_report(self, setup):
        det, ds = setup
        kw = dict(k=1, m=2, n_episodes=6, seed=5, novel_ids=synthworld.DEFAULT_NOVEL_CLASSES,
                  base_ids=synthworld.DEFAULT_BASE_CLASSES)
        a = evaluate(det, ds, **kw)
        b = evaluate(det, ds, **kw)
        assert a.to_json() == b.to_json()

    def test_variable_k_contract(self, setup):
        det, ds = setup
        for k in (1, 3):
            r = evaluate(det, ds, k=k, m=2, n_episodes=4, seed=6,
                         novel_ids=synthworld.DEFAULT_NOVEL_CLASSES, base_ids=())
            assert r.k == k and r.episodes == 4

    def test_aggregates_are_class_means(self, setup):
        det, ds = setup
        r = evaluate(det, ds, k=1, m=2, n_episodes=10, seed=7,
                     novel_ids=synthworld.DEFAULT_NOVEL_CLASSES, base_ids=())
        novel_rows = [v for c, v in r.per_class.items() if c in set(synthworld.DEFAULT_NOVEL_CLASSES)]
        if novel_rows:
            for key in ("ap50", "ap75", "ap"):
                assert abs(r.novel[key] - np.mean([row[key] for row in novel_rows])) < 1e-9

    def test_report_schema(self, setup):
        det, ds = setup
        r = evaluate(det, ds, k=1, m=1, n_episodes=3, seed=8,
                     novel_ids=synthworld.DEFAULT_NOVEL_CLASSES, base_ids=())
        doc = r.to_dict()
        assert set(doc.keys()) == {"protocol", "iou_thresholds", "k", "m", "episodes",
                                   "flags", "per_class", "novel", "base", "all"}
        assert len(doc["iou_thresholds"]) == 10
        for stats in doc["per_class"].values():
            assert set(stats.keys()) == {"ap50", "ap75", "ap"}
            assert all(0.0 <= stats[s] <= 1.0 for s in stats)
