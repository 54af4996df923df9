import itertools

import numpy as np
import pytest

from sideaware.box_geometry import OrientedBox3, SideId, rotated_iou
from sideaware.evaluation import (ScoredBox, all_point_ap, average_precision, face_errors,
                                  match_detections, side_error_stats)
from sideaware.soft_pls import PseudoLabel


def box_at(x, y=0.0, size=(1.0, 1.0, 1.0), yaw=0.0):
    return OrientedBox3([x, y, 0.5], size, yaw)


def enumeration_match(preds, gts, t):
    """Greedy matching characterized as the lexicographically largest IoU
    vector (in score order) over all valid partial injective assignments."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    options = [None] + list(range(len(gts)))
    best, best_key = None, None
    for assign in itertools.product(options, repeat=len(preds)):
        used = [a for a in assign if a is not None]
        if len(used) != len(set(used)):
            continue
        key, ok = [], True
        for i in order:
            a = assign[i]
            if a is None:
                key.append(-1.0)
                continue
            iou = rotated_iou(preds[i].box, gts[a][0])
            if gts[a][1] != preds[i].class_id or iou < t:
                ok = False
                break
            key.append(iou)
        if ok and (best_key is None or key > best_key):
            best, best_key = list(assign), key
    return best


def face_loop(pred, gt):
    """Face distance via explicit face-center projection per side."""
    out = []
    for side in SideId:
        axis = side.axis
        normal = np.zeros(3)
        normal[axis] = side.sign
        gt_face = gt.center + gt.rotation @ (normal * gt.size[axis] / 2)
        pred_face = pred.center + pred.rotation @ (normal * pred.size[axis] / 2)
        world_n = gt.rotation @ normal
        out.append(abs(sum((pred_face[k] - gt_face[k]) * world_n[k] for k in range(3))))
    return out


class TestMatching:
    def test_exact(self):
        gt = [(box_at(0), 0)]
        assert match_detections([ScoredBox(box_at(0), 0, 0.9)], gt, 0.5) == [0]

    def test_single_match(self):
        gt = [(box_at(0), 0)]
        preds = [ScoredBox(box_at(0.05), 0, 0.6), ScoredBox(box_at(0.1), 0, 0.9)]
        assert match_detections(preds, gt, 0.25) == [None, 0]

    def test_class_must_agree(self):
        assert match_detections([ScoredBox(box_at(0), 1, 0.9)], [(box_at(0), 0)], 0.25) == [None]

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(150):
            gts = [(box_at(*rng.uniform(-0.8, 0.8, 2)), int(rng.integers(2)))
                   for _ in range(rng.integers(0, 4))]
            preds = [ScoredBox(box_at(*rng.uniform(-0.8, 0.8, 2)), int(rng.integers(2)), float(rng.uniform()))
                     for _ in range(rng.integers(0, 5))]
            for t in (0.1, 0.25):
                assert match_detections(preds, gts, t) == (enumeration_match(preds, gts, t) or [])


class TestAveragePrecision:
    def test_perfect(self):
        gts = [[(box_at(0), 0), (box_at(3), 1)], [(box_at(1, 4), 0)]]
        preds = [[ScoredBox(b, c, 0.9) for b, c in s] for s in gts]
        res = average_precision(preds, gts, (0.25, 0.5))
        assert res.map(0.25) == 1.0 and res.map(0.5) == 1.0

    def test_no_predictions(self):
        res = average_precision([[]], [[(box_at(0), 0)]], (0.25,))
        assert res.map(0.25) == 0.0

    def test_five_prediction_fixture(self):
        gts = [(box_at(3.0 * k), 0) for k in range(4)]
        preds = [ScoredBox(box_at(0), 0, 0.9), ScoredBox(box_at(50), 0, 0.8),
                 ScoredBox(box_at(3), 0, 0.7), ScoredBox(box_at(6), 0, 0.6),
                 ScoredBox(box_at(60), 0, 0.5)]
        # TP FP TP TP FP over 4 GT: precision 1, 1/2, 2/3, 3/4, 3/5 at recall
        # 1/4, 1/4, 1/2, 3/4, 3/4; envelope gives 1/4*1 + 1/4*3/4 + 1/4*3/4
        res = average_precision([preds], [gts], (0.5,))
        assert res.ap[0.5][0] == pytest.approx(0.625, abs=1e-12)
        assert all_point_ap([1, 0, 1, 1, 0], [0.9, 0.8, 0.7, 0.6, 0.5], 4) == pytest.approx(0.625, abs=1e-12)

    def test_map_skips_classes_without_gt(self):
        gts = [[(box_at(0), 0)]]
        preds = [[ScoredBox(box_at(0), 0, 0.9), ScoredBox(box_at(5), 1, 0.9)]]
        res = average_precision(preds, gts, (0.5,))
        assert res.ap[0.5][1] == 0.0
        assert res.map(0.5) == 1.0

    def test_adding_top_tp_never_decreases(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            flags = rng.integers(0, 2, n).tolist()
            scores = rng.uniform(0, 1, n).tolist()
            num_gt = sum(flags) + int(rng.integers(1, 4))
            before = all_point_ap(flags, scores, num_gt)
            after = all_point_ap(flags + [1], scores + [2.0], num_gt)
            assert after >= before - 1e-12

    def test_rows(self):
        res = average_precision([[ScoredBox(box_at(0), 0, 0.9)]], [[(box_at(0), 0)]], (0.25, 0.5))
        rows = res.rows()
        assert [r["class"] for r in rows] == ["0", "mAP", "0", "mAP"]
        assert res.to_csv().splitlines()[0] == "class,iou_threshold,ap,num_gt,num_pred,num_tp"


class TestSideStats:
    def test_identical(self):
        gts = [(box_at(0), 0), (box_at(3), 1), (box_at(6), 1)]
        pls = [PseudoLabel(b, c, np.ones(6), 1.0) for b, c in gts[:2]]
        rep = side_error_stats(pls, gts)
        assert rep.good_side_count == 12 and rep.bad_side_count == 0
        assert rep.recall == pytest.approx(2 / 3)

    def test_one_displaced_side(self):
        gt = OrientedBox3([0, 0, 0.5], [1.0, 1.0, 1.0], 0.7)
        # grow the front face by 0.2 m: center moves 0.1 along the front normal
        pred = OrientedBox3(gt.center + 0.1 * gt.face_normal(SideId.FRONT), [1.2, 1.0, 1.0], 0.7)
        err = face_errors(pred, gt)
        np.testing.assert_allclose(err, [0, 0, 0, 0, 0.2, 0], atol=1e-12)
        rep = side_error_stats([PseudoLabel(pred, 0, np.ones(6), 1.0)], [(gt, 0)])
        assert rep.bad_side_count == 1 and rep.good_side_count == 5

    def test_face_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            gts = [(OrientedBox3(rng.uniform(-2, 2, 3), rng.uniform(0.5, 2, 3), rng.uniform(-3, 3)),
                    int(rng.integers(2))) for _ in range(3)]
            pls = []
            for b, c in gts:
                jitter = OrientedBox3(b.center + rng.normal(0, 0.1, 3), b.size + rng.uniform(-0.2, 0.2, 3),
                                      b.yaw + rng.normal(0, 0.1))
                pls.append(PseudoLabel(jitter, c, rng.uniform(0.1, 1, 6), 1.0))
            rep = side_error_stats(pls, gts)
            good = bad = matched = 0
            err_sum = w_sum = werr = 0.0
            covered = set()
            for pl in pls:
                cands = [(rotated_iou(pl.box, g), j) for j, (g, c) in enumerate(gts) if c == pl.class_id]
                cands = [x for x in cands if x[0] >= 0.25]
                if not cands:
                    continue
                j = max(cands, key=lambda x: (x[0], -x[1]))[1]
                covered.add(j)
                e = face_loop(pl.box, gts[j][0])
                matched += 1
                for k in range(6):
                    good += e[k] < 0.1
                    bad += e[k] >= 0.1
                    err_sum += e[k]
                    werr += pl.side_quality[k] * e[k]
                    w_sum += pl.side_quality[k]
            assert (rep.good_side_count, rep.bad_side_count, rep.matched) == (good, bad, matched)
            assert rep.good_side_count + rep.bad_side_count == 6 * rep.matched
            assert rep.gt_covered == len(covered)
            assert rep.unweighted_mean_side_error == pytest.approx(err_sum / (6 * matched) if matched else 0.0, abs=1e-12)
            assert rep.weighted_mean_side_error == pytest.approx(werr / w_sum if w_sum else 0.0, abs=1e-12)

    def test_oracle_weights_reduce_error(self):
        gt = OrientedBox3([0, 0, 0.5], [1.0, 1.0, 1.0])
        pred = OrientedBox3([0.1, 0, 0.5], [1.2, 1.0, 1.0])
        err = face_errors(pred, gt)
        q = np.exp(-5 * np.minimum(4 * err, 1))
        rep = side_error_stats([PseudoLabel(pred, 0, q, float(q.mean()))], [(gt, 0)])
        assert rep.weighted_mean_side_error < rep.unweighted_mean_side_error

    def test_merge(self):
        gts = [(box_at(0), 0)]
        a = side_error_stats([PseudoLabel(box_at(0), 0, np.ones(6), 1.0)], gts)
        b = side_error_stats([], gts)
        m = a.merge(b)
        assert m.gt_total == 2 and m.gt_covered == 1 and m.matched == 1
        assert m.per_class[0]["gt"] == 2
