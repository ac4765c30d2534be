import math

import numpy as np
import pytest

from irdet import tensor as T
from irdet.detect import (
    AnchorSet,
    Detection,
    GroundTruth,
    assign_targets,
    decode_and_nms,
    detection_loss,
    evaluate,
    giou_xywh,
    iou_xywh,
    nms,
    shape_iou,
)
from irdet.tensor import SGD, Tensor

from oracles import assert_grads_close, iou_corners, numeric_grad


ANCHORS = AnchorSet(
    [[(5, 8), (9, 5), (10, 16)], [(16, 10), (14, 24), (24, 16)], [(24, 40), (40, 26), (52, 52)]],
    [8, 16, 32],
    96,
)


def _sample_giou(a, b, n=400):
    """Monte-Carlo-free area sampling on a fine grid (independent oracle)."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    lo_x, hi_x = min(ax1, bx1), max(ax2, bx2)
    lo_y, hi_y = min(ay1, by1), max(ay2, by2)
    dx, dy = (hi_x - lo_x) / n, (hi_y - lo_y) / n
    xs = lo_x + (np.arange(n) + 0.5) * dx  # midpoint rule
    ys = lo_y + (np.arange(n) + 0.5) * dy
    X, Y = np.meshgrid(xs, ys)
    in_a = (X >= ax1) & (X <= ax2) & (Y >= ay1) & (Y <= ay2)
    in_b = (X >= bx1) & (X <= bx2) & (Y >= by1) & (Y <= by2)
    cell = dx * dy
    inter = (in_a & in_b).sum() * cell
    union = (in_a | in_b).sum() * cell
    c = (hi_x - lo_x) * (hi_y - lo_y)
    return inter / union - (c - union) / c


def test_giou_identity():
    b = (0.5, 0.5, 0.2, 0.3)
    assert giou_xywh(b, b) == pytest.approx(1.0)


def test_giou_disjoint_limit_approaches_minus_one():
    a = (0.0, 0.0, 1.0, 1.0)
    vals = [giou_xywh(a, (d, 0.0, 1.0, 1.0)) for d in (2.0, 10.0, 100.0, 1000.0)]
    assert all(v2 < v1 for v1, v2 in zip(vals, vals[1:]))
    assert vals[-1] < -0.99


def test_giou_half_overlap_unit_squares():
    a = (0.5, 0.5, 1.0, 1.0)
    b = (1.0, 0.5, 1.0, 1.0)
    got = giou_xywh(a, b)
    assert got == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert got == pytest.approx(_sample_giou(a, b), abs=5e-3)


def test_giou_properties_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.05, 0.5, 2))
        b = tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.05, 0.5, 2))
        g = giou_xywh(a, b)
        assert g == pytest.approx(giou_xywh(b, a), abs=1e-12)  # symmetric
        assert g <= iou_xywh(a, b) + 1e-12
    # containment: enclosing box == union so penalty vanishes
    outer = (0.5, 0.5, 0.6, 0.6)
    inner = (0.5, 0.5, 0.2, 0.2)
    assert giou_xywh(outer, inner) == pytest.approx(iou_xywh(outer, inner))


def test_giou_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        giou_xywh((0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 0.1))


# ---------------------------------------------------------------------------
# assignment


def test_single_gt_single_positive():
    gt = GroundTruth(0, 0.51, 0.48, 0.1, 0.12)
    a = assign_targets([gt], ANCHORS)
    assert sum(o.sum() for o in a.obj) == 1
    assert sum(len(p) for p in a.pos) == 1


def test_two_gts_two_positives():
    gts = [GroundTruth(0, 0.2, 0.2, 0.08, 0.1), GroundTruth(1, 0.8, 0.7, 0.3, 0.28)]
    a = assign_targets(gts, ANCHORS)
    assert sum(o.sum() for o in a.obj) == 2


def test_assignment_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        gt = GroundTruth(
            0,
            float(rng.uniform(0.1, 0.9)),
            float(rng.uniform(0.1, 0.9)),
            float(rng.uniform(0.03, 0.6)),
            float(rng.uniform(0.03, 0.6)),
        )
        a = assign_targets([gt], ANCHORS)
        # oracle: brute force over every (head, anchor) centered IoU
        best, best_ha = -1.0, None
        for h in range(3):
            for ai, (aw, ah) in enumerate(ANCHORS.anchors[h]):
                box_a = (0.0, 0.0, aw / 96.0, ah / 96.0)
                box_g = (0.0, 0.0, gt.w, gt.h)
                ov = iou_xywh(box_a, box_g)
                if ov > best:
                    best, best_ha = ov, (h, ai)
        h, ai = best_ha
        S = ANCHORS.grid(h)
        gy, gx = min(int(gt.cy * S), S - 1), min(int(gt.cx * S), S - 1)
        assert a.obj[h][ai, gy, gx] == 1.0
        assert sum(o.sum() for o in a.obj) == 1


# ---------------------------------------------------------------------------
# loss


def _heads_for(gts_batch, logit=25.0, anchors=ANCHORS, nc=2):
    """Head arrays whose decode reproduces the gts exactly."""
    A = anchors.per_head
    heads = []
    for h in range(3):
        S = anchors.grid(h)
        x = np.zeros((len(gts_batch), A, 5 + nc, S, S))
        x[:, :, 4] = -logit
        x[:, :, 5:] = -logit
        heads.append(x)
    for b, gts in enumerate(gts_batch):
        a = assign_targets(gts, anchors)
        for h in range(3):
            S = anchors.grid(h)
            for ai, gy, gx, gt in a.pos[h]:
                aw, ah = anchors.anchors[h][ai]
                sx = gt.cx * S - gx
                sy = gt.cy * S - gy
                heads[h][b, ai, 0, gy, gx] = math.log(sx / (1 - sx))
                heads[h][b, ai, 1, gy, gx] = math.log(sy / (1 - sy))
                heads[h][b, ai, 2, gy, gx] = math.log(gt.w * anchors.img_size / aw)
                heads[h][b, ai, 3, gy, gx] = math.log(gt.h * anchors.img_size / ah)
                heads[h][b, ai, 4, gy, gx] = logit
                heads[h][b, ai, 5 + gt.cls, gy, gx] = logit
    return [x.reshape(x.shape[0], -1, x.shape[3], x.shape[4]) for x in heads]


GTS = [
    [GroundTruth(0, 0.31, 0.42, 0.08, 0.13), GroundTruth(1, 0.72, 0.66, 0.22, 0.18)],
    [GroundTruth(1, 0.55, 0.23, 0.3, 0.4)],
]


def test_perfect_predictions_have_tiny_loss():
    heads = [Tensor(h) for h in _heads_for(GTS)]
    out = detection_loss(heads, GTS, ANCHORS, num_classes=2)
    assert out["box"].item() == pytest.approx(0.0, abs=1e-9)
    assert out["obj"].item() < 1e-6
    assert out["cls"].item() < 1e-6


def test_loss_rejects_nan():
    heads = _heads_for(GTS)
    heads[0][0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        detection_loss([Tensor(h) for h in heads], GTS, ANCHORS, num_classes=2)


def test_loss_gradients_vs_fd():
    rng = np.random.default_rng(2)
    arrs = [rng.normal(size=(1, 21, ANCHORS.grid(h), ANCHORS.grid(h))) for h in range(3)]
    gts = [GTS[0]]
    heads = [Tensor(a, requires_grad=True) for a in arrs]
    out = detection_loss(heads, gts, ANCHORS, num_classes=2)
    out["total"].backward()

    for h in range(3):
        def run(h=h):
            hs = [Tensor(a) for a in arrs]
            return detection_loss(hs, gts, ANCHORS, num_classes=2)["total"].item()

        flat_idx = rng.choice(arrs[h].size, size=12, replace=False)
        num = np.zeros(arrs[h].size)
        from oracles import numeric_grad_at

        for i, v in numeric_grad_at(run, arrs[h], flat_idx).items():
            num[i] = v
        ana = heads[h].grad.reshape(-1)[flat_idx]
        assert_grads_close(ana, num[flat_idx], rel=1e-4)


def test_loss_decreases_overfitting_one_image():
    rng = np.random.default_rng(3)
    arrs = [
        Tensor(rng.normal(size=(1, 21, ANCHORS.grid(h), ANCHORS.grid(h))) * 0.1,
               requires_grad=True)
        for h in range(3)
    ]
    opt = SGD(arrs, lr=0.1, momentum=0.0)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        out = detection_loss(arrs, [GTS[0]], ANCHORS, num_classes=2)
        losses.append(out["total"].item())
        out["total"].backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:])), losses[:5]


# ---------------------------------------------------------------------------
# decode + NMS


def test_nms_merges_identical_keeps_disjoint():
    d1 = Detection(0, 0.9, 0.3, 0.3, 0.1, 0.1)
    d2 = Detection(0, 0.8, 0.3, 0.3, 0.1, 0.1)
    d3 = Detection(0, 0.7, 0.8, 0.8, 0.1, 0.1)
    kept = nms([d1, d2, d3], iou_thresh=0.45)
    assert kept == [d1, d3]


def _reference_nms(dets, thr):
    """Repeated argmax with an explicit suppressed set."""
    out = []
    for c in sorted({d.cls for d in dets}):
        pool = [d for d in dets if d.cls == c]
        alive = [True] * len(pool)
        while any(alive):
            i = max(
                (k for k in range(len(pool)) if alive[k]),
                key=lambda k: (pool[k].conf, -pool[k].cx, -pool[k].cy, -pool[k].w, -pool[k].h),
            )
            out.append(pool[i])
            alive[i] = False
            for k in range(len(pool)):
                if alive[k] and iou_xywh(pool[i].box, pool[k].box) > thr:
                    alive[k] = False
    return out


def test_nms_matches_reference_on_200_boxes():
    rng = np.random.default_rng(4)
    dets = [
        Detection(
            int(rng.integers(0, 3)),
            float(rng.uniform(0.05, 1.0)),
            float(rng.uniform(0.2, 0.8)),
            float(rng.uniform(0.2, 0.8)),
            float(rng.uniform(0.05, 0.3)),
            float(rng.uniform(0.05, 0.3)),
        )
        for _ in range(200)
    ]
    got = sorted(nms(dets, 0.45), key=lambda d: (d.cls, -d.conf))
    want = sorted(_reference_nms(dets, 0.45), key=lambda d: (d.cls, -d.conf))
    assert got == want


def test_nms_survivor_pairs_below_threshold():
    rng = np.random.default_rng(5)
    dets = [
        Detection(0, float(rng.uniform()), float(rng.uniform(0.3, 0.7)),
                  float(rng.uniform(0.3, 0.7)), 0.2, 0.2)
        for _ in range(60)
    ]
    kept = nms(dets, 0.5)
    assert set(kept) <= set(dets)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert iou_xywh(a.box, b.box) <= 0.5


def test_decode_roundtrip_finds_planted_boxes():
    heads = _heads_for(GTS)
    dets = decode_and_nms(heads, ANCHORS, num_classes=2, conf_thresh=0.25, iou_thresh=0.45)
    assert len(dets[0]) == 2 and len(dets[1]) == 1
    for d, gt in zip(sorted(dets[0], key=lambda d: d.cx), sorted(GTS[0], key=lambda g: g.cx)):
        assert d.cls == gt.cls
        assert iou_xywh(d.box, gt.box) > 0.99


def test_decode_rejects_bad_thresholds():
    heads = _heads_for(GTS)
    with pytest.raises(ValueError):
        decode_and_nms(heads, ANCHORS, 2, conf_thresh=0.0)


# ---------------------------------------------------------------------------
# evaluation


def _perfect_dets(gts_per_img):
    return [
        [Detection(g.cls, 1.0, g.cx, g.cy, g.w, g.h) for g in gts]
        for gts in gts_per_img
    ]


def test_perfect_detector_scores_one():
    out = evaluate(_perfect_dets([GTS[0], GTS[1]]), [GTS[0], GTS[1]], num_classes=2)
    assert out["map"] == pytest.approx(1.0)
    assert out["precision"] == pytest.approx(1.0)
    assert out["recall"] == pytest.approx(1.0)


def test_empty_detections_zero_recall():
    out = evaluate([[], []], [GTS[0], GTS[1]], num_classes=2)
    assert out["recall"] == 0.0 and out["map"] == 0.0


def test_no_gts_recall_absent():
    dets = [[Detection(0, 0.9, 0.5, 0.5, 0.1, 0.1)]]
    out = evaluate(dets, [[]], num_classes=2)
    assert out["per_class"][0]["recall"] is None
    assert out["map"] is None


def _oracle_map(dets_per_img, gts_per_img, nc, thr=0.5):
    """Threshold-sweep evaluator: fresh matching per confidence cut, then the
    textbook all-points interpolation sum."""
    aps = []
    for c in range(nc):
        npos = sum(1 for gts in gts_per_img for g in gts if g.cls == c)
        if npos == 0:
            continue
        flat = [
            (d.conf, i, d)
            for i, dets in enumerate(dets_per_img)
            for d in dets
            if d.cls == c
        ]
        cuts = sorted({conf for conf, _, _ in flat}, reverse=True)
        points = []
        for cut in cuts:
            sub = sorted((r for r in flat if r[0] >= cut), key=lambda r: -r[0])
            used = {i: set() for i in range(len(gts_per_img))}
            tp = 0
            for conf, i, d in sub:
                cands = [
                    (iou_xywh(d.box, g.box), j)
                    for j, g in enumerate(gts_per_img[i])
                    if g.cls == c and j not in used[i]
                ]
                if cands:
                    ov, j = max(cands)
                    if ov >= thr:
                        used[i].add(j)
                        tp += 1
            points.append((tp / npos, tp / len(sub)))
        recs = sorted({r for r, _ in points})
        ap, prev = 0.0, 0.0
        for r in recs:
            p_interp = max(p for rr, p in points if rr >= r)
            ap += (r - prev) * p_interp
            prev = r
        aps.append(ap)
    return float(np.mean(aps)) if aps else None


def _random_micro_dataset(seed, n_images=10, nc=2):
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for _ in range(n_images):
        g = [
            GroundTruth(
                int(rng.integers(0, nc)),
                float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.05, 0.3)),
            )
            for _ in range(rng.integers(0, 4))
        ]
        d = []
        for gt in g:
            if rng.uniform() < 0.8:  # jittered true positive candidate
                d.append(Detection(
                    gt.cls, float(rng.uniform(0.3, 1.0)),
                    gt.cx + float(rng.normal(0, 0.02)), gt.cy + float(rng.normal(0, 0.02)),
                    gt.w * float(rng.uniform(0.8, 1.2)), gt.h * float(rng.uniform(0.8, 1.2)),
                ))
        for _ in range(rng.integers(0, 3)):  # spurious
            d.append(Detection(
                int(rng.integers(0, nc)), float(rng.uniform(0.05, 1.0)),
                float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.05, 0.3)),
            ))
        gts.append(g)
        dets.append(d)
    return dets, gts


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_map_matches_bruteforce_oracle(seed):
    dets, gts = _random_micro_dataset(seed)
    got = evaluate(dets, gts, num_classes=2)["map"]
    want = _oracle_map(dets, gts, nc=2)
    assert got == pytest.approx(want, abs=1e-9)


def test_map_invariant_under_reordering():
    dets, gts = _random_micro_dataset(13)
    base = evaluate(dets, gts, num_classes=2)["map"]
    rng = np.random.default_rng(14)
    for _ in range(5):
        shuffled = [list(rng.permutation(np.array(d, dtype=object))) if d else [] for d in dets]
        assert evaluate(shuffled, gts, num_classes=2)["map"] == pytest.approx(base, abs=1e-12)
