"""Anchor-based target assignment, detection losses, box decoding, NMS, and
VOC-style precision/recall/mAP@0.5 evaluation.

Boxes are (cx, cy, w, h) normalized to image size. Head layout per anchor:
(tx, ty, tw, th, objectness, class logits...).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class GroundTruth:
    cls: int
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self):
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    cls: int
    conf: float
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self):
        return (self.cx, self.cy, self.w, self.h)


class AnchorSet:
    """Per-head (w, h) priors in pixels at strides 8/16/32."""

    def __init__(self, anchors, strides, img_size):
        self.anchors = [[(float(w), float(h)) for w, h in head] for head in anchors]
        self.strides = list(strides)
        self.img_size = int(img_size)
        if len(self.anchors) != 3:
            raise ValueError(f"expected 3 heads of anchors, got {len(self.anchors)}")
        self.per_head = len(self.anchors[0])

    @classmethod
    def from_graph(cls, graph):
        m = graph.meta
        return cls(m["anchors"], m["strides"], m["img_size"])

    def grid(self, head):
        return self.img_size // self.strides[head]


def _corners(b):
    cx, cy, w, h = b
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_xywh(a, b):
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def giou_xywh(a, b):
    """IoU minus the enclosing-box penalty; in (-1, 1]."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"degenerate box: w/h must be positive, got {a} {b}")
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c = cw * ch
    return inter / union - (c - union) / c


def shape_iou(wh_a, wh_b):
    """IoU of two boxes sharing a center; ranks anchor priors."""
    iw = min(wh_a[0], wh_b[0])
    ih = min(wh_a[1], wh_b[1])
    inter = iw * ih
    return inter / (wh_a[0] * wh_a[1] + wh_b[0] * wh_b[1] - inter)


# ---------------------------------------------------------------------------
# target assignment


@dataclass
class Assignment:
    """Per-head training targets for one image."""

    obj: list  # [A,S,S] float 0/1
    ignore: list  # [A,S,S] bool: near-miss anchors skipped by the objectness loss
    pos: list  # per head: list of (a, gy, gx, GroundTruth)


def assign_targets(gts, anchor_set, ignore_thresh=0.5):
    """Each gt goes to its best shape-IoU anchor at its center cell; anchors
    whose shape-IoU passes ignore_thresh without winning are ignored."""
    A = anchor_set.per_head
    img = anchor_set.img_size
    obj = [np.zeros((A, anchor_set.grid(h), anchor_set.grid(h))) for h in range(3)]
    ignore = [np.zeros_like(o, dtype=bool) for o in obj]
    pos = [{} for _ in range(3)]
    for gt in gts:
        wh = (gt.w * img, gt.h * img)
        ious = [
            (shape_iou(wh, anchor_set.anchors[h][a]), h, a)
            for h in range(3)
            for a in range(A)
        ]
        best_iou, bh, ba = max(ious)
        S = anchor_set.grid(bh)
        gx = min(int(gt.cx * S), S - 1)
        gy = min(int(gt.cy * S), S - 1)
        key = (ba, gy, gx)
        if key not in pos[bh]:
            pos[bh][key] = gt
            obj[bh][ba, gy, gx] = 1.0
        for iou, h, a in ious:
            if iou > ignore_thresh and (h, a) != (bh, ba):
                S2 = anchor_set.grid(h)
                gx2 = min(int(gt.cx * S2), S2 - 1)
                gy2 = min(int(gt.cy * S2), S2 - 1)
                if not obj[h][a, gy2, gx2]:
                    ignore[h][a, gy2, gx2] = True
    pos_lists = [
        [(a, gy, gx, gt) for (a, gy, gx), gt in sorted(p.items())] for p in pos
    ]
    return Assignment(obj=obj, ignore=ignore, pos=pos_lists)


# ---------------------------------------------------------------------------
# loss


def _giou_tensor(p_cx, p_cy, p_w, p_h, gt_boxes):
    """Differentiable GIoU between predicted boxes and constant gt boxes."""
    g = np.asarray(gt_boxes)
    gx1, gy1 = g[:, 0] - g[:, 2] / 2, g[:, 1] - g[:, 3] / 2
    gx2, gy2 = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
    garea = (gx2 - gx1) * (gy2 - gy1)

    px1 = p_cx - p_w / 2
    py1 = p_cy - p_h / 2
    px2 = p_cx + p_w / 2
    py2 = p_cy + p_h / 2
    zero = Tensor(np.zeros(len(g)))
    iw = T.maximum(T.minimum(px2, Tensor(gx2)) - T.maximum(px1, Tensor(gx1)), zero)
    ih = T.maximum(T.minimum(py2, Tensor(gy2)) - T.maximum(py1, Tensor(gy1)), zero)
    inter = T.mul(iw, ih)
    parea = T.mul(px2 - px1, py2 - py1)
    union = parea + Tensor(garea) - inter
    iou = T.mul(inter, T.reciprocal(union))
    cw = T.maximum(px2, Tensor(gx2)) - T.minimum(px1, Tensor(gx1))
    ch = T.maximum(py2, Tensor(gy2)) - T.minimum(py1, Tensor(gy1))
    carea = T.mul(cw, ch)
    return iou - T.mul(carea - union, T.reciprocal(carea))


DEFAULT_LOSS_WEIGHTS = {"box": 1.0, "obj": 1.0, "cls": 0.5, "obj_pos": 30.0}


def detection_loss(head_outs, gts_batch, anchor_set, num_classes, weights=None):
    """Composite loss: (1 - GIoU) over positives, objectness BCE over all
    non-ignored anchors (positives upweighted), class BCE at positives.

    head_outs: three [B, A*(5+nc), S, S] tensors. Returns dict of scalar
    Tensors: box, obj, cls, total, plus the positive count.
    """
    w = dict(DEFAULT_LOSS_WEIGHTS)
    if weights:
        w.update(weights)
    for hx in head_outs:
        if not np.isfinite(hx.data).all():
            raise ValueError("detection loss got non-finite predictions")
    B = head_outs[0].shape[0]
    A = anchor_set.per_head
    nc = num_classes
    img = anchor_set.img_size
    assigns = [assign_targets(gts, anchor_set) for gts in gts_batch]

    zero = Tensor(np.zeros(()))
    box_terms, cls_terms, obj_terms = [], [], []
    n_pos_total = 0
    for h, hx in enumerate(head_outs):
        S = anchor_set.grid(h)
        x = T.reshape(hx, (B, A, 5 + nc, S, S))
        obj_t = np.stack([assigns[b].obj[h] for b in range(B)])  # [B,A,S,S]
        keep = ~np.stack([assigns[b].ignore[h] for b in range(B)])
        obj_logits = x[:, :, 4]
        bce = T.bce_with_logits(obj_logits, obj_t, pos_weight=w["obj_pos"])
        mask = keep.astype(float)
        denom = mask.sum() + (w["obj_pos"] - 1.0) * obj_t.sum()
        obj_terms.append(T.tsum(T.mul(bce, Tensor(mask))) / max(denom, 1.0))

        # gather positives
        bi, ai, gyi, gxi, gt_list = [], [], [], [], []
        for b in range(B):
            for a, gy, gx, gt in assigns[b].pos[h]:
                bi.append(b); ai.append(a); gyi.append(gy); gxi.append(gx)
                gt_list.append(gt)
        if not gt_list:
            continue
        n_pos_total += len(gt_list)
        bi = np.asarray(bi); ai = np.asarray(ai)
        gyi = np.asarray(gyi); gxi = np.asarray(gxi)
        tx = x[bi, ai, 0, gyi, gxi]
        ty = x[bi, ai, 1, gyi, gxi]
        tw = x[bi, ai, 2, gyi, gxi]
        th = x[bi, ai, 3, gyi, gxi]
        aw = np.array([anchor_set.anchors[h][a][0] for a in ai])
        ah = np.array([anchor_set.anchors[h][a][1] for a in ai])
        p_cx = (T.sigmoid(tx) + Tensor(gxi.astype(float))) / S
        p_cy = (T.sigmoid(ty) + Tensor(gyi.astype(float))) / S
        p_w = T.mul(T.exp(tw), Tensor(aw / img))
        p_h = T.mul(T.exp(th), Tensor(ah / img))
        gt_boxes = np.array([gt.box for gt in gt_list])
        giou = _giou_tensor(p_cx, p_cy, p_w, p_h, gt_boxes)
        box_terms.append(T.tsum(Tensor(np.ones(len(gt_list))) - giou))

        cls_logits = x[bi, ai, slice(5, 5 + nc), gyi, gxi]  # [P, nc]
        onehot = np.zeros((len(gt_list), nc))
        onehot[np.arange(len(gt_list)), [gt.cls for gt in gt_list]] = 1.0
        cls_terms.append(T.tsum(T.bce_with_logits(cls_logits, onehot)))

    def _total(terms):
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    obj_loss = _total(obj_terms) / len(obj_terms)
    if n_pos_total:
        box_loss = _total(box_terms) / n_pos_total
        cls_loss = _total(cls_terms) / (n_pos_total * nc)
    else:
        box_loss, cls_loss = zero, zero
    total = T.mul(box_loss, w["box"]) + T.mul(obj_loss, w["obj"]) + T.mul(cls_loss, w["cls"])
    return {
        "box": box_loss,
        "obj": obj_loss,
        "cls": cls_loss,
        "total": total,
        "n_pos": n_pos_total,
    }


# ---------------------------------------------------------------------------
# decoding + NMS


def decode_head(arr, head, anchor_set, num_classes, conf_thresh):
    """One head's raw [A*(5+nc), S, S] array -> Detection candidates."""
    A = anchor_set.per_head
    nc = num_classes
    S = anchor_set.grid(head)
    img = anchor_set.img_size
    x = arr.reshape(A, 5 + nc, S, S)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    out = []
    obj = sig(x[:, 4])
    cls = sig(x[:, 5 : 5 + nc])
    gy, gx = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    for a in range(A):
        aw, ah = anchor_set.anchors[head][a]
        cx = (sig(x[a, 0]) + gx) / S
        cy = (sig(x[a, 1]) + gy) / S
        bw = aw * np.exp(np.clip(x[a, 2], -8, 8)) / img
        bh = ah * np.exp(np.clip(x[a, 3], -8, 8)) / img
        conf = obj[a][None] * cls[a]  # [nc,S,S]
        for c in range(nc):
            ys, xs = np.where(conf[c] >= conf_thresh)
            for yy, xx in zip(ys, xs):
                out.append(Detection(
                    cls=c, conf=float(conf[c, yy, xx]),
                    cx=float(cx[yy, xx]), cy=float(cy[yy, xx]),
                    w=float(bw[yy, xx]), h=float(bh[yy, xx]),
                ))
    return out


def nms(dets, iou_thresh):
    """Per class, greedily keep the highest-confidence box, suppressing any
    same-class box overlapping it above iou_thresh."""
    kept = []
    for c in sorted({d.cls for d in dets}):
        cand = sorted(
            (d for d in dets if d.cls == c),
            key=lambda d: (-d.conf, d.cx, d.cy, d.w, d.h),
        )
        while cand:
            best = cand.pop(0)
            kept.append(best)
            cand = [d for d in cand if iou_xywh(best.box, d.box) <= iou_thresh]
    return kept


def decode_and_nms(head_arrays, anchor_set, num_classes, conf_thresh=0.25, iou_thresh=0.45):
    """Batched head arrays [B, A*(5+nc), S, S] -> per-image Detection lists."""
    if not 0 < conf_thresh < 1 or not 0 < iou_thresh < 1:
        raise ValueError("thresholds must lie in (0, 1)")
    B = head_arrays[0].shape[0]
    out = []
    for b in range(B):
        cands = []
        for h, arr in enumerate(head_arrays):
            cands.extend(decode_head(arr[b], h, anchor_set, num_classes, conf_thresh))
        out.append(nms(cands, iou_thresh))
    return out


# ---------------------------------------------------------------------------
# evaluation


def _all_points_ap(rec, prec):
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(dets_per_img, gts_per_img, num_classes, iou_thresh=0.5):
    """VOC-style all-points AP at the given IoU plus endpoint precision/recall.

    Returns per-class rows and macro aggregates over classes that have
    ground truth; recall is absent (None) for classes without instances.
    """
    if len(dets_per_img) != len(gts_per_img):
        raise ValueError("detections and ground truths must cover the same images")
    per_class = {}
    for c in range(num_classes):
        records = []  # (sort key, img, det)
        for i, dets in enumerate(dets_per_img):
            for d in dets:
                if d.cls == c:
                    records.append(((-d.conf, i, d.cx, d.cy, d.w, d.h), i, d))
        records.sort(key=lambda r: r[0])
        gt_boxes = {
            i: [g for g in gts if g.cls == c] for i, gts in enumerate(gts_per_img)
        }
        npos = sum(len(v) for v in gt_boxes.values())
        matched = {i: [False] * len(v) for i, v in gt_boxes.items()}
        tp = np.zeros(len(records))
        fp = np.zeros(len(records))
        for k, (_, i, d) in enumerate(records):
            best, best_j = -1.0, -1
            for j, g in enumerate(gt_boxes[i]):
                ov = iou_xywh(d.box, g.box)
                if ov > best:
                    best, best_j = ov, j
            if best >= iou_thresh and not matched[i][best_j]:
                matched[i][best_j] = True
                tp[k] = 1.0
            else:
                fp[k] = 1.0
        tpc, fpc = np.cumsum(tp), np.cumsum(fp)
        if npos:
            rec = tpc / npos
            prec = tpc / np.maximum(tpc + fpc, 1e-12)
            ap = _all_points_ap(rec, prec)
            row = {
                "instances": npos,
                "precision": float(prec[-1]) if len(records) else 0.0,
                "recall": float(rec[-1]) if len(records) else 0.0,
                "ap": ap,
            }
        else:
            row = {
                "instances": 0,
                "precision": 0.0 if records else None,
                "recall": None,
                "ap": None,
            }
        per_class[c] = row
    scored = [r for r in per_class.values() if r["ap"] is not None]
    agg = {
        "precision": float(np.mean([r["precision"] for r in scored])) if scored else None,
        "recall": float(np.mean([r["recall"] for r in scored])) if scored else None,
        "map": float(np.mean([r["ap"] for r in scored])) if scored else None,
    }
    return {"per_class": per_class, **agg, "images": len(dets_per_img)}
