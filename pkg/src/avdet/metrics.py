"""Detection metrics: IoU, single-class AP, centre distance (CD), and the
precision of the volume labelling heuristic."""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .audio import PairLabel

AP_THRESHOLDS = (0.1, 0.2, 0.3)


def _coords(box):
    x0, y0, x1, y1 = (float(v) for v in tuple(box)[:4])
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate box {tuple(box)[:4]}")
    return x0, y0, x1, y1


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def _per_frame(items):
    """Normalise per-frame containers to ``{frame_id: list}``."""
    if isinstance(items, Mapping):
        return {int(k): list(v) if v is not None else None for k, v in items.items()}
    return {i: list(v) if v is not None else None for i, v in enumerate(items)}


def match_detections(preds, gts, iou_thresh):
    """Greedy confidence-ordered matching.

    Returns ``(scores, is_tp, n_gt)`` over all predictions in ranking order.
    Frames whose ground truth is ``None`` (unannotated) are skipped.
    """
    P, G = _per_frame(preds), _per_frame(gts)
    dets = []
    for f in sorted(P):
        if G.get(f) is None:
            continue
        for j, b in enumerate(P[f]):
            dets.append((-float(b[4]), f, j))
    dets.sort()
    n_gt = sum(len(g) for g in G.values() if g is not None)
    used = {f: np.zeros(len(g), dtype=bool) for f, g in G.items() if g is not None}
    scores, tps = [], []
    for neg_score, f, j in dets:
        box = P[f][j]
        best, best_iou = -1, -1.0
        for k, g in enumerate(G[f]):
            if used[f][k]:
                continue
            o = iou(box, g)
            if o >= iou_thresh and o > best_iou:
                best, best_iou = k, o
        if best >= 0:
            used[f][best] = True
        scores.append(-neg_score)
        tps.append(best >= 0)
    return np.array(scores), np.array(tps, dtype=bool), n_gt


def average_precision(preds, gts, iou_thresh=0.1):
    """All-point interpolated AP for the single vehicle class.

    ``preds`` holds scored boxes ``(x0, y0, x1, y1, score)`` per frame and
    ``gts`` plain boxes per frame (lists aligned by position or dicts keyed by
    frame id).  Returns ``None`` when there is no ground truth at all.
    """
    _, tp, n_gt = match_detections(preds, gts, iou_thresh)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _centers(boxes):
    return np.array([[0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])] for b in boxes], dtype=float).reshape(-1, 2)


def assign_centers(pred_boxes, gt_boxes):
    """Minimum-total-distance one-to-one assignment of box centres.

    Returns ``(pairs, distances)`` with ``pairs`` as (pred_index, gt_index).
    """
    pc, gc = _centers(pred_boxes), _centers(gt_boxes)
    if len(pc) == 0 or len(gc) == 0:
        return [], np.zeros(0)
    cost = np.linalg.norm(pc[:, None, :] - gc[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist())), cost[rows, cols]


@dataclass
class CenterDistance:
    cd: float | None
    cd_matched: float | None
    n_frames: int
    n_unmatched: int
    per_frame: dict = field(default_factory=dict)


def center_distance(preds, gts, penalty: float = 0.0) -> CenterDistance:
    """Mean centre distance under optimal assignment, averaged over frames.

    Each unmatched box (either side) costs ``penalty`` pixels and counts as one
    item in its frame's mean.  ``cd_matched`` ignores unmatched boxes.  Frames
    without predictions and ground truth contribute nothing, and neither do
    frames without a ground-truth record.
    """
    P, G = _per_frame(preds), _per_frame(gts)
    frame_cd, frame_matched, per_frame = [], [], {}
    n_unmatched = 0
    for f in sorted(set(P) | set(G)):
        g = G.get(f)
        if g is None:  # unannotated frame
            continue
        p = P.get(f) or []
        if not p and not g:
            continue
        _, dist = assign_centers(p, g)
        k = len(dist)
        u = len(p) + len(g) - 2 * k
        n_unmatched += u
        value = (math.fsum(dist) + u * penalty) / (k + u)
        frame_cd.append(value)
        if k:
            frame_matched.append(float(np.mean(dist)))
        per_frame[f] = {"cd": value, "matched": k, "unmatched": u}
    return CenterDistance(
        cd=float(np.mean(frame_cd)) if frame_cd else None,
        cd_matched=float(np.mean(frame_matched)) if frame_matched else None,
        n_frames=len(frame_cd), n_unmatched=n_unmatched, per_frame=per_frame)


def _label(l):
    return l if isinstance(l, PairLabel) else PairLabel(str(l))


def heuristic_precision(labels, gt_presence):
    """``(positive_precision, negative_precision)``; ``None`` where a class is empty."""
    labels = [_label(l) for l in labels]
    presence = [bool(p) for p in gt_presence]
    if len(labels) != len(presence):
        raise ValueError("labels and gt_presence differ in length")
    pos = [p for l, p in zip(labels, presence) if l is PairLabel.POSITIVE]
    neg = [p for l, p in zip(labels, presence) if l is PairLabel.NEGATIVE]
    pos_prec = sum(pos) / len(pos) if pos else None
    neg_prec = sum(not p for p in neg) / len(neg) if neg else None
    return pos_prec, neg_prec


def labelled_precision(labels, gt_presence):
    """Fraction of Positive/Negative labels that agree with visibility."""
    labels = [_label(l) for l in labels]
    hits = n = 0
    for l, p in zip(labels, gt_presence):
        if l is PairLabel.POSITIVE:
            hits += bool(p)
            n += 1
        elif l is PairLabel.NEGATIVE:
            hits += not p
            n += 1
    return hits / n if n else None


@dataclass
class EvalReport:
    ap: dict
    cd: float | None
    cd_matched: float | None
    cd_penalty: float
    n_frames: int
    n_gt: int
    n_pred: int
    heuristic_precision: tuple | None = None
    per_frame: list = field(default_factory=list)

    def to_dict(self):
        return {
            "ap": {f"{k:.1f}": v for k, v in self.ap.items()},
            "cd": self.cd,
            "cd_matched": self.cd_matched,
            "cd_penalty": self.cd_penalty,
            "n_frames": self.n_frames,
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "heuristic_precision": (None if self.heuristic_precision is None else
                                    {"positive": self.heuristic_precision[0],
                                     "negative": self.heuristic_precision[1]}),
            "per_frame": self.per_frame,
        }


def evaluate(preds, gts, image_size=None, thresholds=AP_THRESHOLDS, penalty=None,
             labels=None, gt_presence=None) -> EvalReport:
    """AP at each IoU threshold plus CD; ``image_size`` is ``(width, height)``.

    The CD penalty defaults to a quarter of the image diagonal.
    """
    if penalty is None:
        penalty = 0.0 if image_size is None else math.hypot(*image_size) / 4
    P, G = _per_frame(preds), _per_frame(gts)
    ap = {float(t): average_precision(P, G, t) for t in thresholds}
    cd = center_distance(P, G, penalty)
    frames = sorted(f for f, g in G.items() if g is not None)
    per_frame = []
    for f in frames:
        rec = {"frame": f, "n_pred": len(P.get(f) or []), "n_gt": len(G[f])}
        rec.update(cd.per_frame.get(f, {"cd": None, "matched": 0, "unmatched": 0}))
        per_frame.append(rec)
    hp = None
    if labels is not None and gt_presence is not None:
        hp = heuristic_precision(labels, gt_presence)
    return EvalReport(ap=ap, cd=cd.cd, cd_matched=cd.cd_matched, cd_penalty=float(penalty),
                      n_frames=len(frames), n_gt=sum(len(G[f]) for f in frames),
                      n_pred=sum(len(P.get(f) or []) for f in frames),
                      heuristic_precision=hp, per_frame=per_frame)
