"""Heatmap to bounding boxes: threshold, connected regions, tight hulls."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .dataset import ScoredBox

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def label_components(mask, connectivity=4):
    """Label image (0 = background) and component count, labels ordered by (y_min, x_min)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return labels, 0
    slices = ndimage.find_objects(labels)
    order = sorted(range(n), key=lambda k: (slices[k][0].start, slices[k][1].start))
    remap = np.zeros(n + 1, dtype=labels.dtype)
    remap[np.asarray(order) + 1] = np.arange(1, n + 1)
    return remap[labels], n


def connected_components(mask, connectivity=4):
    """Partition of the true pixels into connected regions.

    Returns a list of ``(k, 2)`` integer arrays of ``(row, col)`` coordinates,
    ordered by the ``(y_min, x_min)`` corner of each component.
    """
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    splits = np.searchsorted(lab, np.arange(2, n + 1))
    return [np.stack([r, c], axis=1) for r, c in zip(np.split(rows, splits), np.split(cols, splits))]


def boxes_from_mask(mask, weights=None, reduce="max", connectivity=4):
    """Tight boxes (pixel-edge coordinates) around each component of ``mask``.

    The box score is ``reduce`` ("max" or "mean") of ``weights`` inside the
    component, or 1.0 without weights.
    """
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    if weights is None:
        scores = np.ones(n)
    elif reduce == "max":
        scores = ndimage.maximum(weights, labels, idx)
    elif reduce == "mean":
        scores = ndimage.mean(weights, labels, idx)
    else:
        raise ValueError(f"unknown reduce {reduce!r}")
    boxes = []
    for k, (sy, sx) in enumerate(ndimage.find_objects(labels)):
        boxes.append(ScoredBox(float(sx.start), float(sy.start), float(sx.stop), float(sy.stop),
                               float(np.clip(scores[k], 0.0, 1.0))))
    return boxes


def extract_boxes(heatmap, threshold=0.5, strict=True, connectivity=4):
    """Boxes around connected regions of ``heatmap > threshold``.

    No area or score filtering, no merging, no NMS.  Each box is scored by the
    maximum heatmap value inside its component.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    mask = hm > threshold if strict else hm >= threshold
    return boxes_from_mask(mask, hm, "max", connectivity)
