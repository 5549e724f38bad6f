"""Annotation-free motion baselines: frame differencing and block-matching flow.

The flow estimator is a classical block matcher standing in for a learned
optical-flow network.  It is an approximation and is labelled as such in
reports.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .boxes import boxes_from_mask
from .exceptions import ShapeError

TIE_TOL = 1e-10


def _pixels(frame):
    return np.asarray(getattr(frame, "pixels", frame), dtype=np.float64)


def _gray(px):
    px = np.asarray(px, dtype=np.float64)
    if px.ndim == 3:
        return px @ np.array([0.299, 0.587, 0.114])[: px.shape[2]] if px.shape[2] == 3 else px.mean(axis=2)
    return px


def frame_difference_boxes(f1, f2, pixel_threshold=0.1):
    """Boxes around regions where the channel-mean absolute difference exceeds the threshold.

    Each box is scored by the mean difference inside its component.
    """
    a, b = _pixels(f1), _pixels(f2)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(b - a)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    return boxes_from_mask(diff > pixel_threshold, diff, reduce="mean")


class FlowField(NamedTuple):
    u: np.ndarray  # horizontal displacement, pixels
    v: np.ndarray  # vertical displacement, pixels

    @property
    def magnitude(self):
        return np.hypot(self.u, self.v)


def _displacements(radius):
    d = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # zero motion first so that ties resolve to no motion
    return sorted(d, key=lambda p: (p[0] ** 2 + p[1] ** 2, p))


def _parabola(cm, c0, cp):
    denom = cm - 2 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        # an exact match (zero cost) is not refined
        off = np.where((denom > 0) & (c0 > 0), 0.5 * (cm - cp) / denom, 0.0)
    return np.clip(off, -0.5, 0.5)


def dense_flow(f1, f2, block=7, radius=6, subpixel=True):
    """Block-matching flow ``(u, v)`` such that ``f1(y, x) ~ f2(y + v, x + u)``.

    Matching cost is the sum of squared grey-level differences over a
    ``block x block`` window; the best integer displacement within ``radius``
    is refined by a parabola fit on the neighbouring costs.
    """
    a, b = _gray(_pixels(f1)), _gray(_pixels(f2))
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape
    r = radius + 1
    bp = np.pad(b, r, mode="edge")
    disp = _displacements(radius)
    cost = {}

    def c(dy, dx):
        if (dy, dx) not in cost:
            shifted = bp[r + dy: r + dy + h, r + dx: r + dx + w]
            cost[(dy, dx)] = ndimage.uniform_filter((shifted - a) ** 2, size=block, mode="nearest")
        return cost[(dy, dx)]

    stack = np.stack([c(dy, dx) for dy, dx in disp])
    # smallest motion within rounding of the minimum wins; the running-sum filter leaves ~1e-17 residues
    best = np.argmax(stack <= stack.min(axis=0) + TIE_TOL, axis=0)
    dyx = np.asarray(disp)
    v = dyx[best, 0].astype(np.float64)
    u = dyx[best, 1].astype(np.float64)
    if subpixel:
        c0 = np.take_along_axis(stack, best[None], 0)[0]
        du, dv = np.zeros_like(u), np.zeros_like(v)
        for (dy, dx) in set(map(tuple, dyx[np.unique(best)])):
            sel = (v == dy) & (u == dx)
            du[sel] = _parabola(c(dy, dx - 1)[sel], c0[sel], c(dy, dx + 1)[sel])
            dv[sel] = _parabola(c(dy - 1, dx)[sel], c0[sel], c(dy + 1, dx)[sel])
        u, v = u + du, v + dv
    return FlowField(u, v)


def flow_boxes(flow: FlowField, mag_threshold=1.0):
    """Boxes around regions with flow magnitude above the threshold, scored by mean magnitude / max."""
    mag = flow.magnitude
    if not np.any(mag > mag_threshold):
        return []
    score = mag / max(float(mag.max()), 1e-12)
    return boxes_from_mask(mag > mag_threshold, score, reduce="mean")


def _frame_pairs(frames):
    """Each frame is paired with its predecessor; the first with its successor."""
    n = len(frames)
    if n < 2:
        raise ShapeError("need at least two frames")
    return [(frames[i - 1], frames[i]) if i else (frames[0], frames[1]) for i in range(n)]


class FrameDifferenceDetector(BaseEstimator):
    """Per-frame boxes from differencing each frame with its predecessor."""

    def __init__(self, pixel_threshold=0.1):
        self.pixel_threshold = pixel_threshold

    def fit(self, frames=None, y=None):
        return self

    def predict(self, frames):
        return [frame_difference_boxes(a, b, self.pixel_threshold) for a, b in _frame_pairs(frames)]


class FlowDetector(BaseEstimator):
    """Per-frame boxes from thresholded block-matching flow magnitude."""

    def __init__(self, mag_threshold=1.0, block=7, radius=6):
        self.mag_threshold = mag_threshold
        self.block = block
        self.radius = radius

    def fit(self, frames=None, y=None):
        return self

    def predict(self, frames):
        return [flow_boxes(dense_flow(a, b, self.block, self.radius), self.mag_threshold)
                for a, b in _frame_pairs(frames)]
