"""Candidate crop generation and ranking.

Dense grid anchors drive training and evaluation; fixed-aspect-ratio and
circular candidates serve application mode. All generators are pure functions
of their arguments so repeated calls are bit-identical.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import NumericalError
from .rois import CROP_ROLE, RegionBox


@dataclass(frozen=True)
class AnchorGrid:
    bins: int = 12
    min_area_ratio: float = 0.4
    min_side_ratio: float = 0.3
    target_count: int = 90


class Circle(NamedTuple):
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class CropResult:
    box: RegionBox | None
    score: float
    rank: int


def grid_anchors(image_w: int, image_h: int, grid: AnchorGrid = AnchorGrid()):
    """Enumerate corner-grid crop boxes, filter by size, subsample to target.

    Corners sit on ``bins`` evenly spaced positions per axis (endpoints
    included). Filtered boxes are sorted by area and stride-subsampled to
    exactly ``target_count`` when more survive. An unsatisfiable constraint
    set degrades to the full-image box with a warning.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image dimensions must be positive, got "
                         f"{image_w}x{image_h}")
    xs = np.linspace(0.0, float(image_w), grid.bins)
    ys = np.linspace(0.0, float(image_h), grid.bins)
    min_w = grid.min_side_ratio * image_w
    min_h = grid.min_side_ratio * image_h
    min_area = grid.min_area_ratio * image_w * image_h

    boxes = []
    for i1 in range(grid.bins):
        for i2 in range(i1 + 1, grid.bins):
            w = xs[i2] - xs[i1]
            if w < min_w:
                continue
            for j1 in range(grid.bins):
                for j2 in range(j1 + 1, grid.bins):
                    h = ys[j2] - ys[j1]
                    if h < min_h or w * h < min_area:
                        continue
                    boxes.append(RegionBox(xs[i1], ys[j1], xs[i2], ys[j2],
                                           role=CROP_ROLE))
    if not boxes:
        warnings.warn("anchor constraints unsatisfiable; emitting the "
                      "full-image box only")
        return [RegionBox(0.0, 0.0, float(image_w), float(image_h),
                          role=CROP_ROLE)]
    boxes.sort(key=lambda b: (b.area, b.x1, b.y1, b.x2, b.y2))
    if len(boxes) > grid.target_count:
        n = len(boxes)
        picks = [boxes[(i * n) // grid.target_count]
                 for i in range(grid.target_count)]
        return picks
    return boxes


def ratio_anchors(image_w: int, image_h: int, ratio_w: int, ratio_h: int,
                  scales: int = 4, positions: int = 5,
                  min_side_ratio: float = 0.3):
    """Fixed-aspect-ratio candidates: ``scales`` sizes times ``positions``^2
    translations, deduplicated after the sliding range collapses at the
    boundary. Every box satisfies |w/h - r| / r < 1e-3."""
    if ratio_w <= 0 or ratio_h <= 0:
        raise ValueError(f"ratio terms must be positive, got "
                         f"{ratio_w}:{ratio_h}")
    r = ratio_w / ratio_h
    w_max = min(float(image_w), image_h * r)
    h_max = w_max / r
    shortest = min(image_w, image_h)
    s_min = max(min_side_ratio * shortest / min(w_max, h_max), 1e-6)
    s_min = min(s_min, 1.0)
    factors = np.linspace(1.0, s_min, scales)

    seen = set()
    out = []
    for s in factors:
        w, h = w_max * s, h_max * s
        for oy in np.linspace(0.0, image_h - h, positions):
            for ox in np.linspace(0.0, image_w - w, positions):
                key = (round(ox, 9), round(oy, 9), round(ox + w, 9),
                       round(oy + h, 9))
                if key in seen:
                    continue
                seen.add(key)
                out.append(RegionBox(ox, oy, ox + w, oy + h, role=CROP_ROLE))
    return out


def circular_crop(image_w: int, image_h: int, scales: int = 3,
                  positions: int = 3, min_side_ratio: float = 0.3):
    """Circle candidates scored through their circumscribed squares.

    The square's side equals the circle's diameter, so the standard scoring
    pipeline applies unchanged. Returns (circle, box) pairs, every square
    fully inside the image.
    """
    if min(image_w, image_h) < 1:
        raise ValueError("image too small for circular candidates")
    d_max = float(min(image_w, image_h))
    d_min = max(min_side_ratio * d_max, 1.0)
    seen = set()
    out = []
    for d in np.linspace(d_max, d_min, scales):
        radius = d / 2.0
        for cy in np.linspace(radius, image_h - radius, positions):
            for cx in np.linspace(radius, image_w - radius, positions):
                key = (round(cx, 9), round(cy, 9), round(radius, 9))
                if key in seen:
                    continue
                seen.add(key)
                box = RegionBox(cx - radius, cy - radius, cx + radius,
                                cy + radius, role=CROP_ROLE)
                out.append((Circle(cx, cy, radius), box))
    return out


def rank_crops(scores, boxes=None) -> list[CropResult]:
    """Assign 1-based ranks by descending score, breaking ties by index.

    Results keep the input order; ``result[i].rank`` is candidate i's rank.
    """
    scores = [float(s) for s in scores]
    if not scores:
        raise ValueError("rank_crops needs at least one score")
    for i, s in enumerate(scores):
        if math.isnan(s):
            raise NumericalError(f"candidate {i} has a NaN score")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(scores)
    for position, idx in enumerate(order):
        ranks[idx] = position + 1
    if boxes is None:
        boxes = [None] * len(scores)
    return [CropResult(box=b, score=s, rank=r)
            for b, s, r in zip(boxes, scores, ranks)]
