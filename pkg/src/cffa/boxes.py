"""Box geometry: IoU, anchor tiling, delta codec, clipping and greedy NMS.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates;
arrays of boxes have shape ``(N, 4)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

# log(1000 / 16), the usual cap on decoded width/height deltas
MAX_LOG_SCALE = float(np.log(1000.0 / 16))


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when they are disjoint."""
    return float(iou_matrix(np.asarray([a], float), np.asarray([b], float))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def make_anchors(feat_h: int, feat_w: int, stride: int, sizes) -> np.ndarray:
    """Square anchors centred on each feature cell, ordered (h, w, size)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    cy = (np.arange(feat_h) + 0.5) * stride
    cx = (np.arange(feat_w) + 0.5) * stride
    cy, cx, s = np.meshgrid(cy, cx, sizes, indexing="ij")
    half = s / 2
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4)


def encode(reference: np.ndarray, target: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) that move ``reference`` boxes onto ``target``."""
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    wx, wy, ww, wh = weights
    return np.stack(
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * np.log(tw / rw), wh * np.log(th / rh)],
        axis=1,
    )


def decode(reference: np.ndarray, deltas: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    wx, wy, ww, wh = weights
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, MAX_LOG_SCALE)
    dh = np.minimum(deltas[:, 3] / wh, MAX_LOG_SCALE)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * np.exp(dw)
    h = rh * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression. Returns kept indices by descending score.

    Ties in score keep the lower index first (stable sort).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)
