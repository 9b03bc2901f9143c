"""Miniature two-stage detector: 3-block backbone, RPN, RoIAlign head.

The backbone halves resolution in each block (64 -> 32 -> 16 -> 8 for the
default image size); the RPN and the RoI head both read block 3.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import boxes as bx
from .boxes import BBox
from .tensor import (
    Tensor,
    ShapeError,
    binary_cross_entropy,
    conv2d,
    cross_entropy,
    fully_connected,
    matmul,
    no_grad,
    parameter,
    relu,
    sigmoid,
    smooth_l1,
    softmax_rows,
    take,
)

log = logging.getLogger(__name__)

ROI_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    image_size: int = 64
    channels: tuple = (16, 32, 64)
    rpn_channels: int = 64
    fc_dim: int = 64
    pool_size: int = 3
    anchor_sizes: tuple = (12.0, 20.0, 32.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    pre_nms_k: int = 100
    post_nms_k: int = 48
    proposal_nms_iou: float = 0.7
    roi_batch: int = 32
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes)


@dataclass
class Detection:
    box: BBox
    category: int
    score: float


@dataclass
class LossBreakdown:
    rpn_loss: Tensor
    reg_loss: Tensor
    cls_loss: Tensor

    @property
    def total(self) -> Tensor:
        return self.rpn_loss + self.reg_loss + self.cls_loss

    def values(self) -> dict[str, float]:
        return {
            "rpn": self.rpn_loss.item(),
            "reg": self.reg_loss.item(),
            "cls": self.cls_loss.item(),
            "total": self.total.item(),
        }


@dataclass
class ForwardOutputs:
    features: list          # block 1..3 feature maps
    f_rpn: Tensor
    objectness: Tensor      # [1, A, Hf, Wf], sigmoid probabilities
    deltas: Tensor          # [1, 4A, Hf, Wf]
    image_shape: tuple


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class DetectorModel:
    """Parameter container plus the forward passes of the detector."""

    def __init__(self, config: DetectorConfig = DetectorConfig(), rng: np.random.Generator | None = None):
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        c = config
        p: dict[str, Tensor] = {}
        cin = 3
        for i, cout in enumerate(c.channels, start=1):
            p[f"backbone.conv{i}.w"] = parameter(_he(rng, (cout, cin, 3, 3), cin * 9))
            p[f"backbone.conv{i}.b"] = parameter(np.zeros(cout))
            cin = cout
        a = c.num_anchors
        p["rpn.conv.w"] = parameter(_he(rng, (c.rpn_channels, cin, 3, 3), cin * 9))
        p["rpn.conv.b"] = parameter(np.zeros(c.rpn_channels))
        p["rpn.obj.w"] = parameter(rng.normal(0, 0.01, (a, c.rpn_channels, 1, 1)))
        p["rpn.obj.b"] = parameter(np.zeros(a))
        p["rpn.delta.w"] = parameter(rng.normal(0, 0.01, (4 * a, c.rpn_channels, 1, 1)))
        p["rpn.delta.b"] = parameter(np.zeros(4 * a))
        pooled = cin * c.pool_size**2
        p["roi.fc1.w"] = parameter(_he(rng, (c.fc_dim, pooled), pooled))
        p["roi.fc1.b"] = parameter(np.zeros(c.fc_dim))
        p["roi.fc2.w"] = parameter(_he(rng, (c.fc_dim, c.fc_dim), c.fc_dim))
        p["roi.fc2.b"] = parameter(np.zeros(c.fc_dim))
        k = c.num_classes + 1
        p["roi.cls.w"] = parameter(rng.normal(0, 0.01, (k, c.fc_dim)))
        p["roi.cls.b"] = parameter(np.zeros(k))
        p["roi.box.w"] = parameter(rng.normal(0, 0.001, (4 * k, c.fc_dim)))
        p["roi.box.b"] = parameter(np.zeros(4 * k))
        self.params = p
        feat = c.image_size // c.stride
        self.anchors = bx.make_anchors(feat, feat, c.stride, c.anchor_sizes)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {state[name].shape}")
            t.data = np.array(state[name], dtype=np.float64)

    # ------------------------------------------------------------------ passes
    def forward(self, image) -> ForwardOutputs:
        image = _as_batch(image)
        feats = backbone_forward(self, image)
        f_rpn, obj, deltas = rpn_forward(self, feats[-1])
        return ForwardOutputs(feats, f_rpn, obj, deltas, image.shape[2:])


def _as_batch(image) -> Tensor:
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    return image


def backbone_forward(model: DetectorModel, image) -> list[Tensor]:
    image = _as_batch(image)
    h, w = image.shape[2:]
    stride = model.config.stride
    if h % stride or w % stride:
        raise ShapeError(f"image size {h}x{w} is not divisible by {stride}")
    p = model.params
    x = image
    feats = []
    for i in range(1, len(model.config.channels) + 1):
        x = relu(conv2d(x, p[f"backbone.conv{i}.w"], p[f"backbone.conv{i}.b"], stride=2, padding=1))
        feats.append(x)
    return feats


def rpn_forward(model: DetectorModel, top_feature: Tensor):
    p = model.params
    f_rpn = relu(conv2d(top_feature, p["rpn.conv.w"], p["rpn.conv.b"], stride=1, padding=1))
    objectness = sigmoid(conv2d(f_rpn, p["rpn.obj.w"], p["rpn.obj.b"]))
    deltas = conv2d(f_rpn, p["rpn.delta.w"], p["rpn.delta.b"])
    return f_rpn, objectness, deltas


def flat_objectness(objectness: Tensor) -> Tensor:
    """[1, A, H, W] -> [H*W*A], matching the anchor order (h, w, a)."""
    return objectness.reshape(objectness.shape[1:]).transpose(1, 2, 0).reshape(-1)


def flat_deltas(deltas: Tensor) -> Tensor:
    """[1, 4A, H, W] -> [H*W*A, 4]."""
    _, c, h, w = deltas.shape
    return deltas.reshape(c // 4, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


def generate_proposals(
    objectness,
    deltas,
    anchors: np.ndarray,
    pre_nms_k: int,
    post_nms_k: int,
    nms_iou: float,
    image_shape=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, keep top ``pre_nms_k``, NMS, return ``<= post_nms_k`` boxes and scores.

    ``objectness`` and ``deltas`` are either raw RPN outputs or already
    flattened to ``(K,)`` / ``(K, 4)`` in anchor order.
    """
    if not 0.0 < nms_iou < 1.0:
        raise ValueError("nms_iou must lie in (0, 1)")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if len(anchors) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    scores = objectness.data if isinstance(objectness, Tensor) else np.asarray(objectness, float)
    d = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas, float)
    if scores.ndim == 4:
        scores = scores[0].transpose(1, 2, 0).reshape(-1)
    if d.ndim == 4:
        _, c, h, w = d.shape
        d = d[0].reshape(c // 4, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    proposals = bx.decode(anchors, d)
    if image_shape is not None:
        proposals = bx.clip_boxes(proposals, *image_shape)
    order = np.argsort(-scores, kind="stable")[:pre_nms_k]
    proposals, scores = proposals[order], scores[order]
    # drop boxes collapsed by clipping
    valid = ((proposals[:, 2] - proposals[:, 0]) >= 1.0) & ((proposals[:, 3] - proposals[:, 1]) >= 1.0)
    proposals, scores = proposals[valid], scores[valid]
    keep = bx.nms(proposals, scores, nms_iou)[:post_nms_k]
    return proposals[keep], scores[keep]


def roi_align_matrix(rois: np.ndarray, feat_h: int, feat_w: int, stride: int, pool: int) -> np.ndarray:
    """Bilinear sampling weights mapping a flattened feature map to pooled cells.

    Each of the ``pool x pool`` bins averages a 2x2 grid of bilinear samples.
    Returns shape ``(R * pool * pool, feat_h * feat_w)``.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    r = len(rois)
    m = np.zeros((r * pool * pool, feat_h * feat_w))
    if r == 0:
        return m
    x1 = rois[:, 0] / stride - 0.5
    y1 = rois[:, 1] / stride - 0.5
    rw = (rois[:, 2] - rois[:, 0]) / stride
    rh = (rois[:, 3] - rois[:, 1]) / stride
    small = (rw < 1.0) | (rh < 1.0)
    if small.any():
        log.debug("clamping %d degenerate RoIs to a 1-cell window", int(small.sum()))
    rw = np.maximum(rw, 1.0)
    rh = np.maximum(rh, 1.0)
    offsets = (np.arange(pool)[:, None] + (np.arange(2)[None, :] + 0.5) / 2).reshape(-1) / pool
    ys = y1[:, None] + offsets[None, :] * rh[:, None]   # (R, 2P)
    xs = x1[:, None] + offsets[None, :] * rw[:, None]
    ys = np.clip(ys, 0.0, feat_h - 1)
    xs = np.clip(xs, 0.0, feat_w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), max(feat_h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(feat_w - 2, 0))
    fy = ys - y0
    fx = xs - x0
    y1i = np.minimum(y0 + 1, feat_h - 1)
    x1i = np.minimum(x0 + 1, feat_w - 1)
    # sample grid (R, 2P, 2P) -> rows by bin
    ri = np.arange(r)[:, None, None]
    iy = np.arange(2 * pool)[None, :, None]
    ix = np.arange(2 * pool)[None, None, :]
    bin_row = ri * pool * pool + (iy // 2) * pool + (ix // 2)
    bin_row = np.broadcast_to(bin_row, (r, 2 * pool, 2 * pool))
    corners = [
        (y0, x0, (1 - fy)[:, :, None] * (1 - fx)[:, None, :]),
        (y0, x1i, (1 - fy)[:, :, None] * fx[:, None, :]),
        (y1i, x0, fy[:, :, None] * (1 - fx)[:, None, :]),
        (y1i, x1i, fy[:, :, None] * fx[:, None, :]),
    ]
    for yy, xx, wgt in corners:
        col = yy[:, :, None] * feat_w + xx[:, None, :]
        np.add.at(m, (bin_row.ravel(), col.ravel()), 0.25 * wgt.ravel())
    return m


def roi_align(feature: Tensor, rois: np.ndarray, stride: int, pool: int) -> Tensor:
    """Pool each RoI to ``pool x pool`` cells; returns ``[R, C * pool * pool]``."""
    _, c, h, w = feature.shape
    m = roi_align_matrix(rois, h, w, stride, pool)
    flat = feature.reshape(c, h * w).transpose(1, 0)           # [HW, C]
    pooled = matmul(Tensor(m), flat)                            # [R*P*P, C]
    r = len(m) // (pool * pool)
    return pooled.reshape(r, pool * pool, c).transpose(0, 2, 1).reshape(r, c * pool * pool)


def roi_head_forward(model: DetectorModel, top_feature: Tensor, rois):
    """Returns (fc2_features [R, Dfc], class_scores [R, C+1], box_refinements [R, 4(C+1)])."""
    c = model.config
    p = model.params
    rois = np.asarray([tuple(b) for b in rois], dtype=np.float64).reshape(-1, 4)
    pooled = roi_align(top_feature, rois, c.stride, c.pool_size)
    fc1 = relu(fully_connected(pooled, p["roi.fc1.w"], p["roi.fc1.b"]))
    fc2 = relu(fully_connected(fc1, p["roi.fc2.w"], p["roi.fc2.b"]))
    scores = softmax_rows(fully_connected(fc2, p["roi.cls.w"], p["roi.cls.b"]))
    refinements = fully_connected(fc2, p["roi.box.w"], p["roi.box.b"])
    return fc2, scores, refinements


# ----------------------------------------------------------------------- losses

def anchor_targets(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float, neg_iou: float):
    """Labels 1/0/-1 (positive/negative/ignored) and matched GT index per anchor.

    Besides the IoU >= pos_iou rule, each GT's best-overlapping anchor is made
    positive so that small objects always receive a positive anchor.
    """
    labels = -np.ones(len(anchors), dtype=np.int64)
    matched = np.zeros(len(anchors), dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    ious = bx.iou_matrix(anchors, gt_boxes)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    for g in range(len(gt_boxes)):
        top = ious[:, g].max()
        if top > 0:
            winners = np.flatnonzero(ious[:, g] == top)
            labels[winners] = 1
            matched[winners] = g
    return labels, matched


def sample_rois(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray, config: DetectorConfig):
    """Training RoIs: GT boxes first, then proposals; at most 25% foreground.

    Returns (rois, class labels with 0 = background, matched GT index).
    """
    candidates = np.concatenate([gt_boxes.reshape(-1, 4), proposals.reshape(-1, 4)], axis=0)
    if len(gt_boxes):
        ious = bx.iou_matrix(candidates, gt_boxes)
        best = ious.max(axis=1)
        matched = ious.argmax(axis=1)
    else:
        best = np.zeros(len(candidates))
        matched = np.zeros(len(candidates), dtype=np.int64)
    fg = np.flatnonzero(best >= config.roi_fg_iou)
    bg = np.flatnonzero(best < config.roi_fg_iou)
    n_fg = min(len(fg), int(config.roi_batch * config.roi_fg_fraction))
    n_bg = min(len(bg), config.roi_batch - n_fg)
    keep = np.concatenate([fg[:n_fg], bg[:n_bg]])
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[:n_fg] = np.asarray(gt_labels, dtype=np.int64)[matched[fg[:n_fg]]] + 1
    return candidates[keep], labels, matched[keep]


def rpn_loss(outputs: ForwardOutputs, anchors: np.ndarray, gt_boxes: np.ndarray, config: DetectorConfig) -> Tensor:
    labels, matched = anchor_targets(anchors, gt_boxes, config.rpn_pos_iou, config.rpn_neg_iou)
    obj = flat_objectness(outputs.objectness)
    used = np.flatnonzero(labels >= 0)
    loss = binary_cross_entropy(take(obj, used), labels[used].astype(np.float64))
    pos = np.flatnonzero(labels == 1)
    if len(pos):
        target = bx.encode(anchors[pos], gt_boxes[matched[pos]])
        pred = take(flat_deltas(outputs.deltas), pos)
        loss = loss + smooth_l1(pred - target).sum() * (1.0 / len(pos))
    return loss


def detection_loss(model: DetectorModel, outputs: ForwardOutputs, gts, proposals=None) -> LossBreakdown:
    """Supervised loss (RPN + RoI regression + RoI classification) on one image.

    ``gts`` is a list of ``(box, category)`` pairs. Proposals are constants of
    the graph (no gradient flows through box coordinates); pass ``proposals``
    to pin them, e.g. for finite-difference checks.
    """
    c = model.config
    gt_boxes = np.asarray([tuple(b) for b, _ in gts], dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray([k for _, k in gts], dtype=np.int64)
    anchors = model.anchors
    l_rpn = rpn_loss(outputs, anchors, gt_boxes, c)

    if proposals is None:
        proposals, _ = generate_proposals(
            outputs.objectness, outputs.deltas, anchors, c.pre_nms_k, c.post_nms_k,
            c.proposal_nms_iou, outputs.image_shape,
        )
    rois, labels, matched = sample_rois(proposals, gt_boxes, gt_labels, c)
    _, scores, refinements = roi_head_forward(model, outputs.features[-1], rois)
    l_cls = cross_entropy(scores, labels)
    fg = np.flatnonzero(labels > 0)
    if len(fg):
        target = bx.encode(rois[fg], gt_boxes[matched[fg]], ROI_DELTA_WEIGHTS)
        cols = (4 * labels[fg])[:, None] + np.arange(4)[None, :]
        pred = take(refinements, (fg[:, None], cols))
        l_reg = smooth_l1(pred - target).sum() * (1.0 / len(fg))
    else:
        l_reg = Tensor(0.0)
    return LossBreakdown(l_rpn, l_reg, l_cls)


# -------------------------------------------------------------------- inference

def propose(model: DetectorModel, outputs: ForwardOutputs, post_nms_k: int | None = None):
    c = model.config
    return generate_proposals(
        outputs.objectness, outputs.deltas, model.anchors, c.pre_nms_k,
        post_nms_k or c.post_nms_k, c.proposal_nms_iou, outputs.image_shape,
    )


def postprocess(rois, scores: np.ndarray, refinements: np.ndarray, image_shape, score_thresh: float,
                nms_iou: float, max_detections: int = 100) -> list[Detection]:
    """Per-class decode, threshold and NMS of RoI-head outputs."""
    dets: list[Detection] = []
    num_fg = scores.shape[1] - 1
    for k in range(num_fg):
        s = scores[:, k + 1]
        keep = np.flatnonzero(s >= score_thresh)
        if not len(keep):
            continue
        boxes = bx.decode(rois[keep], refinements[keep, 4 * (k + 1): 4 * (k + 2)], ROI_DELTA_WEIGHTS)
        boxes = bx.clip_boxes(boxes, *image_shape)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, s_keep = boxes[ok], s[keep][ok]
        for i in bx.nms(boxes, s_keep, nms_iou):
            dets.append(Detection(BBox(*map(float, boxes[i])), k, float(s_keep[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_detections]


def detect(model: DetectorModel, image, score_thresh: float = 0.05, nms_iou: float = 0.3) -> list[Detection]:
    """Full inference pipeline; deterministic given parameters and image."""
    with no_grad():
        outputs = model.forward(image)
        rois, _ = propose(model, outputs)
        _, scores, refinements = roi_head_forward(model, outputs.features[-1], rois)
    return postprocess(rois, scores.data, refinements.data, outputs.image_shape, score_thresh, nms_iou)
