"""Detection metrics and feature-alignment diagnostics.

* VOC-style average precision (all-point interpolation) and mAP.
* Proxy A-distance ``2 (1 - eps)`` from a linear domain probe.
* Error typing of the top-K detections per class (correct / mislocalized /
  background).
* Attention-map export as PGM.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .art import compute_attention
from .boxes import iou_matrix
from .detector import DetectorModel, detect, roi_head_forward
from .domains import write_pgm
from .tensor import Tensor, bilinear_upsample, no_grad

log = logging.getLogger(__name__)

UNDEFINED = float("nan")


@dataclass
class EvalReport:
    ap: dict                      # class -> AP, nan when the class has no GT
    gt_counts: dict
    det_counts: dict
    mAP: float
    gain: float | None = None

    def with_baseline(self, baseline_map: float) -> "EvalReport":
        return EvalReport(self.ap, self.gt_counts, self.det_counts, self.mAP, self.mAP - baseline_map)


@dataclass
class ErrorProfile:
    correct: float
    mislocalization: float
    background: float
    per_class: dict = field(default_factory=dict)   # class -> (correct, misloc, background)


def _boxes(items) -> np.ndarray:
    return np.asarray([tuple(b) for b in items], dtype=np.float64).reshape(-1, 4)


def _det_fields(d):
    """(box, category, score) from a Detection or a plain tuple."""
    if hasattr(d, "box"):
        return tuple(d.box), d.category, d.score
    return tuple(d[0]), d[1], d[2]


def match_detections(detections, ground_truths, category: int, iou_thresh: float):
    """Score-ordered TP flags for one class plus its GT count.

    Each detection claims the highest-IoU GT of its class in its image that is
    still unmatched; it is a true positive iff that IoU reaches ``iou_thresh``.
    """
    flat = []
    for img, dets in enumerate(detections):
        for order, d in enumerate(dets):
            box, k, score = _det_fields(d)
            if k == category:
                flat.append((score, img, order, box))
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    gt_by_image = [
        _boxes([b for b, k in gts if k == category]) for gts in ground_truths
    ]
    used = [np.zeros(len(g), dtype=bool) for g in gt_by_image]
    tp = np.zeros(len(flat), dtype=bool)
    scores = np.asarray([t[0] for t in flat])
    for i, (_, img, _, box) in enumerate(flat):
        gts = gt_by_image[img]
        if not len(gts):
            continue
        ious = iou_matrix(np.asarray([box]), gts)[0]
        ious[used[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            tp[i] = True
            used[img][j] = True
    n_gt = sum(len(g) for g in gt_by_image)
    return tp, scores, n_gt


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve.

    Each true positive adds a recall step of ``1 / n_gt`` at the best precision
    reached at that rank or later. The sum is accumulated as exact rationals and
    rounded once, so the value does not depend on summation order.
    """
    if n_gt == 0:
        return UNDEFINED
    tp = np.asarray(tp, dtype=bool)
    if not tp.any():
        return 0.0
    hits = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = hits / ranks
    # index of the suffix maximum of precision at every rank
    best = np.zeros(len(tp), dtype=np.int64)
    best[-1] = len(tp) - 1
    for i in range(len(tp) - 2, -1, -1):
        j = best[i + 1]
        best[i] = i if precision[i] >= precision[j] else j
    total = sum(Fraction(int(hits[best[i]]), int(ranks[best[i]])) for i in np.flatnonzero(tp))
    return float(total / n_gt)


def average_precision(detections, ground_truths, iou_thresh: float = 0.5, num_classes: int | None = None) -> EvalReport:
    """Per-class AP and mAP over images.

    ``detections[i]`` lists the detections of image ``i``; ``ground_truths[i]``
    lists its ``(box, category)`` pairs.
    """
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths must cover the same images")
    if num_classes is None:
        cats = [k for gts in ground_truths for _, k in gts] + [
            _det_fields(d)[1] for dets in detections for d in dets
        ]
        num_classes = max(cats) + 1 if cats else 0
    ap, gt_counts, det_counts = {}, {}, {}
    for k in range(num_classes):
        tp, _, n_gt = match_detections(detections, ground_truths, k, iou_thresh)
        ap[k] = ap_from_flags(tp, n_gt)
        gt_counts[k] = n_gt
        det_counts[k] = len(tp)
    defined = [v for v in ap.values() if not math.isnan(v)]
    m = float(np.mean(defined)) if defined else UNDEFINED
    return EvalReport(ap, gt_counts, det_counts, m)


def evaluate(model: DetectorModel, samples, score_thresh: float = 0.001, nms_iou: float = 0.3,
             iou_thresh: float = 0.5) -> tuple[EvalReport, list]:
    detections = [detect(model, s.image, score_thresh, nms_iou) for s in samples]
    report = average_precision(
        detections, [s.annotations for s in samples], iou_thresh, model.config.num_classes
    )
    return report, detections


# ------------------------------------------------------------------ error types

def error_analysis(detections, ground_truths, num_classes: int | None = None) -> ErrorProfile:
    """Bin each class's top-K detections (K = its GT count) by best IoU with a same-class GT.

    Correct: IoU >= 0.5; mislocalization: 0.3 <= IoU < 0.5; background: IoU < 0.3.
    Classes without GTs or without detections are skipped.
    """
    if num_classes is None:
        cats = [k for gts in ground_truths for _, k in gts]
        num_classes = max(cats) + 1 if cats else 0
    per_class = {}
    for k in range(num_classes):
        gt_by_image = [_boxes([b for b, c in gts if c == k]) for gts in ground_truths]
        n_gt = sum(len(g) for g in gt_by_image)
        if n_gt == 0:
            continue
        flat = []
        for img, dets in enumerate(detections):
            for order, d in enumerate(dets):
                box, c, score = _det_fields(d)
                if c == k:
                    flat.append((score, img, order, box))
        flat.sort(key=lambda t: (-t[0], t[1], t[2]))
        top = flat[:n_gt]
        if not top:
            continue
        counts = np.zeros(3)
        for _, img, _, box in top:
            gts = gt_by_image[img]
            best = iou_matrix(np.asarray([box]), gts)[0].max() if len(gts) else 0.0
            counts[0 if best >= 0.5 else 1 if best >= 0.3 else 2] += 1
        per_class[k] = tuple(100.0 * counts / len(top))
    if not per_class:
        return ErrorProfile(UNDEFINED, UNDEFINED, UNDEFINED, {})
    mean = np.mean(np.asarray(list(per_class.values())), axis=0)
    return ErrorProfile(float(mean[0]), float(mean[1]), float(mean[2]), per_class)


# ----------------------------------------------------------- proxy A-distance

def _fit_linear(x: np.ndarray, y: np.ndarray, loss: str, iters: int = 500, lr: float = 0.5, l2: float = 1e-3):
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    s = 2.0 * y - 1.0
    for _ in range(iters):
        z = x @ w + b
        if loss == "logistic":
            p = 1.0 / (1.0 + np.exp(-np.clip(z, -50, 50)))
            g = (p - y) / n
        elif loss == "hinge":
            g = np.where(s * z < 1.0, -s, 0.0) / n
        else:
            raise ValueError(f"unknown probe loss {loss!r}")
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum()
    return w, b


def proxy_a_distance(source_features, target_features, train_fraction: float = 0.8, seed=0,
                     loss: str = "logistic") -> tuple[float, float]:
    """``(d_A, eps)`` with ``d_A = 2 (1 - eps)``.

    ``eps`` is the held-out error of a linear probe separating the two sets,
    folded into [0, 0.5] (an anti-correlated probe is as informative as a
    correlated one).
    """
    xs = np.asarray(source_features, dtype=np.float64)
    xt = np.asarray(target_features, dtype=np.float64)
    if len(xs) < 20 or len(xt) < 20:
        raise ValueError("proxy_a_distance needs at least 20 vectors per domain")
    rng = np.random.default_rng(seed)
    ps, pt = rng.permutation(len(xs)), rng.permutation(len(xt))
    ns, nt = int(len(xs) * train_fraction), int(len(xt) * train_fraction)
    x_train = np.concatenate([xs[ps[:ns]], xt[pt[:nt]]])
    y_train = np.concatenate([np.zeros(ns), np.ones(nt)])
    x_test = np.concatenate([xs[ps[ns:]], xt[pt[nt:]]])
    y_test = np.concatenate([np.zeros(len(xs) - ns), np.ones(len(xt) - nt)])
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    w, b = _fit_linear((x_train - mu) / sd, y_train, loss)
    pred = ((x_test - mu) / sd @ w + b) > 0
    err = float(np.mean(pred != y_test.astype(bool)))
    eps = min(err, 1.0 - err)
    return 2.0 * (1.0 - eps), eps


def foreground_features(model: DetectorModel, samples) -> dict[int, np.ndarray]:
    """FC2 features of every ground-truth box, grouped by class."""
    groups: dict[int, list] = {k: [] for k in range(model.config.num_classes)}
    with no_grad():
        for s in samples:
            if not s.annotations:
                continue
            outputs = model.forward(s.image)
            rois = _boxes([b for b, _ in s.annotations])
            fc2, _, _ = roi_head_forward(model, outputs.features[-1], rois)
            for row, (_, k) in zip(fc2.data, s.annotations):
                groups[k].append(row)
    return {k: np.asarray(v).reshape(-1, model.config.fc_dim) for k, v in groups.items()}


def per_class_a_distance(model: DetectorModel, source_samples, target_samples, seed=0, loss="logistic"):
    """Per-class and pooled ``d_A`` on ground-truth foreground features.

    Classes with fewer than 20 boxes in either domain are left out; the pooled
    value is NaN when the domains themselves are that small.
    """
    fs = foreground_features(model, source_samples)
    ft = foreground_features(model, target_samples)
    out = {}
    for k in fs:
        if len(fs[k]) >= 20 and len(ft[k]) >= 20:
            out[k] = proxy_a_distance(fs[k], ft[k], seed=seed, loss=loss)[0]
    xs, xt = np.concatenate(list(fs.values())), np.concatenate(list(ft.values()))
    if len(xs) < 20 or len(xt) < 20:
        log.warning("per_class_a_distance: %d source / %d target boxes, pooled d_A undefined", len(xs), len(xt))
        return out, UNDEFINED
    return out, proxy_a_distance(xs, xt, seed=seed, loss=loss)[0]


# ------------------------------------------------------------------- attention

def attention_image(attention: np.ndarray, height: int, width: int) -> np.ndarray:
    """Upsample an attention map to image size and quantize [0, 1] -> [0, 255]."""
    up = bilinear_upsample(Tensor(np.asarray(attention, dtype=np.float64)), height, width).data
    return np.round(np.clip(up, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_attention(model: DetectorModel, image, out_path) -> Path:
    image = np.asarray(image, dtype=np.float64)
    with no_grad():
        outputs = model.forward(image)
    attention = compute_attention(outputs.f_rpn)
    out_path = Path(out_path)
    try:
        write_pgm(out_path, attention_image(attention.filtered, *image.shape[1:]))
    except OSError as exc:
        raise OSError(f"cannot write attention map to {out_path}: {exc}") from None
    return out_path


# -------------------------------------------------------------------- reports

def write_eval_csv(report: EvalReport, path) -> Path:
    lines = ["class,ap,gt_count,det_count"]
    for k in sorted(report.ap):
        lines.append(f"{k},{report.ap[k]!r},{report.gt_counts[k]},{report.det_counts[k]}")
    lines.append(f"mAP,{report.mAP!r}")
    if report.gain is not None:
        lines.append(f"gain,{report.gain!r}")
    path = Path(path)
    _write(path, lines)
    return path


def _write(path: Path, lines):
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_errors_csv(profile: ErrorProfile, path) -> Path:
    lines = ["class,correct_pct,misloc_pct,background_pct"]
    for k in sorted(profile.per_class):
        c, m, b = profile.per_class[k]
        lines.append(f"{k},{c!r},{m!r},{b!r}")
    lines.append(f"mean,{profile.correct!r},{profile.mislocalization!r},{profile.background!r}")
    path = Path(path)
    _write(path, lines)
    return path
