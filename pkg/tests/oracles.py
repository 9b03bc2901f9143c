"""Independent reference implementations used by the tests.

These are deliberately naive (explicit loops, enumeration) and share no code
with the package.
"""

import itertools
from fractions import Fraction

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o]
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[i, ci, r * stride + u, c * stride + v]
                    out[i, o, r, c] = acc
    return out


def dense_loops(x, w, b):
    n, din = x.shape
    dout = w.shape[0]
    out = np.zeros((n, dout))
    for i in range(n):
        for j in range(dout):
            out[i, j] = b[j] + sum(w[j, k] * x[i, k] for k in range(din))
    return out


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_bruteforce(boxes, scores, thresh):
    """The greedy-NMS keep set, found by enumerating all subsets.

    A subset is the greedy result iff every kept box overlaps no higher-scored
    kept box above ``thresh`` and every dropped box overlaps some higher-scored
    kept box above ``thresh``.
    """
    n = len(boxes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    rank = {i: r for r, i in enumerate(order)}
    for size in range(n, -1, -1):
        for keep in itertools.combinations(range(n), size):
            ks = set(keep)
            ok = True
            for i in range(n):
                suppressed = any(
                    rank[j] < rank[i] and box_iou(boxes[i], boxes[j]) > thresh for j in ks
                )
                if (i in ks) == suppressed:
                    ok = False
                    break
            if ok:
                return sorted(ks, key=lambda i: rank[i])
    raise AssertionError("no consistent keep set")


def ap_bruteforce(tp_flags, n_gt):
    """All-point AP in exact arithmetic: each TP adds 1/n_gt at the best precision at its rank or beyond."""
    if n_gt == 0:
        return float("nan")
    k = len(tp_flags)
    prec = [Fraction(sum(tp_flags[: i + 1]), i + 1) for i in range(k)]
    ap = Fraction(0)
    for i in range(k):
        if tp_flags[i]:
            ap += max(prec[i:])
    return float(ap / n_gt)


def groupby_mean(features, labels):
    out = {}
    for k in sorted(set(labels)):
        rows = [f for f, l in zip(features, labels) if l == k]
        out[k] = np.sum(rows, axis=0) / len(rows)
    return out


def match_flags(dets, gts, thresh):
    """Score-ordered TP flags for one class.

    ``dets``: list of (image, box, score); ``gts``: image -> list of boxes. Each
    detection takes the highest-IoU GT of its image not yet taken.
    """
    taken = {img: [False] * len(boxes) for img, boxes in gts.items()}
    flags = []
    for img, box, _ in sorted(dets, key=lambda d: -d[2]):
        best, best_j = -1.0, None
        for j, g in enumerate(gts.get(img, [])):
            if not taken[img][j]:
                v = box_iou(box, g)
                if v > best:
                    best, best_j = v, j
        if best_j is not None and best >= thresh:
            taken[img][best_j] = True
            flags.append(1)
        else:
            flags.append(0)
    return flags


def error_bins(dets, gts, k_top):
    """Percent (correct, misloc, background) of the ``k_top`` best detections of one class."""
    top = sorted(dets, key=lambda d: -d[2])[:k_top]
    counts = [0, 0, 0]
    for img, box, _ in top:
        best = max((box_iou(box, g) for g in gts.get(img, [])), default=0.0)
        counts[0 if best >= 0.5 else 1 if best >= 0.3 else 2] += 1
    return [100.0 * c / len(top) for c in counts]


def read_checkpoint_raw(raw):
    """name -> raw value bytes, parsed straight from the documented layout."""
    import struct

    assert raw[:4] == b"CFFA"
    _, count = struct.unpack_from("<II", raw, 4)
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + n].decode()
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        size = 8 * int(np.prod(dims)) if rank else 8
        out[name] = (dims, raw[pos:pos + size])
        pos += size
    assert pos == len(raw)
    return out


def above_mean_exact(m):
    """Boolean mask of ``m > mean(m)`` in exact rational arithmetic."""
    values = [Fraction(float(v)) for v in np.ravel(m)]
    mean = sum(values) / len(values)
    return np.array([v > mean for v in values]).reshape(np.shape(m))
