"""Class prototypes and similarity-gated global prototype alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ShapeError, no_grad, take

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class LocalPrototypes:
    vectors: dict = field(default_factory=dict)   # category -> Tensor[D]
    counts: dict = field(default_factory=dict)    # category -> contributing regions

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, k):
        return k in self.vectors


@dataclass
class PrototypeBank:
    domain: str
    vectors: np.ndarray                 # [C, D]
    initialized: np.ndarray             # [C] bool
    live: dict = field(default_factory=dict)   # category -> Tensor updated this step

    @classmethod
    def empty(cls, domain: str, num_classes: int, dim: int) -> "PrototypeBank":
        return cls(domain, np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool))

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.domain, self.vectors.copy(), self.initialized.copy(), dict(self.live))

    def detach(self) -> "PrototypeBank":
        return PrototypeBank(self.domain, self.vectors.copy(), self.initialized.copy())

    def prototype(self, k: int) -> Tensor:
        if not self.initialized[k]:
            raise KeyError(f"prototype {k} of the {self.domain} bank is not initialized")
        return self.live.get(k, Tensor(self.vectors[k]))


def _group_means(features: Tensor, labels: np.ndarray) -> LocalPrototypes:
    out = LocalPrototypes()
    for k in np.unique(labels):
        rows = np.flatnonzero(labels == k)
        out.vectors[int(k)] = take(features, rows).mean(axis=0)
        out.counts[int(k)] = len(rows)
    return out


def source_local_prototypes(fc2_features: Tensor, region_labels) -> LocalPrototypes:
    """Per-class mean of ground-truth region features."""
    labels = np.asarray(region_labels, dtype=np.int64).reshape(-1)
    if fc2_features.shape[0] != len(labels):
        raise ShapeError(f"{fc2_features.shape[0]} features for {len(labels)} labels")
    return _group_means(fc2_features, labels)


def pseudo_labels(class_scores, score_thresh: float) -> np.ndarray:
    """Foreground class per RoI, or -1 for background argmax / low confidence."""
    scores = class_scores.data if isinstance(class_scores, Tensor) else np.asarray(class_scores)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    best = scores.argmax(axis=1)
    conf = scores[np.arange(len(scores)), best]
    return np.where((best > 0) & (conf >= score_thresh), best - 1, -1)


def target_local_prototypes(fc2_features: Tensor, class_scores, score_thresh: float = 0.8) -> LocalPrototypes:
    """Per-class mean over confidently pseudo-labelled target RoIs."""
    labels = pseudo_labels(class_scores, score_thresh)
    keep = np.flatnonzero(labels >= 0)
    if not len(keep):
        return LocalPrototypes()
    return _group_means(take(fc2_features, keep), labels[keep])


def similarity(a, b) -> float:
    """Cosine similarity rescaled to [0, 1]."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        raise ValueError("similarity is undefined for near-zero vectors")
    cos = float(a @ b) / (na * nb)
    return (min(1.0, max(-1.0, cos)) + 1.0) / 2.0


def update_global(bank: PrototypeBank, local: LocalPrototypes) -> PrototypeBank:
    """Blend each local prototype into the bank with gate alpha = similarity.

    The previous global vector and alpha are constants; the returned bank keeps
    the blended tensors in ``live`` so a loss can backpropagate into the
    current batch's contribution.
    """
    new = bank.copy()
    for k, p in local.vectors.items():
        if p.shape != (bank.vectors.shape[1],):
            raise ShapeError(f"prototype {k} has shape {p.shape}, bank expects ({bank.vectors.shape[1]},)")
        if not bank.initialized[k]:
            new.vectors[k] = p.data
            new.initialized[k] = True
            new.live[k] = p
            continue
        old = bank.vectors[k]
        if np.linalg.norm(p.data) < NORM_EPS or np.linalg.norm(old) < NORM_EPS:
            continue
        alpha = similarity(p.data, old)
        blended = p * alpha + (1.0 - alpha) * old
        new.vectors[k] = blended.data
        new.live[k] = blended
    return new


def psa_loss(src: PrototypeBank, tgt: PrototypeBank) -> Tensor:
    """Sum of squared L2 distances between commonly initialized prototypes."""
    if src.vectors.shape != tgt.vectors.shape:
        raise ShapeError("prototype banks differ in shape")
    common = np.flatnonzero(src.initialized & tgt.initialized)
    if not len(common):
        log.warning("psa_loss: no category initialized in both banks")
        return Tensor(0.0)
    total = None
    for k in common:
        diff = src.prototype(int(k)) - tgt.prototype(int(k))
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total


def init_global_prototypes(model, source_dataset, target_dataset, score_thresh: float = 0.8):
    """Initial banks from one pass of a source-trained model over both datasets.

    Each initialized prototype is the mean over every contributing region of
    the whole dataset.
    """
    from .detector import propose, roi_head_forward

    num_classes = model.config.num_classes
    dim = model.config.fc_dim
    banks = []
    for domain, dataset in (("source", source_dataset), ("target", target_dataset)):
        sums = np.zeros((num_classes, dim))
        counts = np.zeros(num_classes)
        with no_grad():
            for sample in dataset:
                outputs = model.forward(sample.image)
                if domain == "source":
                    anns = sample.annotations
                    if not anns:
                        continue
                    rois = np.asarray([tuple(b) for b, _ in anns], dtype=np.float64)
                    labels = np.asarray([k for _, k in anns])
                    fc2, _, _ = roi_head_forward(model, outputs.features[-1], rois)
                else:
                    rois, _ = propose(model, outputs)
                    fc2, scores, _ = roi_head_forward(model, outputs.features[-1], rois)
                    labels = pseudo_labels(scores, score_thresh)
                for k in range(num_classes):
                    rows = labels == k
                    sums[k] += fc2.data[rows].sum(axis=0)
                    counts[k] += rows.sum()
        bank = PrototypeBank.empty(domain, num_classes, dim)
        seen = counts > 0
        bank.vectors[seen] = sums[seen] / counts[seen, None]
        bank.initialized = seen
        banks.append(bank)
    return banks[0], banks[1]
