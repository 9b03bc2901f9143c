"""Attention-weighted multi-block adversarial alignment.

The RPN conv feature gives a foreground attention map; per-block pixel-wise
domain classifiers sit behind a gradient reversal layer, and every pixel's
adversarial loss is weighted by ``1 + upsampled attention``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    binary_cross_entropy,
    bilinear_upsample,
    conv2d,
    gradient_reverse,
    parameter,
    relu,
    sigmoid,
)

SOURCE, TARGET = "source", "target"


@dataclass
class AttentionMap:
    pre_filter: np.ndarray   # sigmoid of the channel-mean absolute activation
    threshold: float         # spatial mean of pre_filter
    filtered: np.ndarray     # pre_filter where it strictly exceeds threshold, else 0


def compute_attention(f_rpn) -> AttentionMap:
    """Foreground attention from an RPN feature map ``[1, C, H, W]`` (or ``[C, H, W]``).

    The result is a constant: no gradient flows back into the RPN through it.
    """
    data = f_rpn.data if isinstance(f_rpn, Tensor) else np.asarray(f_rpn, dtype=np.float64)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ShapeError("compute_attention handles one image at a time")
        data = data[0]
    if data.ndim != 3 or data.shape[0] < 1:
        raise ShapeError(f"expected [C, H, W] features, got {data.shape}")
    m = 1.0 / (1.0 + np.exp(-np.abs(data).mean(axis=0)))
    t = float(np.clip(m.mean(), m.min(), m.max()))
    return AttentionMap(m, t, np.where(_above_mean(m, t), m, 0.0))


def _above_mean(m: np.ndarray, approx_mean: float) -> np.ndarray:
    """``m > mean(m)`` decided exactly.

    The float mean can be off by a few ulps (a uniform map would otherwise get
    attention), so cells that close to it are settled in rational arithmetic.
    """
    above = m > approx_mean
    close = np.abs(m - approx_mean) <= 1e-12
    if close.any():
        total = sum(map(Fraction, m.ravel().tolist()))
        for idx in zip(*np.nonzero(close)):
            above[idx] = Fraction(float(m[idx])) * m.size > total
    return above


class DomainClassifier:
    """Pixel-wise domain classifier: 1x1 conv, relu, 1x1 conv, sigmoid.

    Output is the per-location probability that the feature comes from the
    source domain.
    """

    def __init__(self, in_channels: int, hidden: int = 16, rng: np.random.Generator | None = None, prefix: str = "d"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = {
            f"{prefix}.w1": parameter(rng.normal(0, np.sqrt(2.0 / in_channels), (hidden, in_channels, 1, 1))),
            f"{prefix}.b1": parameter(np.zeros(hidden)),
            f"{prefix}.w2": parameter(rng.normal(0, np.sqrt(1.0 / hidden), (1, hidden, 1, 1))),
            f"{prefix}.b2": parameter(np.zeros(1)),
        }
        self._names = list(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, features: Tensor) -> Tensor:
        w1, b1, w2, b2 = (self.params[n] for n in self._names)
        return sigmoid(conv2d(relu(conv2d(features, w1, b1)), w2, b2))


def make_classifiers(channels, rng: np.random.Generator, hidden: int = 16) -> list[DomainClassifier]:
    return [DomainClassifier(c, hidden, rng, prefix=f"domain{i}") for i, c in enumerate(channels, start=1)]


def adversarial_loss_map(features: Tensor, classifier: DomainClassifier, domain: str, grl_coeff: float = 1.0) -> Tensor:
    """Per-location BCE of the domain classifier, ``[H, W]``.

    Source pixels pay ``-log p`` and target pixels ``-log(1 - p)``. The
    classifier descends this loss; the backbone, behind the gradient reversal,
    ascends it.
    """
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"domain must be {SOURCE!r} or {TARGET!r}")
    p = classifier(gradient_reverse(features, grl_coeff))
    _, _, h, w = p.shape
    target = np.ones((h, w)) if domain == SOURCE else np.zeros((h, w))
    return binary_cross_entropy(p.reshape(h, w), target, reduction="none")


def attention_weights(attention: AttentionMap | np.ndarray | None, height: int, width: int) -> np.ndarray:
    """``1 + U(A)`` at the given block size; all ones when attention is None."""
    if attention is None:
        return np.ones((height, width))
    a = attention.filtered if isinstance(attention, AttentionMap) else np.asarray(attention, dtype=np.float64)
    if height < a.shape[0] or width < a.shape[1]:
        raise ValueError(f"block {height}x{width} is smaller than the attention map {a.shape}")
    return 1.0 + bilinear_upsample(Tensor(a), height, width).data


def art_loss(loss_maps, attention, normalize: bool = False) -> Tensor:
    """Sum over blocks and pixels of ``(1 + U_l(A)) * loss``.

    With ``normalize`` each block's weighted sum is divided by its pixel count,
    so blocks of different resolution contribute on the same scale.
    """
    total = None
    for loss_map in loss_maps:
        h, w = loss_map.shape
        weighted = (loss_map * attention_weights(attention, h, w)).sum()
        if normalize:
            weighted = weighted * (1.0 / (h * w))
        total = weighted if total is None else total + weighted
    return Tensor(0.0) if total is None else total
