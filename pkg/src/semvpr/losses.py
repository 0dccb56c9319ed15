"""Triplet, segmentation, discriminator and adversarial losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

IGNORE_LABEL = 255


@dataclass
class LossWeights:
    margin: float = 0.1
    alpha: float = 0.5
    beta: float = 0.0005
    gamma: float = 0.5

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def vpr_loss(fq: Tensor, fp: Tensor, fn: Tensor, margin: float) -> Tensor:
    """Hinge on d(q, p) + m - d(q, n) with Euclidean d."""
    if not (fq.shape == fp.shape == fn.shape):
        raise DimensionError(f"descriptor shapes differ: {fq.shape}, {fp.shape}, {fn.shape}")
    d_pos = T.euclidean_distance(fq, fp)
    d_neg = T.euclidean_distance(fq, fn)
    return T.relu(d_pos + margin - d_neg)


def semseg_loss(logits: Tensor, labels: np.ndarray, ignore: int = IGNORE_LABEL) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels.

    ``logits`` is K x H x W (or N x K x H x W); ``labels`` matches without the
    class axis.
    """
    labels = np.asarray(labels)
    k = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("every pixel is ignored; the mean cross-entropy is undefined")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label ids outside [0, {k}) present")
    onehot = np.zeros(logits.shape)
    safe = np.where(valid, labels, 0).astype(np.int64)
    np.put_along_axis(onehot, np.expand_dims(safe, -3), np.expand_dims(valid, -3).astype(np.float64), axis=-3)
    logp = T.log_softmax(logits, axis=-3)
    return T.mul(T.sum_(T.mul(logp, onehot)), -1.0 / n_valid)


def combined_loss(l_vpr: Tensor, l_seg, alpha: float) -> Tensor:
    """L_vpr + alpha * L_seg.

    Keeping segmentation gradients out of the attention module is the caller's
    job: the segmentation branch must be fed a detached attention map.
    """
    if l_seg is None or alpha == 0:
        return l_vpr
    return l_vpr + T.mul(l_seg, alpha)


def _check_scores(scores: Tensor, what: str) -> None:
    d = scores.data
    if not np.all((d > 0) & (d < 1)):
        raise ValueError(f"{what} scores must lie strictly inside (0, 1)")


def discr_loss(ds: Tensor, dt: Tensor) -> Tensor:
    """Binary cross-entropy with source labelled 1 and target labelled 0."""
    _check_scores(ds, "source")
    _check_scores(dt, "target")
    return -(T.mean(T.log(ds)) + T.mean(T.log(1.0 - dt)))


def adv_loss(dt: Tensor) -> Tensor:
    """Cross-entropy of target scores against the source label."""
    _check_scores(dt, "target")
    return -T.mean(T.log(dt))


def total_loss(l_vpr_semseg: Tensor, l_adv, l_discr, beta: float, gamma: float) -> Tuple[Tensor, Tensor]:
    """Split the overall objective into (main-model objective, discriminator objective)."""
    main = l_vpr_semseg
    if l_adv is not None and beta != 0:
        main = main + T.mul(l_adv, beta)
    disc = T.mul(l_discr, gamma) if l_discr is not None else None
    return main, disc
