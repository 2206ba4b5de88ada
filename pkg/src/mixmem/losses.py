"""First-stage training objectives: contrastive alignment and multi-label
classification, composed into one weighted loss with a per-term breakdown."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, LabelError


@dataclass
class Stage1Weights:
    tau: float = 0.07
    lambda_action: float = 0.1
    lambda_cls: float = 10.0
    focal_gamma: float = 2.0
    focal_mix: float = 0.5

    def validate(self):
        if self.tau <= 0:
            raise DimensionError("tau must be positive")
        if not 0.0 <= self.focal_mix <= 1.0:
            raise DimensionError("focal_mix must lie in [0, 1]")
        return self


@dataclass
class Stage1Batch:
    """One training batch in raw embedding space.

    frames holds per-frame image embeddings [B, F, d_clip]; labels is a
    {0,1} multi-hot array [B, n_classes].
    """

    signals: T.Tensor
    frames: T.Tensor
    text: T.Tensor
    action: T.Tensor
    labels: np.ndarray

    @property
    def size(self):
        return self.signals.shape[0]


def info_nce(anchors, targets, tau, symmetric=False):
    """Temperature-scaled contrastive loss, anchors against in-batch targets.

    Rows are L2-normalized internally, so the logits are cosine similarities
    over tau.  One-directional by default; `symmetric` averages the two
    directions and stays off everywhere in this package.
    """
    anchors, targets = T.astensor(anchors), T.astensor(targets)
    if anchors.ndim != 2 or targets.ndim != 2 or anchors.shape != targets.shape:
        raise DimensionError(
            f"info_nce expects matching [B, d], got {anchors.shape} and {targets.shape}")
    B = anchors.shape[0]
    if B == 0:
        raise DimensionError("info_nce on an empty batch")
    logits = T.mul(T.matmul(T.l2_normalize_rows(anchors),
                            T.transpose(T.l2_normalize_rows(targets))), 1.0 / tau)
    diag = np.arange(B)[:, None]
    loss = T.neg(T.tmean(T.gather_last(T.log_softmax(logits, axis=-1), diag)))
    if symmetric:
        other = T.neg(T.tmean(T.gather_last(T.log_softmax(T.transpose(logits), axis=-1), diag)))
        loss = T.mul(T.add(loss, other), 0.5)
    return loss


def clip_loss(f_c, img, txt, tau):
    """Alignment of the global token with consolidated image and text targets."""
    return T.add(info_nce(f_c, img, tau), info_nce(f_c, txt, tau))


def action_loss(f_a, act, tau):
    return info_nce(f_a, act, tau)


def cls_loss(logits, labels, gamma=2.0, focal_mix=0.5):
    """Multi-label objective mixing plain BCE with a focal term.

    p = sigmoid(logit), clamped to [1e-7, 1-1e-7].  The focal term scales
    each side of the BCE by (1-p)^gamma / p^gamma so well-classified entries
    contribute less.  Mean over every batch-class cell.

    Computed in float64 regardless of input dtype: the upper clamp bound
    1-1e-7 is not representable in float32 (it rounds to 1.0, letting
    log(1-p) hit -inf on saturated logits).
    """
    logits = T.cast(T.astensor(logits), np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise DimensionError(f"cls_loss shapes differ: {logits.shape} vs {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("labels must be exactly 0 or 1")
    y = T.Tensor(y)
    one = 1.0
    p = T.clip(T.sigmoid(logits), 1e-7, 1.0 - 1e-7)
    log_p, log_q = T.log(p), T.log(T.sub(one, p))
    pos, neg = y, T.sub(one, y)
    bce = T.neg(T.add(T.mul(pos, log_p), T.mul(neg, log_q)))
    focal = T.neg(T.add(T.mul(T.mul(pos, T.pow_const(T.sub(one, p), gamma)), log_p),
                        T.mul(T.mul(neg, T.pow_const(p, gamma)), log_q)))
    return T.tmean(T.add(T.mul(bce, 1.0 - focal_mix), T.mul(focal, focal_mix)))


def stage1_terms(model, batch: Stage1Batch, weights: Stage1Weights, encoding=None):
    """Forward the model over a batch and return the three raw loss terms."""
    enc = model.encode_batch(batch.signals) if encoding is None else encoding
    img_hat = model.consolidate_frames(batch.frames)
    l_clip = clip_loss(enc.global_token, img_hat, batch.text, weights.tau)
    l_action = action_loss(model.action_project(enc.global_token), batch.action, weights.tau)
    l_cls = cls_loss(model.classify(enc.global_token), batch.labels,
                     weights.focal_gamma, weights.focal_mix)
    return l_clip, l_action, l_cls


def stage1_loss(batch: Stage1Batch, model, weights: Stage1Weights, encoding=None):
    """Weighted first-stage total; returns (scalar Tensor, breakdown dict)."""
    l_clip, l_action, l_cls = stage1_terms(model, batch, weights, encoding)
    total = T.add(l_clip, T.add(T.mul(l_action, weights.lambda_action),
                                T.mul(l_cls, weights.lambda_cls)))
    breakdown = {"clip": float(l_clip.data), "action": float(l_action.data),
                 "cls": float(l_cls.data)}
    return total, breakdown
