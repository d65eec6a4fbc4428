"""Partial-label segmentation losses over the autodiff tensor core.

The main training loss per level is a soft-Dice variant with an added
true-negative agreement term (class-presence symmetric), plus a total
variation penalty on the predicted probability field.  Pixels marked ignore
are excluded from every Dice sum but not from TV: TV regularizes the
prediction itself, including unlabeled regions.  Batch reduction is the mean
over items of per-item values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError

IGNORE = 255


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1e-6     # TV weight
    epsilon: float = 1e-7   # denominator guard

    def __post_init__(self):
        if self.gamma < 0 or self.epsilon <= 0:
            raise DomainError("gamma must be >= 0 and epsilon > 0")


@dataclass
class MaskedTarget:
    """One-hot labels (zero vectors at ignored pixels) plus the valid mask."""

    one_hot: Tensor      # (B,K,H,W) in {0,1}
    valid_mask: Tensor   # (B,1,H,W) in {0,1}


def one_hot_encode(labels: np.ndarray, classes: int, ignore_value: int = IGNORE) -> MaskedTarget:
    """Integer label map (B,H,W) to e_k vectors; ignore becomes zeros + mask 0."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DomainError(f"expected (B,H,W) labels, got shape {labels.shape}")
    valid = labels != ignore_value
    bad = valid & ((labels < 0) | (labels >= classes))
    if bad.any():
        raise DomainError(
            f"label {int(labels[bad].flat[0])} outside [0,{classes}) and != {ignore_value}")
    one_hot = (labels[:, None] == np.arange(classes)[None, :, None, None]) & valid[:, None]
    return MaskedTarget(one_hot=Tensor(one_hot.astype(np.float64)),
                        valid_mask=Tensor(valid[:, None].astype(np.float64)))


def _masked_dice_terms(target: MaskedTarget, pred: Tensor, epsilon: float,
                       with_negative: bool) -> Tensor:
    if pred.shape != target.one_hot.shape:
        raise DomainError(
            f"pred shape {pred.shape} vs target {target.one_hot.shape}")
    B, K, _, _ = pred.shape
    mv = target.valid_mask.values
    if (mv.sum(axis=(1, 2, 3)) == 0).any():
        warnings.warn("batch item with no labeled pixels contributes the 2K limit value")
    mask_k = Tensor(np.broadcast_to(mv, pred.shape).copy())
    lab = target.one_hot
    pv = ad.elementwise_mul(pred, mask_k)                 # Y restricted to valid
    axes = (2, 3)

    def dice_term(a: Tensor, b: Tensor) -> Tensor:
        num = ad.reduce_sum(ad.elementwise_mul(a, b), axes=axes)
        den = ad.add(ad.add(ad.reduce_sum(ad.elementwise_mul(a, a), axes=axes),
                            ad.reduce_sum(ad.elementwise_mul(b, b), axes=axes)),
                     epsilon)
        return ad.sub(1.0, ad.div(ad.elementwise_mul(num, 2.0), den))   # (B,K)

    total = dice_term(lab, pv)
    if with_negative:
        lab_c = ad.sub(mask_k, lab)        # (1-L) at valid pixels, 0 elsewhere
        pv_c = ad.sub(mask_k, pv)          # (1-Y) at valid pixels, 0 elsewhere
        total = ad.add(total, dice_term(lab_c, pv_c))
    return ad.reduce_mean(ad.reduce_sum(total, axes=1))   # sum classes, mean batch


def mdsc(target: MaskedTarget, pred: Tensor, epsilon: float = 1e-7) -> Tensor:
    """Soft-Dice with true-negative term; 0 at exact match, 2K at classwise swap."""
    return _masked_dice_terms(target, pred, epsilon, with_negative=True)


def dice_loss(target: MaskedTarget, pred: Tensor, epsilon: float = 1e-7) -> Tensor:
    """Plain masked soft-Dice (positive-agreement term only), ablation comparator."""
    return _masked_dice_terms(target, pred, epsilon, with_negative=False)


def tv(pred: Tensor) -> Tensor:
    """Total variation: forward-neighbor L1 differences, no wraparound."""
    if pred.ndim != 4:
        raise DomainError(f"expected (B,K,H,W), got {pred.shape}")
    B = pred.shape[0]
    dy = ad.sub(ad.crop2d(pred, top=1), ad.crop2d(pred, bottom=1))
    dx = ad.sub(ad.crop2d(pred, left=1), ad.crop2d(pred, right=1))
    total = ad.add(ad.reduce_sum(ad.absolute(dy)), ad.reduce_sum(ad.absolute(dx)))
    return ad.elementwise_mul(total, 1.0 / B)


def cross_entropy(target: MaskedTarget, pred: Tensor) -> Tensor:
    """Masked pixelwise cross-entropy, ablation comparator; ignored pixels zeroed."""
    if pred.shape != target.one_hot.shape:
        raise DomainError(
            f"pred shape {pred.shape} vs target {target.one_hot.shape}")
    counts = target.valid_mask.values.sum(axis=(1, 2, 3))
    log_p = ad.log(ad.add(pred, 1e-12))
    per_item = ad.reduce_sum(ad.elementwise_mul(target.one_hot, log_p), axes=(1, 2, 3))
    scale = Tensor(-1.0 / np.maximum(counts, 1.0))
    return ad.reduce_mean(ad.elementwise_mul(per_item, scale))


def level_loss(target: MaskedTarget, pred: Tensor, cfg: LossConfig) -> Tensor:
    """Per-scale loss: masked soft-Dice-with-TN plus gamma-weighted TV."""
    loss = mdsc(target, pred, cfg.epsilon)
    if cfg.gamma:
        loss = ad.add(loss, ad.elementwise_mul(tv(pred), cfg.gamma))
    return loss


def total_loss(targets: list[MaskedTarget], preds: list[Tensor], cfg: LossConfig) -> Tensor:
    """Deep-supervised total: sum of level losses across all scales."""
    if len(targets) != len(preds) or not targets:
        raise DomainError(f"{len(targets)} targets vs {len(preds)} predictions")
    loss = level_loss(targets[0], preds[0], cfg)
    for t, p in zip(targets[1:], preds[1:]):
        loss = ad.add(loss, level_loss(t, p, cfg))
    return loss
