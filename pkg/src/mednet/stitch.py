"""Whole-mosaic inference by Gaussian-weighted overlap of patch predictions.

Patches are taken on a border-clamped stride grid, predicted in eval mode,
weighted by a centered Gaussian, and accumulated; the label map is the
per-pixel argmax of the weighted sum (ties go to the lowest class index).
Accumulation runs in row-major patch order, so results are reproducible to
the bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Mosaic, _axis_origins
from .errors import DomainError


def gaussian_mask(size: int, sigma: float | None = None) -> np.ndarray:
    """Isotropic Gaussian with peak 1 at the patch center (size-1)/2."""
    if size < 1:
        raise DomainError(f"mask size must be >= 1, got {size}")
    if sigma is None:
        sigma = size / 2.0
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    c = (size - 1) / 2.0
    r = (np.arange(size) - c) ** 2
    return np.exp(-(r[:, None] + r[None, :]) / (2.0 * sigma * sigma))


@dataclass
class AccumulatorGrid:
    """Weighted probability sums plus weight and contribution tallies."""

    prob_sum: np.ndarray      # (K,H,W)
    weight_sum: np.ndarray    # (H,W)
    contributions: np.ndarray  # (H,W) int, patches covering each pixel

    @classmethod
    def empty(cls, classes: int, height: int, width: int) -> "AccumulatorGrid":
        return cls(prob_sum=np.zeros((classes, height, width)),
                   weight_sum=np.zeros((height, width)),
                   contributions=np.zeros((height, width), dtype=np.int64))

    def add(self, probs: np.ndarray, origin: tuple[int, int], mask: np.ndarray) -> None:
        r, c = origin
        s = mask.shape[0]
        self.prob_sum[:, r:r + s, c:c + s] += probs * mask
        self.weight_sum[r:r + s, c:c + s] += mask
        self.contributions[r:r + s, c:c + s] += 1


@dataclass
class StitchResult:
    probabilities: np.ndarray   # (K,H,W), weighted average, sums to 1 per pixel
    labels: np.ndarray          # (H,W) uint8 argmax
    weight_sum: np.ndarray
    contributions: np.ndarray


def stitch(m: Mosaic, net, patch: int = 256, stride: int = 32,
           sigma: float | None = None, batch: int = 8) -> StitchResult:
    """Predict overlapping patches of ``m.image`` and blend them.

    ``net`` is anything with ``predict_batch((N,S,S) uint8) -> (N,K,S,S)``,
    or a bare callable with that signature.
    """
    H, W = m.image.shape
    if patch > min(H, W):
        raise DomainError(f"mosaic {H}x{W} smaller than one {patch}px patch")
    if stride < 1:
        raise DomainError(f"stride must be positive, got {stride}")
    predict = getattr(net, "predict_batch", net)
    mask = gaussian_mask(patch, sigma)
    origins = [(r, c) for r in _axis_origins(H, patch, stride)
               for c in _axis_origins(W, patch, stride)]
    acc: AccumulatorGrid | None = None
    for i in range(0, len(origins), batch):
        chunk = origins[i:i + batch]
        tiles = np.stack([m.image[r:r + patch, c:c + patch] for r, c in chunk])
        probs = predict(tiles)
        if acc is None:
            acc = AccumulatorGrid.empty(probs.shape[1], H, W)
        for (r, c), p in zip(chunk, probs):
            acc.add(p, (r, c), mask)
    labels = np.argmax(acc.prob_sum, axis=0).astype(np.uint8)  # ties: lowest index
    return StitchResult(probabilities=acc.prob_sum / acc.weight_sum[None],
                        labels=labels, weight_sum=acc.weight_sum,
                        contributions=acc.contributions)


def save_probability_planes(stem: str, probs: np.ndarray) -> None:
    """Raw little-endian float64 planes plus a one-line shape manifest."""
    with open(f"{stem}.probs.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(probs, dtype="<f8").tobytes())
    with open(f"{stem}.probs.txt", "w") as fh:
        fh.write("mednet-probs v1 float64-le " +
                 "x".join(str(d) for d in probs.shape) + "\n")
