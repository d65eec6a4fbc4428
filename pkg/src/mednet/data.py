"""Mosaic I/O, resolution reduction, tiling, cropping, and augmentation.

Images are 8-bit grayscale; label maps use 0..K-1 plus 255 for ignore.
Geometric augmentations compose into a single affine matrix applied once
(bilinear for the image, nearest-neighbor for labels), so image and labels
stay congruent by construction.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DomainError, IOFailure
from .losses import IGNORE


@dataclass
class Mosaic:
    """One large grayscale image with a congruent integer label map."""

    image: np.ndarray            # uint8 (H,W)
    labels: np.ndarray           # uint8 (H,W), values in [0,K) or 255
    microns_per_pixel: float
    id: str

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise DomainError(
                f"image {self.image.shape} vs labels {self.labels.shape} extents differ")
        if self.image.dtype != np.uint8 or self.labels.dtype != np.uint8:
            raise DomainError("mosaic planes must be 8-bit")


@dataclass
class Window:
    """One tile of a mosaic; image/labels are views into the parent arrays."""

    mosaic_id: str
    index: int
    origin: tuple[int, int]
    image: np.ndarray
    labels: np.ndarray


@dataclass
class Patch:
    """Network-sized training example."""

    image: np.ndarray    # uint8 (S,S)
    labels: np.ndarray   # uint8 (S,S)


@dataclass(frozen=True)
class AugmentationConfig:
    """Magnitudes of the six augmentations; defaults are the training recipe."""

    max_rotation_deg: float = 180.0
    flips: bool = True
    intensity_range: tuple[float, float] = (-20.0, 20.0)
    zoom_range: float = 0.10
    shear_theta: float = 0.2
    speckle_alpha_max: float = 0.2
    seed: int = 0


def _read_plane(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DomainError(f"{path}: expected 8-bit single-channel, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as e:
        raise IOFailure(str(e)) from e


def load_mosaic(image_path: str, label_path: str, classes: int,
                microns_per_pixel: float = 0.5, mosaic_id: str | None = None) -> Mosaic:
    """Read an image/label PGM or PNG pair, validating extents and label range."""
    image = _read_plane(image_path)
    labels = _read_plane(label_path)
    if image.shape != labels.shape:
        raise DomainError(
            f"extent mismatch: image {image.shape} ({image_path}) vs "
            f"labels {labels.shape} ({label_path})")
    bad = (labels >= classes) & (labels != IGNORE)
    if bad.any():
        raise DomainError(
            f"label value {int(labels[bad].flat[0])} outside [0,{classes}) and != {IGNORE}")
    mid = mosaic_id or os.path.splitext(os.path.basename(image_path))[0]
    return Mosaic(image=image, labels=labels, microns_per_pixel=microns_per_pixel, id=mid)


def save_plane(arr: np.ndarray, path: str) -> None:
    """Write a uint8 array as single-channel PGM/PNG (picked by extension)."""
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise DomainError(f"expected 2-D uint8 plane, got {arr.dtype} {arr.shape}")
    try:
        Image.fromarray(arr, mode="L").save(path)
    except (OSError, ValueError) as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def save_labelmap(labels: np.ndarray, path: str) -> None:
    save_plane(labels, path)


def read_manifest(path: str) -> list[tuple[str, str, str]]:
    """Parse (image, label, split) triples; paths resolve relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise IOFailure(str(e)) from e
    for ln, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DomainError(f"{path}:{ln}: expected 'image label split', got {line!r}")
        out.append((os.path.join(base, parts[0]), os.path.join(base, parts[1]), parts[2]))
    return out


def write_manifest(path: str, triples: list[tuple[str, str, str]]) -> None:
    with open(path, "w") as fh:
        for img, lab, split in triples:
            fh.write(f"{img} {lab} {split}\n")


def _reflect_pad_to_multiple(arr: np.ndarray, mult: int) -> np.ndarray:
    H, W = arr.shape
    ph, pw = (-H) % mult, (-W) % mult
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw)), mode="reflect")
    return arr


def downsample_mosaic(m: Mosaic, factor: int = 4) -> Mosaic:
    """Reduce resolution: repeated 2x2 averaging for the image, NN for labels."""
    if factor < 1 or factor & (factor - 1):
        raise DomainError(f"factor must be a power of 2, got {factor}")
    if factor == 1:
        return m
    image = _reflect_pad_to_multiple(m.image, factor).astype(np.float64)
    labels = _reflect_pad_to_multiple(m.labels, factor)
    steps = factor.bit_length() - 1
    for _ in range(steps):
        image = 0.25 * (image[0::2, 0::2] + image[1::2, 0::2]
                        + image[0::2, 1::2] + image[1::2, 1::2])
    image = np.rint(image).astype(np.uint8)
    off = factor // 2               # block-center sample, fixed offset
    labels = labels[off::factor, off::factor]
    return Mosaic(image=image, labels=np.ascontiguousarray(labels),
                  microns_per_pixel=m.microns_per_pixel * factor, id=m.id)


def _axis_origins(extent: int, window: int, stride: int) -> list[int]:
    origins = list(range(0, extent - window + 1, stride))
    if origins[-1] != extent - window:
        origins.append(extent - window)   # clamp the final tile to the border
    return origins


def extract_windows(m: Mosaic, window: int = 512, overlap: float = 0.5) -> list[Window]:
    """Sliding tiles with the given overlap; last row/column shifted, not cut."""
    H, W = m.image.shape
    if window > min(H, W):
        raise DomainError(f"window {window} exceeds mosaic extent {H}x{W}")
    if not 0 <= overlap < 1:
        raise DomainError(f"overlap must be in [0,1), got {overlap}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    out = []
    for r in _axis_origins(H, window, stride):
        for c in _axis_origins(W, window, stride):
            out.append(Window(mosaic_id=m.id, index=len(out), origin=(r, c),
                              image=m.image[r:r + window, c:c + window],
                              labels=m.labels[r:r + window, c:c + window]))
    return out


def random_crop(w: Window, size: int, rng: np.random.Generator) -> Patch:
    """Uniformly placed square crop, image and labels cut congruently."""
    H, W = w.image.shape
    if size > min(H, W):
        raise DomainError(f"crop {size} exceeds window {H}x{W}")
    r = int(rng.integers(0, H - size + 1))
    c = int(rng.integers(0, W - size + 1))
    return Patch(image=w.image[r:r + size, c:c + size].copy(),
                 labels=w.labels[r:r + size, c:c + size].copy())


@dataclass(frozen=True)
class AugmentationDraw:
    """One realized set of augmentation parameters."""

    angle_deg: float
    flip_h: bool
    flip_v: bool
    intensity_shift: float
    zoom: float
    shear: float        # off-diagonal coefficient, sign included
    shear_axis: int     # 0: row gains column term, 1: the reverse
    speckle_alpha: float


def draw_augmentation(cfg: AugmentationConfig, rng: np.random.Generator) -> AugmentationDraw:
    """Sample parameters in the documented order: rotation, flips, intensity,
    zoom, shear, speckle."""
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) \
        if cfg.max_rotation_deg else 0.0
    flip_h = bool(cfg.flips and rng.random() < 0.5)
    flip_v = bool(cfg.flips and rng.random() < 0.5)
    shift = rng.uniform(*cfg.intensity_range) if cfg.intensity_range != (0.0, 0.0) else 0.0
    zoom = 1.0 + (rng.uniform(-cfg.zoom_range, cfg.zoom_range) if cfg.zoom_range else 0.0)
    shear, axis = 0.0, 0
    if cfg.shear_theta:
        axis = int(rng.integers(0, 2))
        shear = cfg.shear_theta * (1.0 if rng.random() < 0.5 else -1.0)
    alpha = rng.uniform(0.0, cfg.speckle_alpha_max) if cfg.speckle_alpha_max else 0.0
    return AugmentationDraw(angle_deg=angle, flip_h=flip_h, flip_v=flip_v,
                            intensity_shift=shift, zoom=zoom, shear=shear,
                            shear_axis=axis, speckle_alpha=alpha)


def apply_augmentation(p: Patch, d: AugmentationDraw,
                       rng: np.random.Generator) -> Patch:
    """All four geometric transforms compose into one matrix applied in a
    single resampling pass (bilinear image, NN labels), then intensity shift
    and multiplicative speckle.  Out-of-bounds labels become ignore; image
    out-of-bounds is 0."""
    S = p.image.shape[0]
    angle = math.radians(d.angle_deg)
    rot = np.array([[math.cos(angle), -math.sin(angle)],
                    [math.sin(angle), math.cos(angle)]])
    flip = np.diag([-1.0 if d.flip_v else 1.0, -1.0 if d.flip_h else 1.0])
    shear = np.eye(2)
    shear[d.shear_axis, 1 - d.shear_axis] = d.shear
    fwd = rot @ flip @ (d.zoom * np.eye(2)) @ shear
    inv = np.linalg.inv(fwd)
    center = (S - 1) / 2.0
    offset = np.array([center, center]) - inv @ np.array([center, center])

    image = ndimage.affine_transform(p.image.astype(np.float64), inv, offset=offset,
                                     order=1, mode="constant", cval=0.0)
    labels = ndimage.affine_transform(p.labels, inv, offset=offset,
                                      order=0, mode="constant", cval=IGNORE)
    image = np.clip(image + d.intensity_shift, 0.0, 255.0)
    if d.speckle_alpha:
        noise = rng.standard_normal(image.shape)
        image = np.clip(image * (1.0 + d.speckle_alpha * noise), 0.0, 255.0)
    return Patch(image=np.rint(image).astype(np.uint8), labels=labels.astype(np.uint8))


def augment(p: Patch, cfg: AugmentationConfig, rng: np.random.Generator) -> Patch:
    """Draw one parameter set and apply it; see :func:`apply_augmentation`."""
    return apply_augmentation(p, draw_augmentation(cfg, rng), rng)


def label_pyramid(labels: np.ndarray, levels: int, classes: int):
    """Per-level targets: NN-downsampled integer labels, one-hot encoded.

    Returns a list of MaskedTarget, level 0 being the input resolution.
    """
    from .losses import MaskedTarget, one_hot_encode  # cycle-free local import

    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DomainError(f"expected (B,H,W) labels, got {labels.shape}")
    if labels.shape[1] % (1 << (levels - 1)) or labels.shape[2] % (1 << (levels - 1)):
        raise DomainError(
            f"extents {labels.shape[1:]} not divisible by 2^{levels - 1}")
    out: list[MaskedTarget] = []
    cur = labels
    for m in range(levels):
        if m:
            cur = cur[:, 1::2, 1::2]
        out.append(one_hot_encode(cur, classes))
    return out


def patch_rng(master_seed: int, mosaic_id: str, window_index: int,
              epoch: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, mosaic, window, epoch)."""
    mid = int.from_bytes(hashlib.sha256(mosaic_id.encode()).digest()[:8], "little")
    ss = np.random.SeedSequence(entropy=master_seed,
                                spawn_key=(mid, window_index, epoch))
    return np.random.default_rng(ss)
