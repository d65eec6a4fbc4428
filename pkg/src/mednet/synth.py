"""Procedural texture mosaics for desk-scale training and evaluation.

A mosaic is a Voronoi partition of the plane; each region carries one of six
texture families rendered at full resolution (0.5 micron-per-pixel scale):

0. background: dark field with slow illumination drift
1. aspecific: low-contrast smooth noise at mid intensity
2. meshwork: bright sinusoidal lattice
3. nested: dense small bright blobs
4. rings: bright annuli whose interiors copy the background statistics,
   so only context at ring scale separates them from class 0
5. artifact: saturated-white and pitch-black patches

Region boundary bands are marked ignore, and a smooth random field trims the
remaining labels down to the requested labeled fraction, mimicking partial
annotations.  A small core disk around each region seed always stays
labeled, so every class keeps support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import Mosaic, save_plane, write_manifest
from .errors import DomainError
from .losses import IGNORE

FAMILY_NAMES = ("background", "aspecific", "meshwork", "nested", "rings", "artifact")


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 1024
    classes: int = 6
    regions: int = 28
    labeled_fraction: float = 0.6
    boundary_band_px: float = 6.0
    core_radius_px: float = 14.0
    microns_per_pixel: float = 0.5

    def __post_init__(self):
        if not 2 <= self.classes <= len(FAMILY_NAMES):
            raise DomainError(
                f"classes must be 2..{len(FAMILY_NAMES)} (one texture family each), "
                f"got {self.classes}")
        if self.regions < self.classes:
            raise DomainError("need at least one region per class")
        if not 0 < self.labeled_fraction <= 1:
            raise DomainError("labeled_fraction must be in (0,1]")


def _smooth_noise(rng, size, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    return field / (field.std() + 1e-12)


def _draw_disks(canvas, rng, count, radius_range, sigma_frac, amplitude, size):
    """Add Gaussian bumps at random centers; bounded local windows keep it fast."""
    for _ in range(count):
        r = rng.uniform(*radius_range)
        cy, cx = rng.uniform(0, size, 2)
        s = max(r * sigma_frac, 0.8)
        ext = int(3 * s + r) + 1
        y0, y1 = max(int(cy) - ext, 0), min(int(cy) + ext + 1, size)
        x0, x1 = max(int(cx) - ext, 0), min(int(cx) + ext + 1, size)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d = np.hypot(yy - cy, xx - cx)
        canvas[y0:y1, x0:x1] += amplitude * np.exp(-(d - r) ** 2 / (2 * s * s))


def _texture_background(rng, size):
    return 26.0 + 7.0 * _smooth_noise(rng, size, 24) + 3.0 * rng.standard_normal((size, size))


def _texture_aspecific(rng, size):
    return 88.0 + 11.0 * _smooth_noise(rng, size, 5) + 3.0 * rng.standard_normal((size, size))


def _texture_meshwork(rng, size):
    lam = 48.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    warp = 6.0 * _smooth_noise(rng, size, 40)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    lattice = np.sin(2 * np.pi * (xx + warp) / lam + ph1) \
        * np.sin(2 * np.pi * (yy - warp) / lam + ph2)
    return 105.0 + 75.0 * np.clip(lattice, 0.0, 1.0) + 4.0 * rng.standard_normal((size, size))


def _texture_nested(rng, size):
    # blob radius 4-9 px here = 1-2.3 px after the x4 downsample, so the dots
    # survive block averaging instead of washing out to faint speckle
    canvas = 46.0 + 5.0 * _smooth_noise(rng, size, 12)
    blob = np.zeros((size, size))
    _draw_disks(blob, rng, count=(size * size) // 700, radius_range=(4.0, 9.0),
                sigma_frac=0.55, amplitude=130.0, size=size)
    return canvas + np.clip(blob, 0.0, 185.0) + 4.0 * rng.standard_normal((size, size))


def _texture_rings(rng, size):
    # interiors copy the background statistics; density keeps every interior
    # pixel within roughly half a ring spacing (~30 px) of a rim so patch-scale
    # context can still resolve the class
    canvas = 26.0 + 7.0 * _smooth_noise(rng, size, 24)   # interior = background look
    rings = np.zeros((size, size))
    _draw_disks(rings, rng, count=(size * size) // 3600, radius_range=(16.0, 28.0),
                sigma_frac=0.18, amplitude=190.0, size=size)
    return canvas + np.clip(rings, 0.0, 200.0) + 3.0 * rng.standard_normal((size, size))


def _texture_artifact(rng, size):
    field = _smooth_noise(rng, size, 18)
    out = np.full((size, size), 128.0)
    out[field > 0.55] = 252.0
    out[field < -0.55] = 2.0
    return out + 3.0 * rng.standard_normal((size, size))


_FAMILY_RENDERERS = (_texture_background, _texture_aspecific, _texture_meshwork,
                     _texture_nested, _texture_rings, _texture_artifact)


def _place_sites(rng, size, regions, min_sep):
    """Uniform placement with a minimum pairwise separation (rejection
    sampling).  Separation >= band + 2*core keeps every core disk outside the
    boundary band, so no class can lose all its labeled support."""
    lo, hi = 0.04 * size, 0.96 * size
    sites: list[np.ndarray] = []
    for _ in range(regions):
        for _attempt in range(1000):
            cand = rng.uniform(lo, hi, 2)
            if all((cand - s) @ (cand - s) >= min_sep * min_sep for s in sites):
                sites.append(cand)
                break
        else:
            raise DomainError(
                f"cannot place {regions} region seeds {min_sep:.0f}px apart "
                f"in a {size}px mosaic")
    return np.array(sites)


def synth_generate(spec: SyntheticSpec, seed: int) -> Mosaic:
    """One deterministic mosaic: textures, labels, ignore bands, label trim."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(0xED,)))
    size, K = spec.size, spec.classes

    min_sep = spec.boundary_band_px + 2 * spec.core_radius_px
    sites = _place_sites(rng, size, spec.regions, min_sep)
    # cycled class assignment guarantees every class at least one region
    region_class = np.array([i % K for i in range(spec.regions)])
    rng.shuffle(region_class)
    yy, xx = np.mgrid[0:size, 0:size]
    pts = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    dist, idx = cKDTree(sites).query(pts, k=2)
    region = idx[:, 0].reshape(size, size)
    band = (dist[:, 1] - dist[:, 0]).reshape(size, size) < spec.boundary_band_px

    class_map = region_class[region].astype(np.uint8)
    image = np.empty((size, size))
    for k in range(K):
        mask = class_map == k
        if mask.any():
            image[mask] = _FAMILY_RENDERERS[k](rng, size)[mask]
    image = np.clip(image + 6.0 * _smooth_noise(rng, size, 90), 0.0, 255.0)
    image = np.rint(image).astype(np.uint8)

    labels = class_map.copy()
    labels[band] = IGNORE

    core = np.zeros((size, size), dtype=bool)
    rr = np.arange(size)
    for cy, cx in sites:
        d2 = (rr[:, None] - cy) ** 2 + (rr[None, :] - cx) ** 2
        core |= d2 <= spec.core_radius_px ** 2
    core &= labels != IGNORE

    trimmable = (labels != IGNORE) & ~core
    want_labeled = int(round(spec.labeled_fraction * size * size))
    drop = int(trimmable.sum()) + int(core.sum()) - want_labeled
    if drop > 0:
        field = _smooth_noise(rng, size, 30)
        vals = np.sort(field[trimmable])
        labels[trimmable & (field <= vals[drop - 1])] = IGNORE
    return Mosaic(image=image, labels=labels,
                  microns_per_pixel=spec.microns_per_pixel, id=f"synth-{seed:04d}")


def generate_dataset(out_dir: str, spec: SyntheticSpec, seed: int,
                     counts: tuple[int, int, int] = (8, 2, 2)) -> str:
    """Write count-split mosaics plus a manifest; returns the manifest path."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    triples = []
    splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    for i, split in enumerate(splits):
        m = synth_generate(spec, seed=seed * 1000 + i)
        img, lab = f"{m.id}.pgm", f"{m.id}-labels.pgm"
        save_plane(m.image, os.path.join(out_dir, img))
        save_plane(m.labels, os.path.join(out_dir, lab))
        triples.append((img, lab, split))
    manifest = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest, triples)
    return manifest
