"""Procedural lung-like HU phantoms with exact ground-truth labels.

Classes: 0 background (air), 1 body, 2 lung, 3 ground-glass opacity (GGO).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volumes import HU_MAX, HU_MIN, HUVolume

BACKGROUND, BODY, LUNG, GGO = 0, 1, 2, 3
CLASS_NAMES = ("background", "body", "lung", "ggo")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    size: tuple[int, int] = (64, 64)
    n_slices: int = 24
    n_ggo: tuple[int, int] = (1, 3)  # inclusive range of lesion count
    class_means: tuple[float, float, float, float] = (-1024.0, 40.0, -800.0, -600.0)
    # per-class multiplier on noise_std; air stays exactly -1024 so clipping never biases it
    class_noise: tuple[float, float, float, float] = (0.0, 1.0, 1.0, 1.0)
    noise_std: float = 30.0
    body_axes: tuple[float, float] = (0.44, 0.36)  # semi-axes as fractions of (W, H)
    lung_axes: tuple[float, float] = (0.12, 0.21)
    lung_offset: float = 0.18  # lung centre offset from midline, fraction of W
    ggo_radius: tuple[float, float] = (3.0, 7.0)  # in-plane radius range, px
    ggo_depth: tuple[float, float] = (3.0, 7.0)  # half-extent range, slices

    def __post_init__(self):
        if len(self.class_means) != 4 or len(self.class_noise) != 4:
            raise DataError("class_means and class_noise need one entry per class (4)")
        for m in self.class_means:
            if not HU_MIN <= m <= HU_MAX:
                raise DataError(f"class mean {m} HU outside [{HU_MIN}, {HU_MAX}]")
        lo, hi = self.n_ggo
        if lo < 0 or hi < lo:
            raise DataError(f"invalid n_ggo range {self.n_ggo}")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if self.n_slices < 1 or min(self.size) < 8:
            raise DataError(f"phantom geometry too small: size={self.size}, n_slices={self.n_slices}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LabeledPhantom:
    volume: HUVolume
    truth: np.ndarray  # (n_slices, H, W) uint8
    seed: int

    def __post_init__(self):
        if self.truth.shape != self.volume.voxels.shape:
            raise DataError(f"truth shape {self.truth.shape} != volume shape {self.volume.voxels.shape}")


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> LabeledPhantom:
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    n = spec.n_slices
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    body_rx = spec.body_axes[0] * w * rng.uniform(0.92, 1.05)
    body_ry = spec.body_axes[1] * h * rng.uniform(0.92, 1.05)
    cy = h / 2 - 0.5 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 - 0.5 + rng.uniform(-0.03, 0.03) * w
    lung_rx = spec.lung_axes[0] * w * rng.uniform(0.85, 1.1)
    lung_ry = spec.lung_axes[1] * h * rng.uniform(0.85, 1.1)
    offset = spec.lung_offset * w
    if offset + lung_rx >= body_rx or lung_ry >= body_ry or lung_rx > offset:
        raise DataError(
            f"lungs do not fit inside the body: lung semi-axes ({lung_rx:.1f}, {lung_ry:.1f}) at offset "
            f"{offset:.1f} vs body semi-axes ({body_rx:.1f}, {body_ry:.1f})"
        )
    lung_centers = [(cy + rng.uniform(-0.02, 0.02) * h, cx + sign * offset) for sign in (-1, 1)]

    truth = np.zeros((n, h, w), dtype=np.uint8)
    t = (np.arange(n) + 0.5) / n
    # lungs swell towards mid-volume
    profile = 0.55 + 0.45 * np.sin(np.pi * t)
    body = _ellipse(yy, xx, cy, cx, body_ry, body_rx)
    for z in range(n):
        truth[z][body] = BODY
        for ly, lx in lung_centers:
            lung = _ellipse(yy, xx, ly, lx, lung_ry * profile[z], lung_rx * (0.7 + 0.3 * profile[z]))
            truth[z][lung & body] = LUNG

    lung_mask = truth == LUNG
    n_blobs = int(rng.integers(spec.n_ggo[0], spec.n_ggo[1] + 1))
    zz3 = np.arange(n, dtype=np.float64)[:, None, None]
    for _ in range(n_blobs):
        ly, lx = lung_centers[int(rng.integers(2))]
        zc = rng.uniform(0.3, 0.7) * (n - 1)
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.0, 0.5)
        by = ly + rad * lung_ry * np.sin(ang)
        bx = lx + rad * lung_rx * 0.8 * np.cos(ang)
        ry, rx = rng.uniform(*spec.ggo_radius, size=2)
        rz = rng.uniform(*spec.ggo_depth)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - by, xx - bx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        solid = ((u / rx) ** 2 + (v / ry) ** 2)[None] + ((zz3 - zc) / rz) ** 2 <= 1.0
        # smoothed, perturbed indicator -> irregular blob boundary
        field = ndimage.gaussian_filter(solid.astype(np.float64), sigma=(1.0, 1.5, 1.5))
        field *= 1.0 + 3.0 * ndimage.gaussian_filter(rng.normal(size=field.shape), sigma=(1.0, 2.0, 2.0))
        blob = (field > 0.5) & lung_mask
        truth[blob] = GGO

    means = np.asarray(spec.class_means, dtype=np.float64)
    sigmas = np.asarray(spec.class_noise, dtype=np.float64) * spec.noise_std
    hu = means[truth] + sigmas[truth] * rng.normal(size=truth.shape)
    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return LabeledPhantom(HUVolume(hu, (2.5, 0.7, 0.7)), truth, spec.seed)


def phantom_corpus(n: int, template: PhantomSpec | None = None, seed0: int = 0) -> list[LabeledPhantom]:
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    template = template or PhantomSpec()
    return [generate_phantom(replace(template, seed=seed0 + i)) for i in range(n)]
