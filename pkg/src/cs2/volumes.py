"""HU volumes, the 2.5D four-slice selection rule and HU windowing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, HURangeError, MalformedHeaderError, ShapeError
from .formats import header_float, read_grid, write_grid, write_pgm

HU_MIN, HU_MAX = -1024, 3071
DEFAULT_WINDOW = (-1024.0, 600.0)
SLAB_CHANNELS = 4


@dataclass(frozen=True)
class HUVolume:
    voxels: np.ndarray  # (n_slices, height, width) int16
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (dz, dy, dx) mm

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ShapeError(f"volume must be 3D (n_slices, height, width), got shape {vox.shape}")
        if vox.size and (vox.min() < HU_MIN or vox.max() > HU_MAX):
            raise HURangeError(f"HU values [{vox.min()}, {vox.max()}] outside [{HU_MIN}, {HU_MAX}]")
        vox = vox.astype(np.int16)
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


@dataclass(frozen=True)
class Slab:
    values: np.ndarray  # (4, H, W) float
    source_slices: tuple[int, ...]
    window: tuple[float, float] | None = None  # set once normalized
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != SLAB_CHANNELS:
            raise ShapeError(f"slab must have {SLAB_CHANNELS} channels, got shape {self.values.shape}")
        if len(self.source_slices) != SLAB_CHANNELS or any(
            b <= a for a, b in zip(self.source_slices, self.source_slices[1:])
        ):
            raise ShapeError(f"source_slices must be {SLAB_CHANNELS} strictly increasing indices: {self.source_slices}")


def save_volume(path, volume: HUVolume, extra: dict | None = None) -> None:
    dz, dy, dx = volume.spacing
    header = {"dz": repr(float(dz)), "dy": repr(float(dy)), "dx": repr(float(dx))}
    header.update(extra or {})
    write_grid(path, "CS2VOL1", volume.voxels, header)


def load_volume(path, format: str = "cs2vol") -> HUVolume:
    if format != "cs2vol":
        raise DataError(f"unsupported volume format {format!r}")
    grid, header = read_grid(path, "CS2VOL1")
    spacing = tuple(header_float(header, k, path) for k in ("dz", "dy", "dx"))
    return HUVolume(grid, spacing)


def selection_indices(n_slices: int) -> list[int]:
    """Four evenly stepped 0-based indices from the middle 25%-75% of the stack.

    lower = floor(0.25 (N-1)), upper = ceil(0.75 (N-1)), step = floor((upper-lower)/4).
    """
    lower = math.floor(0.25 * (n_slices - 1))
    upper = math.ceil(0.75 * (n_slices - 1))
    step = (upper - lower) // 4
    if step < 1:
        raise DataError(
            f"volume with {n_slices} slices is too thin for 2.5D selection; at least {min_slices()} slices are required"
        )
    return [lower + k * step for k in range(SLAB_CHANNELS)]


def min_slices() -> int:
    n = 1
    while True:
        lower = math.floor(0.25 * (n - 1))
        upper = math.ceil(0.75 * (n - 1))
        if (upper - lower) // 4 >= 1:
            return n
        n += 1


def select_2_5d(volume: HUVolume) -> Slab:
    idx = selection_indices(volume.n_slices)
    return Slab(volume.voxels[idx].astype(np.float64), tuple(idx))


def select_labels(labels: np.ndarray) -> np.ndarray:
    """Apply the same four-slice rule to a label volume (no-op for 4-slice inputs)."""
    if labels.shape[0] == SLAB_CHANNELS:
        return labels
    return labels[selection_indices(labels.shape[0])]


def _check_window(window) -> tuple[float, float]:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise DataError(f"HU window requires lo < hi, got ({lo}, {hi})")
    return lo, hi


def window_hu(values: np.ndarray, window=DEFAULT_WINDOW) -> np.ndarray:
    lo, hi = _check_window(window)
    return (np.clip(np.asarray(values, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def unwindow_hu(values: np.ndarray, window=DEFAULT_WINDOW) -> np.ndarray:
    lo, hi = _check_window(window)
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def normalize_hu(slab: Slab, window=DEFAULT_WINDOW) -> Slab:
    if slab.window is not None:
        raise DataError("slab is already normalized")
    lo, hi = _check_window(window)
    return Slab(window_hu(slab.values, (lo, hi)), slab.source_slices, (lo, hi), dict(slab.meta))


def denormalize_hu(slab: Slab) -> Slab:
    if slab.window is None:
        raise DataError("slab is not normalized")
    return Slab(unwindow_hu(slab.values, slab.window), slab.source_slices, None, dict(slab.meta))


def export_pgm(path, image: np.ndarray, window=DEFAULT_WINDOW) -> None:
    lo, hi = _check_window(window)
    write_pgm(path, np.clip(image, lo, hi), lo, hi)


def parse_slices(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise MalformedHeaderError(f"bad slice list {text!r}") from None
