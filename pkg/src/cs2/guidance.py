"""Mean-HU guidance maps and declarative patch edits.

Pixel (row i, column j) has its centre at x=j, y=i; shapes are rasterized
by testing pixel centres, so membership is exact and reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, HURangeError, ShapeError
from .formats import encode_json, read_grid, write_grid
from .volumes import DEFAULT_WINDOW, HU_MAX, HU_MIN, window_hu


@dataclass(frozen=True)
class EditOp:
    kind: str  # "circle" or "polygon"
    hu: float
    cx: float = 0.0
    cy: float = 0.0
    r: float = 0.0
    points: tuple[tuple[float, float], ...] = ()  # (x, y) vertices

    def __post_init__(self):
        if self.kind not in ("circle", "polygon"):
            raise DataError(f"unknown edit kind {self.kind!r}; expected 'circle' or 'polygon'")
        if not HU_MIN <= self.hu <= HU_MAX:
            raise HURangeError(f"edit HU value {self.hu} outside [{HU_MIN}, {HU_MAX}]")
        if self.kind == "circle" and self.r < 0:
            raise DataError(f"circle radius must be >= 0, got {self.r}")
        if self.kind == "polygon" and len(self.points) < 3:
            raise DataError(f"polygon needs at least 3 vertices, got {len(self.points)}")

    def to_dict(self) -> dict:
        if self.kind == "circle":
            return {"kind": "circle", "cx": self.cx, "cy": self.cy, "r": self.r, "hu": self.hu}
        return {"kind": "polygon", "points": [list(p) for p in self.points], "hu": self.hu}

    def rasterize(self, shape: tuple[int, int]) -> np.ndarray:
        """Boolean mask of pixels whose centres fall inside the shape (clipped to ``shape``)."""
        h, w = shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        if self.kind == "circle":
            # strict inequality: a radius-0 circle selects nothing
            return (xx - self.cx) ** 2 + (yy - self.cy) ** 2 < self.r**2
        return _inside_polygon(xx, yy, np.asarray(self.points, dtype=np.float64))


def _inside_polygon(xx: np.ndarray, yy: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # even-odd ray casting with half-open edges
    inside = np.zeros(xx.shape, dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > yy) != (by > yy)
        x_at = ax + (yy - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xx < x_at)
    return inside


@dataclass(frozen=True)
class GuidanceMap:
    values: np.ndarray  # (H, W) HU
    provenance: dict = field(default_factory=dict)  # class id -> mean HU
    edits: tuple[EditOp, ...] = ()

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ShapeError(f"guidance map must be 2D, got shape {vals.shape}")
        if vals.size and (vals.min() < HU_MIN or vals.max() > HU_MAX):
            raise HURangeError(f"guidance values [{vals.min()}, {vals.max()}] outside [{HU_MIN}, {HU_MAX}]")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def normalized(self, window=DEFAULT_WINDOW) -> np.ndarray:
        return window_hu(self.values, window)


def class_means(labels: np.ndarray, image: np.ndarray) -> dict[int, float]:
    """Per-class mean of ``image``; exact for classes whose values are all equal."""
    labels = np.asarray(labels)
    image = np.asarray(image, dtype=np.float64)
    classes, inverse = np.unique(labels.ravel(), return_inverse=True)
    flat = image.ravel()
    # centre each class on its minimum so constant classes average to that value exactly
    base = np.full(classes.size, np.inf)
    np.minimum.at(base, inverse, flat)
    counts = np.bincount(inverse, minlength=classes.size)
    means = base + np.bincount(inverse, flat - base[inverse], minlength=classes.size) / counts
    return {int(c): float(m) for c, m in zip(classes, means)}


def mean_hu_assignment(mask, image: np.ndarray) -> GuidanceMap:
    labels = np.asarray(getattr(mask, "labels", mask))
    image = np.asarray(image, dtype=np.float64)
    if labels.shape != image.shape:
        raise ShapeError(f"mask shape {labels.shape} and image shape {image.shape} differ")
    means = class_means(labels, image)
    lut_keys = np.array(sorted(means))
    lut_vals = np.array([means[k] for k in lut_keys])
    values = lut_vals[np.searchsorted(lut_keys, labels)]
    return GuidanceMap(values, means)


def apply_edits(gmap: GuidanceMap, edits: Sequence[EditOp]) -> GuidanceMap:
    """Paint each shape's HU value in list order; later edits win on overlap."""
    values = np.array(gmap.values)
    for op in edits:
        values[op.rasterize(values.shape)] = op.hu
    return GuidanceMap(values, dict(gmap.provenance), gmap.edits + tuple(edits))


def parse_edit(obj: dict) -> EditOp:
    if not isinstance(obj, dict):
        raise DataError(f"edit must be a JSON object, got {type(obj).__name__}")
    kind = obj.get("kind")
    try:
        hu = float(obj["hu"])
        if kind == "circle":
            return EditOp("circle", hu, cx=float(obj["cx"]), cy=float(obj["cy"]), r=float(obj["r"]))
        if kind == "polygon":
            pts = tuple((float(x), float(y)) for x, y in obj["points"])
            return EditOp("polygon", hu, points=pts)
    except KeyError as exc:
        raise DataError(f"edit {obj} lacks field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise DataError(f"edit {obj} has a malformed field: {exc}") from None
    raise DataError(f"unknown edit kind {kind!r}; expected 'circle' or 'polygon'")


def load_edits(path) -> list[EditOp]:
    ops = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            try:
                ops.append(parse_edit(obj))
            except DataError as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from None
    return ops


def save_guidance(path, maps: Iterable[GuidanceMap], extra: dict | None = None) -> None:
    maps = list(maps)
    header = {"provenance": encode_json([{str(k): v for k, v in m.provenance.items()} for m in maps])}
    if any(m.edits for m in maps):
        header["edits"] = encode_json([[op.to_dict() for op in m.edits] for m in maps])
    header.update(extra or {})
    write_grid(path, "CS2GDF1", np.stack([m.values for m in maps]), header)


def load_guidance(path) -> tuple[list[GuidanceMap], dict[str, str]]:
    grid, header = read_grid(path, "CS2GDF1")
    try:
        prov = json.loads(header.get("provenance", "[]")) or [{}] * grid.shape[0]
        edits = json.loads(header.get("edits", "[]")) or [[]] * grid.shape[0]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed provenance/edits header ({exc.msg})") from None
    if len(prov) != grid.shape[0] or len(edits) != grid.shape[0]:
        raise DataError(f"{path}: provenance/edits entries do not match {grid.shape[0]} maps")
    maps = [
        GuidanceMap(g, {int(k): float(v) for k, v in p.items()}, tuple(parse_edit(e) for e in ed))
        for g, p, ed in zip(grid, prov, edits)
    ]
    return maps, header
