"""Unsupervised structural masks: SLIC superpixels + a per-image CNN whose
argmax labels are repeatedly snapped to the modal class of each superpixel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DivergenceError, ShapeError
from .numerics import (
    OptimizerState,
    Tensor,
    conv2d,
    cross_entropy,
    instance_norm,
    optimizer_step,
    pad_edge,
    parameter,
)

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SuperpixelMask:
    labels: np.ndarray  # (H, W) ints in [0, K)

    @property
    def K(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class ClusterMask:
    labels: np.ndarray  # (H, W) ints in [0, M)

    @property
    def distinct_count(self) -> int:
        return int(np.unique(self.labels).size)


@dataclass(frozen=True)
class UnsupConfig:
    M: int = 32
    max_iters: int = 60
    stop_clusters: int = 4
    n_segments: int = 100
    compactness: float = 10.0
    slic_iters: int = 10
    widths: tuple[int, int] = (32, 32)
    lr: float = 0.1

    def __post_init__(self):
        if self.stop_clusters < 1 or self.max_iters < 1 or self.M < self.stop_clusters:
            raise ValueError(
                f"invalid UnsupConfig: need stop_clusters >= 1, max_iters >= 1, M >= stop_clusters ({self})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceRow:
    iter: int
    loss: float
    distinct_count: int  # after refinement
    raw_count: int  # argmax labels before refinement


@dataclass
class UnsupResult:
    mask: ClusterMask
    superpixels: SuperpixelMask
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace)


# -- superpixels -------------------------------------------------------------


def slic(image: np.ndarray, n_segments: int = 100, compactness: float = 10.0, iters: int = 10) -> SuperpixelMask:
    """SLIC on a single-channel image with grid seeding and a fixed iteration count.

    Intensities are rescaled to [0, 100] (the lightness range classic SLIC
    compactness values assume); segments are made 4-connected afterwards.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"slic expects a 2D image, got shape {image.shape}")
    h, w = image.shape
    if n_segments < 1 or n_segments > h * w:
        raise ValueError(f"n_segments must lie in [1, {h * w}] for a {h}x{w} image, got {n_segments}")
    if compactness <= 0:
        raise ValueError(f"compactness must be positive, got {compactness}")

    span = image.max() - image.min()
    lum = (image - image.min()) * (100.0 / span) if span > 0 else np.zeros_like(image)
    step = math.sqrt(h * w / n_segments)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    while ny * nx > n_segments:
        if ny >= nx:
            ny -= 1
        else:
            nx -= 1
    # seeds at grid-cell centres, in pixel-centre coordinates
    cy = np.repeat((np.arange(ny) + 0.5) * h / ny - 0.5, nx)
    cx = np.tile((np.arange(nx) + 0.5) * w / nx - 0.5, ny)
    iy = np.clip(np.rint(cy).astype(int), 0, h - 1)
    ix = np.clip(np.rint(cx).astype(int), 0, w - 1)
    cl = lum[iy, ix]

    yy, xx = np.mgrid[0:h, 0:w]
    py, px, pl = yy.ravel().astype(np.float64), xx.ravel().astype(np.float64), lum.ravel()
    k = cy.size
    spatial_weight = (compactness / step) ** 2
    labels = np.zeros(h * w, dtype=np.int64)
    for _ in range(max(1, iters)):
        dy = py[None, :] - cy[:, None]
        dx = px[None, :] - cx[:, None]
        dist = (pl[None, :] - cl[:, None]) ** 2 + spatial_weight * (dy * dy + dx * dx)
        outside = (np.abs(dy) > 2 * step) | (np.abs(dx) > 2 * step)
        windowed = np.where(outside, np.inf, dist)
        labels = np.argmin(windowed, axis=0)
        orphan = ~np.isfinite(windowed.min(axis=0))
        if orphan.any():
            labels[orphan] = np.argmin(dist[:, orphan], axis=0)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        cy[filled] = (np.bincount(labels, py, k) / np.maximum(counts, 1))[filled]
        cx[filled] = (np.bincount(labels, px, k) / np.maximum(counts, 1))[filled]
        cl[filled] = (np.bincount(labels, pl, k) / np.maximum(counts, 1))[filled]

    min_size = max(1, int(step * step / 4))
    return SuperpixelMask(_enforce_connectivity(labels.reshape(h, w), min_size))


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split labels into 4-connected components, then fold stray and tiny ones
    into the neighbour they share the longest border with."""
    comp = np.full(labels.shape, -1, dtype=np.int64)
    owner: list[int] = []
    n_comp = 0
    for lab in np.unique(labels):
        cc, n = ndimage.label(labels == lab, structure=_FOUR_CONNECTED)
        sel = cc > 0
        comp[sel] = cc[sel] - 1 + n_comp
        owner.extend([int(lab)] * n)
        n_comp += n
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    if n_comp == 1:
        return np.zeros_like(labels)

    border: dict[tuple[int, int], int] = {}
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs = np.stack([a[diff], b[diff]], axis=1)
        pairs.sort(axis=1)
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        for (p, q), c in zip(uniq.tolist(), counts.tolist()):
            border[(p, q)] = border.get((p, q), 0) + c
    neighbours: dict[int, dict[int, int]] = {i: {} for i in range(n_comp)}
    for (p, q), c in border.items():
        neighbours[p][q] = c
        neighbours[q][p] = c

    parent = list(range(n_comp))
    size = sizes.astype(np.int64).tolist()

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    largest: dict[int, int] = {}
    for i in range(n_comp):
        lab = owner[i]
        if lab not in largest or sizes[i] > sizes[largest[lab]]:
            largest[lab] = i
    strays = [i for i in range(n_comp) if largest[owner[i]] != i]
    mains = [i for i in range(n_comp) if largest[owner[i]] == i]

    def merge(i):
        root = find(i)
        score: dict[int, int] = {}
        for j, c in neighbours[i].items():
            r = find(j)
            if r != root:
                score[r] = score.get(r, 0) + c
        if not score:
            return
        target = min(score, key=lambda r: (-score[r], r))
        parent[root] = target
        size[target] += size[root]

    for i in sorted(strays, key=lambda i: (sizes[i], i)):
        merge(i)
    for i in sorted(mains, key=lambda i: (sizes[i], i)):
        if find(i) == i and size[i] < min_size:
            merge(i)

    roots = np.array([find(i) for i in range(n_comp)])
    flat = roots[comp].ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(n_comp, dtype=np.int64)
    remap[np.unique(flat)[order]] = np.arange(order.size)
    return remap[flat].reshape(labels.shape)


# -- refinement ------------------------------------------------------------------


def refine_with_superpixels(C: ClusterMask, S: SuperpixelMask) -> ClusterMask:
    """Give every superpixel the most frequent class inside it (lowest index on ties)."""
    c = np.asarray(C.labels)
    s = np.asarray(S.labels)
    if c.shape != s.shape:
        raise ShapeError(f"cluster mask {c.shape} and superpixel mask {s.shape} differ in shape")
    m = int(c.max()) + 1
    k = int(s.max()) + 1
    counts = np.bincount((s * m + c).ravel(), minlength=k * m).reshape(k, m)
    modal = np.argmax(counts, axis=1)
    return ClusterMask(modal[s].astype(c.dtype))


# -- per-image CNN ---------------------------------------------------------------


def init_cnn(cfg: UnsupConfig, rng: np.random.Generator, in_channels: int = 1) -> dict[str, Tensor]:
    widths = (in_channels, *cfg.widths, cfg.M)
    params = {}
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        params[f"conv{i}.w"] = parameter(rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3)))
        params[f"conv{i}.b"] = parameter(np.zeros(cout))
    return params


def cnn_forward(params: dict[str, Tensor], x: Tensor) -> Tensor:
    """3x3 convs with instance norm + ReLU between them; raw logits out."""
    n_layers = len(params) // 2
    for i in range(1, n_layers + 1):
        # replicate padding keeps the image border from reading as an edge
        x = conv2d(pad_edge(x, 1), params[f"conv{i}.w"], params[f"conv{i}.b"])
        if i < n_layers:
            x = instance_norm(x).relu()
    return x


def train_unsupervised(image: np.ndarray, cfg: UnsupConfig | None = None, seed: int = 0) -> UnsupResult:
    """Fit a fresh CNN to one normalized image until the refined mask has at
    most ``stop_clusters`` classes or ``max_iters`` iterations have run."""
    cfg = cfg or UnsupConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"train_unsupervised expects a 2D image, got shape {image.shape}")
    rng = np.random.default_rng(seed)
    superpixels = slic(image, cfg.n_segments, cfg.compactness, cfg.slic_iters)
    params = init_cnn(cfg, rng)
    state = OptimizerState(learning_rate=cfg.lr, mode="sgd")
    x = Tensor(image[None, None])
    result = UnsupResult(ClusterMask(np.zeros(image.shape, dtype=np.int64)), superpixels)

    for it in range(cfg.max_iters):
        logits = cnn_forward(params, x)
        raw = ClusterMask(np.argmax(logits.data[0], axis=0))
        refined = refine_with_superpixels(raw, superpixels)
        loss = cross_entropy(logits, refined.labels[None])
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"non-finite unsupervised loss at iteration {it}", step=it)
        for p in params.values():
            p.zero_grad()
        loss.backward()
        optimizer_step(params, state)
        result.trace.append(TraceRow(it, loss.item(), refined.distinct_count, raw.distinct_count))
        result.mask = refined
        if refined.distinct_count <= cfg.stop_clusters:
            break
    return result


def trace_to_csv(trace: list[TraceRow]) -> str:
    lines = ["iter,loss,distinct_count"]
    lines += [f"{row.iter},{row.loss!r},{row.distinct_count}" for row in trace]
    return "\n".join(lines) + "\n"


def modal_purity(pred: np.ndarray, truth: np.ndarray) -> dict[int, float]:
    """Fraction of each true region covered by its most frequent predicted label."""
    out = {}
    for cls in np.unique(truth):
        inside = pred[truth == cls]
        out[int(cls)] = float(np.bincount(inside.ravel()).max() / inside.size)
    return out
