"""Pixel classifiers on generator decoder features: an ensemble of small
MLPs, majority voting, connected-component clean-up and Dice scoring."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import CheckpointMismatchError, ConfigError, DataError, ShapeError, SizeMismatchError
from .formats import encode_json, read_container, write_container
from .numerics import OptimizerState, Tensor, cross_entropy, linear, no_grad, optimizer_step, parameter, zero_grads

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


# -- features ------------------------------------------------------------------------


def upsample_bilinear(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel-centre bilinear sampling (edges clamped)."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return a.copy()

    def taps(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = taps(h, oh)
    x0, x1, fx = taps(w, ow)
    rows = a[..., y0, :] * (1 - fy)[:, None] + a[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


@dataclass(frozen=True)
class FeatureStack:
    values: np.ndarray  # (F, H, W)

    @property
    def F(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def pixels(self) -> np.ndarray:
        return self.values.reshape(self.F, -1).T


def extract_pixel_features(record) -> FeatureStack:
    """Concatenate every cached decoder map, each resized to the image size."""
    feats = getattr(record, "features", None)
    if not feats:
        raise DataError("synthesis record has no cached decoder feature maps")
    image = record.image.data if isinstance(record.image, Tensor) else np.asarray(record.image)
    if image.ndim != 3:
        raise ShapeError(f"expected an unbatched (C,H,W) record, got image shape {image.shape}")
    size = image.shape[-2:]
    maps = []
    for name in sorted(feats, key=lambda k: (len(k), k)):
        f = feats[name].data if isinstance(feats[name], Tensor) else np.asarray(feats[name])
        maps.append(upsample_bilinear(f, size))
    values = np.concatenate(maps, axis=0)
    if not np.all(np.isfinite(values)):
        raise DataError("decoder features contain non-finite values")
    return FeatureStack(values)


# -- ensemble ------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = 10
    hidden: tuple[int, ...] = (64, 64)
    n_classes: int = 4
    n_outputs: int = 4  # label maps predicted per pixel (one per slab channel)
    epochs: int = 16
    batch_pixels: int = 1024
    lr: float = 3e-3
    pixel_cap: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.members < 1 or self.n_classes < 2 or self.n_outputs < 1 or self.epochs < 1:
            raise ConfigError(f"invalid ensemble config {self}")
        if self.pixel_cap < 1 or self.batch_pixels < 1 or not self.lr > 0:
            raise ConfigError("pixel_cap, batch_pixels and lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown ensemble config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class EnsembleSegmenter:
    members: list[dict[str, Tensor]]
    config: EnsembleConfig
    n_features: int
    member_seeds: list[int]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    train_info: dict = field(default_factory=dict)


def member_seeds(cfg: EnsembleConfig) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.members)]


def _init_member(cfg: EnsembleConfig, n_features: int, rng: np.random.Generator) -> dict[str, Tensor]:
    widths = (n_features, *cfg.hidden, cfg.n_classes * cfg.n_outputs)
    p = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        p[f"fc{i}.w"] = parameter(rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)), f"fc{i}.w")
        p[f"fc{i}.b"] = parameter(np.zeros(b), f"fc{i}.b")
    return p


def _member_logits(p: dict[str, Tensor], x: Tensor, cfg: EnsembleConfig) -> Tensor:
    n_layers = len(p) // 2
    for i in range(1, n_layers + 1):
        x = linear(x, p[f"fc{i}.w"], p[f"fc{i}.b"])
        if i < n_layers:
            x = x.relu()
    return x.reshape((x.shape[0], cfg.n_outputs, cfg.n_classes))


def _label_rows(labels: np.ndarray, cfg: EnsembleConfig) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim == 2:
        lab = lab[None]
    if lab.shape[0] != cfg.n_outputs:
        raise ShapeError(f"label stack has {lab.shape[0]} maps, config expects n_outputs={cfg.n_outputs}")
    if lab.min() < 0 or lab.max() >= cfg.n_classes:
        raise DataError(f"label values [{lab.min()}, {lab.max()}] outside [0, {cfg.n_classes})")
    return lab.reshape(cfg.n_outputs, -1).T


def train_ensemble(
    features: Sequence[FeatureStack], labels: Sequence[np.ndarray], cfg: EnsembleConfig | None = None
) -> EnsembleSegmenter:
    cfg = cfg or EnsembleConfig()
    if not features or len(features) != len(labels):
        raise DataError(f"need matching, non-empty feature/label lists ({len(features)} vs {len(labels)})")
    n_features = features[0].F
    for fs, lab in zip(features, labels):
        if fs.F != n_features:
            raise ShapeError(f"feature dims differ: {fs.F} vs {n_features}")
        if np.asarray(lab).shape[-2:] != fs.shape:
            raise ShapeError(f"label shape {np.asarray(lab).shape} does not match features {fs.shape}")
    X = np.concatenate([fs.pixels() for fs in features])
    Y = np.concatenate([_label_rows(lab, cfg) for lab in labels])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xn = (X - mean) / std

    seeds = member_seeds(cfg)
    members = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        params = _init_member(cfg, n_features, rng)
        idx = rng.choice(X.shape[0], size=cfg.pixel_cap, replace=False) if X.shape[0] > cfg.pixel_cap else np.arange(X.shape[0])
        state = OptimizerState(learning_rate=cfg.lr, betas=(0.9, 0.999))
        for _ in range(cfg.epochs):
            order = rng.permutation(idx)
            for start in range(0, order.size, cfg.batch_pixels):
                batch = order[start : start + cfg.batch_pixels]
                zero_grads(params)
                loss = cross_entropy(_member_logits(params, Tensor(Xn[batch]), cfg), Y[batch], class_axis=2)
                loss.backward()
                optimizer_step(params, state)
        members.append(params)
    info = {"pixels_available": int(X.shape[0]), "pixel_cap": cfg.pixel_cap, "images": len(features)}
    return EnsembleSegmenter(members, cfg, n_features, seeds, mean, std, info)


def majority_vote(votes: np.ndarray, n_classes: int) -> np.ndarray:
    """Modal class along axis 0; ties go to the lowest class index."""
    votes = np.asarray(votes)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(n_classes)])
    return np.argmax(counts, axis=0)


def member_votes(ens: EnsembleSegmenter, fs: FeatureStack) -> np.ndarray:
    """(members, n_outputs, H, W) argmax class of every member."""
    if fs.F != ens.n_features:
        raise ShapeError(f"feature dim {fs.F} does not match ensemble dim {ens.n_features}")
    x = Tensor((fs.pixels() - ens.feature_mean) / ens.feature_std)
    h, w = fs.shape
    out = []
    with no_grad():
        for p in ens.members:
            logits = _member_logits(p, x, ens.config).data
            out.append(np.argmax(logits, axis=2).T.reshape(ens.config.n_outputs, h, w))
    return np.stack(out)


def predict(ens: EnsembleSegmenter, fs: FeatureStack) -> np.ndarray:
    labels = majority_vote(member_votes(ens, fs), ens.config.n_classes).astype(np.uint8)
    return labels[0] if ens.config.n_outputs == 1 else labels


# -- post-processing and scoring ---------------------------------------------------


def postprocess_components(mask: np.ndarray, min_size: int, background: int = 0) -> np.ndarray:
    """Relabel 4-connected non-background components smaller than ``min_size``
    with the most frequent label on their outer border (lowest on ties).

    Components are handled smallest first, each seeing the labels already
    fixed before it. Stacks of masks are processed slice by slice.
    """
    if min_size < 0:
        raise ValueError(f"min_size must be >= 0, got {min_size}")
    mask = np.asarray(mask)
    if mask.ndim == 3:
        return np.stack([postprocess_components(m, min_size, background) for m in mask])
    out = mask.copy()
    if min_size == 0:
        return out
    small = []
    for cls in np.unique(mask):
        if cls == background:
            continue
        comp, n = ndimage.label(mask == cls, structure=_FOUR_CONNECTED)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        for lab, sl in enumerate(ndimage.find_objects(comp), start=1):
            if sizes[lab] < min_size:
                small.append((int(sizes[lab]), int(cls), lab, sl, comp))
    small.sort(key=lambda t: (t[0], t[1], t[2]))
    h, w = mask.shape
    for _, _, lab, sl, comp in small:
        y0, y1 = max(sl[0].start - 1, 0), min(sl[0].stop + 1, h)
        x0, x1 = max(sl[1].start - 1, 0), min(sl[1].stop + 1, w)
        region = comp[y0:y1, x0:x1] == lab
        ring = ndimage.binary_dilation(region, structure=_FOUR_CONNECTED) & ~region
        around = out[y0:y1, x0:x1][ring]
        if around.size == 0:
            continue
        window = out[y0:y1, x0:x1]
        window[region] = np.argmax(np.bincount(around))
    return out


def dice(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    p, t = pred == class_id, truth == class_id
    denom = int(p.sum()) + int(t.sum())
    return 1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom


def pooled_dice(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], class_id: int) -> float:
    """Dice over the union of all samples (sum of overlaps / sum of sizes)."""
    inter = size = 0
    for p, t in zip(preds, truths):
        pm, tm = np.asarray(p) == class_id, np.asarray(t) == class_id
        inter += int((pm & tm).sum())
        size += int(pm.sum()) + int(tm.sum())
    return 1.0 if size == 0 else 2.0 * inter / size


def dice_report_csv(scores: dict[int, float], names: Optional[Sequence[str]] = None) -> str:
    lines = ["class,dice"]
    for cls, value in scores.items():
        label = names[cls] if names is not None else str(cls)
        lines.append(f"{label},{value!r}")
    return "\n".join(lines) + "\n"


# -- checkpoints ---------------------------------------------------------------------


def save_ensemble(path, ens: EnsembleSegmenter, extra: dict | None = None) -> None:
    names = [[m, k, list(v.shape)] for m, p in enumerate(ens.members) for k, v in p.items()]
    payload = np.concatenate(
        [ens.feature_mean, ens.feature_std] + [v.data.ravel() for p in ens.members for v in p.values()]
    )
    header = {
        "config": encode_json(ens.config.to_dict()),
        "n_features": ens.n_features,
        "member_seeds": encode_json(ens.member_seeds),
        "params": encode_json(names),
        "train_info": encode_json(ens.train_info),
    }
    header.update(extra or {})
    write_container(path, "CS2ENS1", header, payload)


def load_ensemble(path, n_features: Optional[int] = None) -> EnsembleSegmenter:
    _, header, payload = read_container(path, "CS2ENS1")
    try:
        cfg = EnsembleConfig.from_dict(json.loads(header["config"]))
        nf = int(header["n_features"])
        seeds = json.loads(header["member_seeds"])
        names = json.loads(header["params"])
        info = json.loads(header.get("train_info", "{}"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable ensemble header ({exc})") from None
    if n_features is not None and n_features != nf:
        raise CheckpointMismatchError(f"{path}: ensemble expects {nf} features, generator provides {n_features}")
    total = 2 * nf + sum(int(np.prod(s)) for _, _, s in names)
    if total != payload.size:
        raise SizeMismatchError(f"{path}: header declares {total} values, payload holds {payload.size}")
    mean, std = payload[:nf].copy(), payload[nf : 2 * nf].copy()
    members: list[dict[str, Tensor]] = [{} for _ in range(cfg.members)]
    offset = 2 * nf
    for m, name, shape in names:
        size = int(np.prod(shape))
        members[m][name] = parameter(payload[offset : offset + size].reshape(shape).copy(), name)
        offset += size
    return EnsembleSegmenter(members, cfg, nf, seeds, mean, std, info)
