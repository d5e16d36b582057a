"""Command-line pipeline: phantom -> maskgen -> guide -> train-gan -> synth
-> train-seg -> infer -> eval.

Every command takes ``--config``, ``--seed`` and ``--out``, writes the
effective configuration to ``<out>/config.ini`` and exits with 0 (ok),
2 (config), 3 (data), 4 (numeric divergence) or 5 (checkpoint mismatch).
Failures also print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .adain_gan import load_checkpoint, log_to_csv, save_checkpoint, synthesize, train_gan
from .config import RunConfig, load_config, to_ini
from .ensemble_seg import (
    FeatureStack,
    extract_pixel_features,
    load_ensemble,
    pooled_dice,
    postprocess_components,
    predict,
    save_ensemble,
    train_ensemble,
)
from .errors import CheckpointMismatchError, Cs2Error, DataError
from .formats import encode_json, read_grid, write_grid
from .guidance import apply_edits, load_edits, load_guidance, save_guidance
from .maskgen import train_unsupervised, trace_to_csv
from .phantom import CLASS_NAMES, phantom_corpus
from .pipeline import guidance_per_channel, stack_guidance
from .volumes import HU_MAX, HU_MIN, HUVolume, load_volume, save_volume, select_2_5d, select_labels, window_hu

log = logging.getLogger("cs2")

_ID = re.compile(r"_(\d+)\.")


# -- helpers ---------------------------------------------------------------------------


def _item_id(path: Path) -> str:
    m = _ID.search(path.name)
    if not m:
        raise DataError(f"cannot find a numeric id in file name {path.name!r}")
    return m.group(1)


def _listing(directory, pattern: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"input directory {d} does not exist")
    files = sorted(d.glob(pattern))
    if not files:
        raise DataError(f"no files matching {pattern!r} in {d}")
    return files


def _prepare_out(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo(out: Path, cfg: RunConfig) -> None:
    (out / "config.ini").write_text(to_ini(cfg), encoding="utf-8")


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _volume_for(ref_dir, item: str) -> Path:
    path = Path(ref_dir) / f"vol_{item}.cs2vol"
    if not path.exists():
        raise DataError(f"reference volume {path} not found")
    return path


def _mask_stack(path) -> np.ndarray:
    grid, _ = read_grid(path, "CS2MSK1")
    return select_labels(grid)


def _reference_choice(ids: Sequence[str], own: str, k: int, seed: int) -> list[str]:
    """Pick ``k`` references for one guidance map, avoiding its own slab when possible."""
    others = [i for i in ids if i != own] or list(ids)
    rng = np.random.default_rng([seed, int(own)])
    order = rng.permutation(len(others))
    picks = [others[j] for j in order[: min(k, len(others))]]
    while len(picks) < k:
        picks.append(others[len(picks) % len(others)])
    return picks


def _load_guidance_dir(cfg: RunConfig, guidance_dir, edits=None):
    out = []
    for path in _listing(guidance_dir, "guide_*.cs2gdf"):
        maps, _ = load_guidance(path)
        if edits:
            maps = [apply_edits(m, edits) for m in maps]
        if len(maps) != 4:
            raise DataError(f"{path}: expected 4 guidance channels, found {len(maps)}")
        out.append((_item_id(path), stack_guidance(maps, cfg.window)))
    return out


def _load_reference(cfg: RunConfig, ref_dir, item: str) -> np.ndarray:
    slab = select_2_5d(load_volume(_volume_for(ref_dir, item)))
    return window_hu(slab.values, cfg.window)


def _hu_int16(image_hu: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image_hu), HU_MIN, HU_MAX).astype(np.int16)


# -- commands --------------------------------------------------------------------------


def cmd_phantom(cfg: RunConfig, out: Path, n: Optional[int] = None) -> None:
    count = cfg.corpus.n if n is None else n
    seed0 = cfg.stage_seed("phantom") % (2**31)
    for i, ph in enumerate(phantom_corpus(count, cfg.phantom, seed0)):
        item = f"{i:04d}"
        save_volume(out / f"vol_{item}.cs2vol", ph.volume, {"source": item, "phantom_seed": ph.seed})
        write_grid(out / f"truth_{item}.cs2msk", "CS2MSK1", ph.truth, {"source": item})
    log.info("wrote %d phantoms to %s", count, out)


def cmd_maskgen(cfg: RunConfig, in_dir, out: Path) -> None:
    seed = cfg.stage_seed("maskgen")
    for path in _listing(in_dir, "vol_*.cs2vol"):
        item = _item_id(path)
        slab = select_2_5d(load_volume(path))
        norm = window_hu(slab.values, cfg.window)
        masks = []
        for ch in range(norm.shape[0]):
            res = train_unsupervised(norm[ch], cfg.maskgen, seed=seed + ch)
            masks.append(res.mask.labels.astype(np.uint8))
            _write_text(out / f"trace_{item}_c{ch}.csv", trace_to_csv(res.trace))
        extra = {"source": item, "source_slices": ",".join(map(str, slab.source_slices))}
        write_grid(out / f"mask_{item}.cs2msk", "CS2MSK1", np.stack(masks), extra)
    log.info("masks written to %s", out)


def cmd_guide(cfg: RunConfig, masks_dir, volumes_dir, out: Path, edits_file=None) -> None:
    edits = load_edits(edits_file) if edits_file else []
    for path in _listing(masks_dir, "mask_*.cs2msk"):
        item = _item_id(path)
        masks, _ = read_grid(path, "CS2MSK1")
        slab = select_2_5d(load_volume(_volume_for(volumes_dir, item)))
        if masks.shape != slab.values.shape:
            raise DataError(f"{path}: mask stack {masks.shape} does not match slab {slab.values.shape}")
        maps = guidance_per_channel(masks, slab.values)
        if edits:
            maps = [apply_edits(m, edits) for m in maps]
        save_guidance(out / f"guide_{item}.cs2gdf", maps, {"source": item})
    log.info("guidance maps written to %s", out)


def cmd_train_gan(cfg: RunConfig, guidance_dir, reference_dir, out: Path) -> None:
    corpus = [(g, _load_reference(cfg, reference_dir, item)) for item, g in _load_guidance_dir(cfg, guidance_dir)]
    gan_cfg = cfg.seeded().gan
    ckpt = out / "gan.ckpt"
    res = train_gan(
        corpus,
        gan_cfg,
        checkpoint_path=ckpt,
        progress=lambda step, row: log.info("step %d %s", step, row) if step % 100 == 0 else None,
    )
    save_checkpoint(ckpt, res.generator, res.discriminator, gan_cfg, len(res.log))
    _write_text(out / "train_log.csv", log_to_csv(res.log))


def _load_gan(cfg: RunConfig, path):
    gen, _, saved, _ = load_checkpoint(path, cfg.gan)
    return gen, saved


def cmd_synth(cfg: RunConfig, ckpt, guidance_dir, reference_dir, out: Path, n: Optional[int] = None) -> None:
    gen, gan_cfg = _load_gan(cfg, ckpt)
    k = cfg.synth.per_guidance if n is None else n
    guides = _load_guidance_dir(cfg, guidance_dir)
    ref_ids = [_item_id(p) for p in _listing(reference_dir, "vol_*.cs2vol")]
    rows = ["synth,features,guidance_source,reference_source"]
    for item, g in guides:
        for ref in _reference_choice(ref_ids, item, k, cfg.stage_seed("synth")):
            rec = synthesize(gen, g, _load_reference(cfg, reference_dir, ref), gan_cfg, cfg.window)
            name = f"{item}_r{ref}"
            meta = {"source": item, "reference": ref}
            save_volume(out / f"synth_{name}.cs2vol", _as_volume(rec.hu), meta)
            fs = extract_pixel_features(rec)
            write_grid(out / f"feat_{name}.cs2fea", "CS2FEA1", fs.values, meta)
            rows.append(f"synth_{name}.cs2vol,feat_{name}.cs2fea,{item},{ref}")
    _write_text(out / "index.csv", "\n".join(rows) + "\n")


def _as_volume(image_hu: np.ndarray) -> HUVolume:
    return HUVolume(_hu_int16(image_hu))


def _read_labeled_list(path) -> list[tuple[Path, Path]]:
    base = Path(path).parent
    pairs = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read labeled list {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected '<features file> <label file>'")
        pairs.append(tuple(p if os.path.isabs(p) else base / p for p in map(Path, parts)))
    if not pairs:
        raise DataError(f"{path}: no labeled entries")
    return pairs


def cmd_train_seg(cfg: RunConfig, ckpt, labeled_list, out: Path) -> None:
    _, gan_cfg = _load_gan(cfg, ckpt)
    n_features = sum(gan_cfg.dec_widths)
    feats, labels = [], []
    for feat_path, label_path in _read_labeled_list(labeled_list):
        grid, _ = read_grid(feat_path, "CS2FEA1")
        if grid.shape[0] != n_features:
            raise CheckpointMismatchError(f"{feat_path}: {grid.shape[0]} features, generator emits {n_features}")
        feats.append(FeatureStack(grid))
        labels.append(_mask_stack(label_path))
    ens = train_ensemble(feats, labels, cfg.seeded().ensemble)
    save_ensemble(out / "ensemble.ens", ens)


def cmd_infer(cfg: RunConfig, gan_ckpt, ens_ckpt, guidance_dir, reference_dir, out: Path, edits_file=None, n=None) -> None:
    gen, gan_cfg = _load_gan(cfg, gan_ckpt)
    ens = load_ensemble(ens_ckpt, n_features=sum(gan_cfg.dec_widths))
    edits = load_edits(edits_file) if edits_file else None
    k = cfg.synth.per_guidance if n is None else n
    ref_ids = [_item_id(p) for p in _listing(reference_dir, "vol_*.cs2vol")]
    for item, g in _load_guidance_dir(cfg, guidance_dir, edits):
        for ref in _reference_choice(ref_ids, item, k, cfg.stage_seed("synth")):
            rec = synthesize(gen, g, _load_reference(cfg, reference_dir, ref), gan_cfg, cfg.window)
            mask = postprocess_components(predict(ens, extract_pixel_features(rec)), cfg.synth.min_size)
            name = f"{item}_r{ref}"
            meta = {"source": item, "reference": ref}
            save_volume(out / f"image_{name}.cs2vol", _as_volume(rec.hu), meta)
            write_grid(out / f"mask_{name}.cs2msk", "CS2MSK1", mask, meta)


def cmd_eval(cfg: RunConfig, pred_dir, truth_dir, out: Path) -> dict[str, float]:
    preds, truths = [], []
    for path in _listing(pred_dir, "mask_*.cs2msk"):
        grid, header = read_grid(path, "CS2MSK1")
        item = header.get("source") or _item_id(path)
        truth_path = Path(truth_dir) / f"truth_{item}.cs2msk"
        if not truth_path.exists():
            raise DataError(f"no truth mask {truth_path} for prediction {path.name}")
        truth = _mask_stack(truth_path)
        if truth.shape != grid.shape:
            raise DataError(f"{path.name}: prediction {grid.shape} vs truth {truth.shape}")
        preds.append(grid)
        truths.append(truth)
    scores = {CLASS_NAMES[c]: pooled_dice(preds, truths, c) for c in range(1, len(CLASS_NAMES))}
    lines = ["class,dice"] + [f"{name},{value!r}" for name, value in scores.items()]
    _write_text(out / "dice.csv", "\n".join(lines) + "\n")
    return scores


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cs2", description="Desk-scale simultaneous image and mask synthesis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file (defaults embedded; see `cs2 defaults`)")
        p.add_argument("--seed", type=int, help="global seed, overrides [run] seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("phantom", "generate a labeled phantom corpus")
    p.add_argument("--n", type=int, help="number of phantoms (default: [corpus] n)")
    p = add("maskgen", "unsupervised masks for every volume")
    p.add_argument("--in", dest="in_dir", required=True)
    p = add("guide", "mean-HU guidance maps from masks")
    p.add_argument("--masks", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--edits", help="JSON-lines edit file")
    p = add("train-gan", "train the AdaIN generator")
    p.add_argument("--guidance", required=True)
    p.add_argument("--references", required=True)
    p = add("synth", "synthesize images and cache decoder features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--guidance", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--n", type=int, help="references per guidance map (default: [synth] per_guidance)")
    p = add("train-seg", "train the pixel-classifier ensemble")
    p.add_argument("--ckpt", required=True, help="generator checkpoint the features came from")
    p.add_argument("--labeled", required=True, help="list file: '<features file> <label file>' per line")
    p = add("infer", "synthesize paired images and masks")
    p.add_argument("--gan-ckpt", required=True)
    p.add_argument("--ens-ckpt", required=True)
    p.add_argument("--guidance", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--edits", help="JSON-lines edit file applied to every guidance channel")
    p.add_argument("--n", type=int)
    p = add("eval", "Dice of predicted masks against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    sub.add_parser("defaults", help="print the default configuration")
    return parser


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(args) -> None:
    if args.command == "defaults":
        sys.stdout.write(to_ini(RunConfig()))
        return
    cfg = _effective_config(args)
    out = _prepare_out(args.out)
    _echo(out, cfg)
    c = args.command
    if c == "phantom":
        cmd_phantom(cfg, out, args.n)
    elif c == "maskgen":
        cmd_maskgen(cfg, args.in_dir, out)
    elif c == "guide":
        cmd_guide(cfg, args.masks, args.volumes, out, args.edits)
    elif c == "train-gan":
        cmd_train_gan(cfg, args.guidance, args.references, out)
    elif c == "synth":
        cmd_synth(cfg, args.ckpt, args.guidance, args.references, out, args.n)
    elif c == "train-seg":
        cmd_train_seg(cfg, args.ckpt, args.labeled, out)
    elif c == "infer":
        cmd_infer(cfg, args.gan_ckpt, args.ens_ckpt, args.guidance, args.references, out, args.edits, args.n)
    elif c == "eval":
        for name, value in cmd_eval(cfg, args.pred, args.truth, out).items():
            print(f"{name},{value:.4f}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, stream=sys.stderr)
    try:
        run(args)
    except Cs2Error as exc:
        return _fail(exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(DataError(f"{exc.filename}: {exc.strerror}"), DataError.exit_code)
    return 0


def _fail(exc: Exception, code: int) -> int:
    sys.stderr.write(encode_json({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
