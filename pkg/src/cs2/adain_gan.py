"""Multiple-AdaIN conditional generator, patch discriminator and their losses.

The generator runs the guidance map (content) and the reference slab (style)
through one shared encoder. Every encoder and decoder conv block normalizes
its content features with reference-stream statistics; residual blocks do
not. The network is described by a block table that both the forward pass
and the architecture audit read, so the audit checks what actually runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointMismatchError, ConfigError, DataError, DivergenceError, SizeMismatchError
from .formats import encode_json, header_int, read_container, write_container
from .numerics import (
    OptimizerState,
    Tensor,
    adain,
    conv2d,
    gram,
    mse,
    no_grad,
    optimizer_step,
    parameter,
    upsample_nearest,
    zero_grads,
)
from .volumes import DEFAULT_WINDOW, unwindow_hu

Params = dict[str, Tensor]


@dataclass(frozen=True)
class GanConfig:
    size: int = 64
    channels: int = 4
    enc_widths: tuple[int, ...] = (32, 64)
    n_res: int = 3
    dec_widths: tuple[int, ...] = (64, 32)
    disc_widths: tuple[int, ...] = (32, 64, 128)
    style_widths: tuple[int, ...] = (16, 16, 16, 16)
    lambda_adv: float = 1.0
    lambda_style: float = 1.0
    lambda_content: float = 10.0
    batch_size: int = 2
    steps: int = 2000
    lr: float = 2e-3
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-5
    seed: int = 0
    style_seed: int = 7
    checkpoint_every: int = 500

    def __post_init__(self):
        weights = (self.lambda_adv, self.lambda_style, self.lambda_content)
        if min(weights) < 0 or max(weights) <= 0:
            raise ConfigError(f"loss weights must be >= 0 with at least one > 0, got {weights}")
        if len(self.dec_widths) != len(self.enc_widths):
            raise ConfigError("need one decoder block per encoder block (each undoes one stride-2 step)")
        if self.size % (2 ** len(self.enc_widths)):
            raise ConfigError(f"size {self.size} must be divisible by {2 ** len(self.enc_widths)}")
        for w in self.dec_widths:
            if w not in self.enc_widths:
                raise ConfigError(f"decoder width {w} has no encoder site with matching channels for style stats")
        if len(self.style_widths) < 1 or self.batch_size < 1 or self.steps < 0 or self.n_res < 0:
            raise ConfigError("style_widths must be non-empty; batch_size >= 1; steps, n_res >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GAN config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def architecture(self) -> dict:
        keys = ("size", "channels", "enc_widths", "n_res", "dec_widths", "disc_widths")
        return {k: getattr(self, k) for k in keys}


# -- block table -----------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    name: str
    kind: str  # encoder | resblock | decoder | head
    ops: tuple[str, ...]


def generator_blocks(cfg: GanConfig) -> tuple[Block, ...]:
    blocks = [Block(f"enc{i}", "encoder", ("conv_s2", "adain", "relu")) for i in range(1, len(cfg.enc_widths) + 1)]
    blocks += [Block(f"res{i}", "resblock", ("conv1", "relu", "conv2", "skip")) for i in range(1, cfg.n_res + 1)]
    blocks += [
        Block(f"dec{i}", "decoder", ("upsample", "conv", "adain", "relu")) for i in range(1, len(cfg.dec_widths) + 1)
    ]
    blocks.append(Block("head", "head", ("conv", "sigmoid")))
    return tuple(blocks)


def audit_architecture(blocks: Sequence[Block]) -> list[str]:
    """Violations of the placement rule: AdaIN in every encoder/decoder conv block, in no ResBlock."""
    problems = []
    for b in blocks:
        has_conv = any(op.startswith("conv") for op in b.ops)
        has_adain = "adain" in b.ops
        if b.kind in ("encoder", "decoder") and not (has_conv and has_adain):
            problems.append(f"{b.name}: {b.kind} conv block without AdaIN")
        if b.kind == "resblock" and has_adain:
            problems.append(f"{b.name}: residual block contains AdaIN")
        if b.kind == "resblock" and "skip" not in b.ops:
            problems.append(f"{b.name}: residual block without identity skip")
    return problems


def _he(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_generator(cfg: GanConfig, rng: np.random.Generator) -> Params:
    """Parameters in their fixed checkpoint order. Convs feeding AdaIN carry no
    bias (the normalization would cancel it); ResBlock convs are bias-free so
    a zeroed second conv makes the block an exact identity."""
    p: Params = {}
    cin = cfg.channels
    for i, w in enumerate(cfg.enc_widths, start=1):
        p[f"enc{i}.w"] = parameter(_he(rng, (w, cin, 3, 3)), f"enc{i}.w")
        cin = w
    for i in range(1, cfg.n_res + 1):
        for j in (1, 2):
            p[f"res{i}.conv{j}.w"] = parameter(_he(rng, (cin, cin, 3, 3)), f"res{i}.conv{j}.w")
    for i, w in enumerate(cfg.dec_widths, start=1):
        p[f"dec{i}.w"] = parameter(_he(rng, (w, cin, 3, 3)), f"dec{i}.w")
        cin = w
    p["head.w"] = parameter(_he(rng, (cfg.channels, cin, 3, 3)), "head.w")
    p["head.b"] = parameter(np.zeros(cfg.channels), "head.b")
    return p


def init_discriminator(cfg: GanConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    cin = cfg.channels
    for i, w in enumerate(cfg.disc_widths, start=1):
        p[f"d{i}.w"] = parameter(_he(rng, (w, cin, 3, 3)), f"d{i}.w")
        p[f"d{i}.b"] = parameter(np.zeros(w), f"d{i}.b")
        cin = w
    p["dout.w"] = parameter(_he(rng, (1, cin, 3, 3)), "dout.w")
    p["dout.b"] = parameter(np.zeros(1), "dout.b")
    return p


# -- forward passes ----------------------------------------------------------------


@dataclass
class SynthesisRecord:
    image: object  # Tensor during training, ndarray after synthesize(); normalized [0, 1]
    features: dict  # decoder block name -> conv output before AdaIN
    guidance: np.ndarray
    reference: np.ndarray
    adain_sites: list = field(default_factory=list)
    site_stats: dict = field(default_factory=dict)  # site -> (content-after-AdaIN, style) arrays
    window: tuple[float, float] = DEFAULT_WINDOW

    @property
    def hu(self) -> np.ndarray:
        img = self.image.data if isinstance(self.image, Tensor) else self.image
        return unwindow_hu(img, self.window)


def _style_site(cfg: GanConfig, dec_index: int) -> str:
    # deepest encoder site whose channel count matches this decoder block
    width = cfg.dec_widths[dec_index]
    for i in range(len(cfg.enc_widths), 0, -1):
        if cfg.enc_widths[i - 1] == width:
            return f"enc{i}"
    raise ConfigError(f"no encoder site with {width} channels")


def generator_forward(
    params: Params,
    guidance,
    reference,
    cfg: GanConfig,
    blocks: Optional[Sequence[Block]] = None,
    keep_site_stats: bool = False,
) -> SynthesisRecord:
    """Run the generator on (C,H,W) or (N,C,H,W) normalized inputs."""
    g = guidance if isinstance(guidance, Tensor) else Tensor(guidance)
    r = reference if isinstance(reference, Tensor) else Tensor(reference)
    if g.shape != r.shape:
        raise DataError(f"guidance shape {g.shape} and reference shape {r.shape} differ")
    if g.shape[-3] != cfg.channels:
        raise DataError(f"expected {cfg.channels} channels, got shape {g.shape}")
    blocks = generator_blocks(cfg) if blocks is None else blocks
    dec_sites = {f"dec{i + 1}": _style_site(cfg, i) for i in range(len(cfg.dec_widths))}
    style_at: dict[str, Tensor] = {}
    record = SynthesisRecord(None, {}, g.data, r.data)
    x, s = g, r
    for block in blocks:
        inp = x
        for op in block.ops:
            if op == "conv_s2":
                w = params[f"{block.name}.w"]
                x = conv2d(x, w, stride=2, padding=1)
                s = conv2d(s, w, stride=2, padding=1)
            elif op == "conv":
                x = conv2d(x, params[f"{block.name}.w"], params.get(f"{block.name}.b"), padding=1)
                if block.kind == "decoder":
                    # cached before AdaIN/ReLU: keeps negative responses, independent of the style shift
                    record.features[block.name] = x
            elif op in ("conv1", "conv2"):
                x = conv2d(x, params[f"{block.name}.{op}.w"], padding=1)
            elif op == "adain":
                if block.kind == "encoder":
                    style_at[block.name] = s
                    style = s
                else:
                    style = style_at[dec_sites[block.name]]
                x = adain(x, style, cfg.eps)
                record.adain_sites.append(block.name)
                if keep_site_stats:
                    record.site_stats[block.name] = (x.data.copy(), style.data.copy())
            elif op == "relu":
                x = x.relu()
                if block.kind == "encoder":
                    s = s.relu()
            elif op == "upsample":
                x = upsample_nearest(x, 2)
            elif op == "skip":
                x = inp + x
            elif op == "sigmoid":
                x = x.sigmoid()
            else:
                raise ValueError(f"unknown op {op!r} in block {block.name}")
    record.image = x
    return record


def discriminator_forward(params: Params, x) -> Tensor:
    """Patch-logit map of shape (..., 1, H/2^k, W/2^k)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    i = 1
    while f"d{i}.w" in params:
        x = conv2d(x, params[f"d{i}.w"], params[f"d{i}.b"], stride=2, padding=1).leaky_relu(0.2)
        i += 1
    return conv2d(x, params["dout.w"], params["dout.b"], padding=1)


# -- style features and losses -----------------------------------------------------


class StyleExtractor:
    """Fixed random conv stack standing in for a pretrained perceptual network.

    Layer 1 is a 1x1 conv (pointwise, so its Gram matrix ignores pixel
    order); later layers are 3x3, the last two with stride 2.
    """

    def __init__(self, channels: int, widths: Sequence[int] = (16, 16, 16, 16), seed: int = 7):
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[Tensor, int, int]] = []
        cin = channels
        for i, w in enumerate(widths):
            k = 1 if i == 0 else 3
            stride = 2 if i >= 2 else 1
            kernel = Tensor(rng.normal(0.0, math.sqrt(2.0 / (cin * k * k)), size=(w, cin, k, k)))
            self.layers.append((kernel, stride, k // 2))
            cin = w

    @classmethod
    def from_config(cls, cfg: GanConfig) -> "StyleExtractor":
        return cls(cfg.channels, cfg.style_widths, cfg.style_seed)

    def features(self, x) -> list[Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        out = []
        for kernel, stride, pad in self.layers:
            x = conv2d(x, kernel, stride=stride, padding=pad).relu()
            out.append(x)
        return out


def style_loss(synth, reference, extractor: StyleExtractor, layers: Optional[Sequence[int]] = None) -> Tensor:
    """Sum over layers of the MSE between Gram matrices; reference is treated as a constant."""
    fs = extractor.features(synth)
    with no_grad():
        fr = extractor.features(reference.detach() if isinstance(reference, Tensor) else reference)
    chosen = range(len(fs)) if layers is None else layers
    total = None
    for i in chosen:
        term = mse(gram(fs[i]), gram(fr[i]))
        total = term if total is None else total + term
    return total


def content_loss(synth, guidance_normalized) -> Tensor:
    return mse(synth, guidance_normalized)


def _lsgan(logits: Tensor, target: float) -> Tensor:
    return ((logits - target) ** 2).mean()


def lsgan_d_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Least-squares discriminator objective: real patches -> 1, fake -> 0."""
    return 0.5 * (_lsgan(real_logits, 1.0) + _lsgan(fake_logits, 0.0))


def discriminator_loss(disc: Params, real, fake) -> Tensor:
    fake = fake.detach() if isinstance(fake, Tensor) else fake
    return lsgan_d_loss(discriminator_forward(disc, real), discriminator_forward(disc, fake))


def generator_loss(synth: Tensor, reference, guidance, disc: Params, cfg: GanConfig, extractor: StyleExtractor):
    adv = _lsgan(discriminator_forward(disc, synth), 1.0)
    sty = style_loss(synth, reference, extractor)
    con = content_loss(synth, guidance)
    total = cfg.lambda_adv * adv + cfg.lambda_style * sty + cfg.lambda_content * con
    return total, {"g_adv": adv.item(), "g_style": sty.item(), "g_content": con.item()}


def _check_finite(components: dict, step=None, checkpoint=None) -> None:
    for name, value in components.items():
        if not math.isfinite(value):
            where = f" at step {step}" if step is not None else ""
            raise DivergenceError(f"non-finite {name}{where}", step=step, checkpoint=checkpoint)


def gan_losses(gen_out: SynthesisRecord, reference, guidance, disc: Params, cfg: GanConfig, extractor: StyleExtractor):
    """Return (g_loss, d_loss, components) for one batch, all components checked finite."""
    synth = gen_out.image
    d_loss = discriminator_loss(disc, reference, synth)
    g_loss, comps = generator_loss(synth, reference, guidance, disc, cfg, extractor)
    comps = {"d_loss": d_loss.item(), **comps}
    _check_finite(comps)
    return g_loss, d_loss, comps


# -- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class LogRow:
    step: int
    d_loss: float
    g_adv: float
    g_style: float
    g_content: float


@dataclass
class GanResult:
    generator: Params
    discriminator: Params
    log: list[LogRow]
    config: GanConfig


def log_to_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "d_loss", "g_adv", "g_style", "g_content"])
    for r in rows:
        writer.writerow([r.step, repr(r.d_loss), repr(r.g_adv), repr(r.g_style), repr(r.g_content)])
    return buf.getvalue()


def _non_corresponding(rng: np.random.Generator, order: np.ndarray) -> np.ndarray:
    """A reference order with refs[k] != order[k] for every position (n >= 2)."""
    n = order.size
    refs = rng.permutation(n)
    if n < 2:
        return refs
    for k in range(n):
        if refs[k] == order[k]:
            j = (k + 1) % n
            refs[k], refs[j] = refs[j], refs[k]
    return refs


def pair_schedule(n: int, batch_size: int, steps: int, seed: int):
    """Yield (guidance_idx, reference_idx) batches; pairs are re-drawn every epoch."""
    rng = np.random.default_rng([seed, 1])
    per_epoch = n // batch_size
    done = 0
    while done < steps:
        order = rng.permutation(n)
        refs = _non_corresponding(rng, order)
        for b in range(per_epoch):
            if done == steps:
                return
            sl = slice(b * batch_size, (b + 1) * batch_size)
            yield order[sl], refs[sl]
            done += 1


def train_gan(
    corpus: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: GanConfig,
    checkpoint_path=None,
    progress=None,
) -> GanResult:
    """Alternating least-squares D/G training on normalized (guidance, reference) pairs.

    ``corpus[i]`` holds a guidance map and the slab it was derived from; the
    schedule never pairs a guidance map with its own slab.
    """
    if len(corpus) < cfg.batch_size:
        raise DataError(f"corpus of {len(corpus)} pairs is smaller than batch size {cfg.batch_size}")
    guid = np.stack([np.asarray(g, dtype=np.float64) for g, _ in corpus])
    refs = np.stack([np.asarray(r, dtype=np.float64) for _, r in corpus])
    expected = (cfg.channels, cfg.size, cfg.size)
    if guid.shape[1:] != expected or refs.shape[1:] != expected:
        raise DataError(f"corpus items must be {expected}, got {guid.shape[1:]} / {refs.shape[1:]}")

    rng = np.random.default_rng(cfg.seed)
    gen = init_generator(cfg, rng)
    disc = init_discriminator(cfg, rng)
    extractor = StyleExtractor.from_config(cfg)
    g_state = OptimizerState(learning_rate=cfg.lr, betas=tuple(cfg.betas))
    d_state = OptimizerState(learning_rate=cfg.lr, betas=tuple(cfg.betas))
    log: list[LogRow] = []
    last_ckpt = None

    for step, (gi, ri) in enumerate(pair_schedule(len(corpus), cfg.batch_size, cfg.steps, cfg.seed)):
        g_batch, r_batch = Tensor(guid[gi]), Tensor(refs[ri])
        out = generator_forward(gen, g_batch, r_batch, cfg)
        synth = out.image
        try:
            zero_grads(disc)
            d_loss = discriminator_loss(disc, r_batch, synth)
            _check_finite({"d_loss": d_loss.item()}, step, last_ckpt)
            d_loss.backward()
            optimizer_step(disc, d_state)

            zero_grads(gen)
            g_loss, comps = generator_loss(synth, r_batch, g_batch, disc, cfg, extractor)
            _check_finite(comps, step, last_ckpt)
            g_loss.backward()
            optimizer_step(gen, g_state)
        except DivergenceError as exc:
            if exc.step is None:
                raise DivergenceError(f"{exc} at step {step}", step=step, checkpoint=last_ckpt) from None
            raise
        log.append(LogRow(step, d_loss.item(), comps["g_adv"], comps["g_style"], comps["g_content"]))
        if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, gen, disc, cfg, step + 1)
            last_ckpt = str(checkpoint_path)
        if progress is not None:
            progress(step, log[-1])
    return GanResult(gen, disc, log, cfg)


def synthesize(gen: Params, guidance, reference, cfg: GanConfig, window=DEFAULT_WINDOW) -> SynthesisRecord:
    """Inference pass with detached outputs; ``record.hu`` gives the image in HU."""
    with no_grad():
        rec = generator_forward(gen, np.asarray(guidance, dtype=np.float64), np.asarray(reference, dtype=np.float64), cfg)
    rec.image = rec.image.data
    rec.features = {k: v.data for k, v in rec.features.items()}
    rec.window = tuple(window)
    return rec


def moving_average(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise DataError(f"need at least {window} values for a window-{window} moving average, got {v.size}")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, gen: Params, disc: Params, cfg: GanConfig, step: int, extra: dict | None = None) -> None:
    names = [("G", k, list(v.shape)) for k, v in gen.items()] + [("D", k, list(v.shape)) for k, v in disc.items()]
    payload = np.concatenate([v.data.ravel() for v in gen.values()] + [v.data.ravel() for v in disc.values()])
    header = {"config": encode_json(cfg.to_dict()), "step": step, "params": encode_json(names)}
    header.update(extra or {})
    write_container(path, "CS2CKP1", header, payload)


def load_checkpoint(path, cfg: Optional[GanConfig] = None) -> tuple[Params, Params, GanConfig, int]:
    _, header, payload = read_container(path, "CS2CKP1")
    try:
        saved = GanConfig.from_dict(json.loads(header["config"]))
        names = json.loads(header["params"])
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: checkpoint header lacks a readable config/params entry ({exc})") from None
    if cfg is not None and cfg.architecture() != saved.architecture():
        raise CheckpointMismatchError(
            f"{path}: checkpoint architecture {saved.architecture()} does not match config {cfg.architecture()}"
        )
    total = sum(int(np.prod(shape)) for _, _, shape in names)
    if total != payload.size:
        raise SizeMismatchError(f"{path}: params header declares {total} values, payload holds {payload.size}")
    gen: Params = {}
    disc: Params = {}
    offset = 0
    for owner, name, shape in names:
        size = int(np.prod(shape))
        arr = payload[offset : offset + size].reshape(shape).copy()
        offset += size
        (gen if owner == "G" else disc)[name] = parameter(arr, name)
    ref_gen = init_generator(saved, np.random.default_rng(0))
    if {k: v.shape for k, v in ref_gen.items()} != {k: v.shape for k, v in gen.items()}:
        raise CheckpointMismatchError(f"{path}: generator parameters do not match the stored config")
    return gen, disc, saved, header_int(header, "step", path)
