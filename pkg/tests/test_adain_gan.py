import numpy as np
import pytest

from cs2.adain_gan import (
    Block,
    GanConfig,
    StyleExtractor,
    audit_architecture,
    content_loss,
    discriminator_forward,
    gan_losses,
    generator_blocks,
    generator_forward,
    generator_loss,
    init_discriminator,
    init_generator,
    load_checkpoint,
    log_to_csv,
    lsgan_d_loss,
    moving_average,
    pair_schedule,
    save_checkpoint,
    style_loss,
    synthesize,
    train_gan,
)
from cs2.errors import CheckpointMismatchError, ConfigError, DataError, DivergenceError
from cs2.numerics import Tensor, channel_stats, grad_check, mse

SMALL = GanConfig(size=16, enc_widths=(8, 16), dec_widths=(16, 8), disc_widths=(8, 8, 8), style_widths=(4, 4, 4, 4))


def _pair(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (cfg.channels, cfg.size, cfg.size) if batch is None else (batch, cfg.channels, cfg.size, cfg.size)
    return rng.random(shape), rng.random(shape)


def _nets(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return init_generator(cfg, rng), init_discriminator(cfg, rng)


def test_block_table_passes_audit():
    blocks = generator_blocks(GanConfig())
    assert audit_architecture(blocks) == []
    kinds = [b.kind for b in blocks]
    assert kinds == ["encoder"] * 2 + ["resblock"] * 3 + ["decoder"] * 2 + ["head"]


def test_audit_flags_violations():
    bad = list(generator_blocks(GanConfig()))
    bad[2] = Block("res1", "resblock", ("conv1", "adain", "relu", "conv2", "skip"))
    bad[0] = Block("enc1", "encoder", ("conv_s2", "relu"))
    problems = audit_architecture(bad)
    assert any("res1" in p for p in problems) and any("enc1" in p for p in problems)


def test_forward_runs_adain_exactly_at_conv_blocks():
    gen, _ = _nets(SMALL)
    g, r = _pair(SMALL)
    rec = generator_forward(gen, g, r, SMALL)
    expected = [b.name for b in generator_blocks(SMALL) if b.kind in ("encoder", "decoder")]
    assert rec.adain_sites == expected


def test_output_shape_and_range():
    gen, _ = _nets(SMALL)
    g, r = _pair(SMALL)
    out = generator_forward(gen, g, r, SMALL).image.data
    assert out.shape == g.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_self_style_is_identity_renormalization():
    gen, _ = _nets(SMALL)
    g, _ = _pair(SMALL)
    rec = generator_forward(gen, g, g, SMALL, keep_site_stats=True)
    for site in ("enc1", "enc2"):
        after, style = rec.site_stats[site]
        np.testing.assert_allclose(after, style, atol=1e-6)


def test_adain_sites_match_style_statistics():
    gen, _ = _nets(SMALL)
    g, r = _pair(SMALL, seed=3, batch=2)
    rec = generator_forward(gen, g, r, SMALL, keep_site_stats=True)
    for after, style in rec.site_stats.values():
        ma, sa = channel_stats(after)
        ms, ss = channel_stats(style)
        assert np.max(np.abs(ma - ms)) < 1e-5
        assert np.max(np.abs(sa - ss)) < 1e-5


def test_zeroed_resblocks_equal_ablation():
    gen, _ = _nets(SMALL)
    for k in gen:
        if k.startswith("res") and ".conv2." in k:
            gen[k].data[...] = 0.0
    g, r = _pair(SMALL, seed=1)
    full = generator_forward(gen, g, r, SMALL).image.data
    cfg0 = GanConfig(**{**SMALL.to_dict(), "n_res": 0})
    ablated = generator_forward({k: v for k, v in gen.items() if not k.startswith("res")}, g, r, cfg0).image.data
    assert np.array_equal(full, ablated)


def test_shape_mismatch():
    gen, _ = _nets(SMALL)
    g, r = _pair(SMALL)
    with pytest.raises(DataError):
        generator_forward(gen, g, r[:, :8], SMALL)


def test_discriminator_emits_patch_map():
    _, disc = _nets(GanConfig())
    x = np.random.default_rng(0).random((2, 4, 64, 64))
    assert discriminator_forward(disc, x).shape == (2, 1, 8, 8)


def test_style_loss_properties():
    ext = StyleExtractor(4, (4, 4, 4, 4), seed=2)
    rng = np.random.default_rng(5)
    a, b = rng.random((4, 16, 16)), rng.random((4, 16, 16))
    assert style_loss(Tensor(a), a, ext).item() == 0.0
    assert style_loss(Tensor(a), b, ext).item() == pytest.approx(style_loss(Tensor(b), a, ext).item(), rel=1e-12)
    perm = rng.permutation(256)
    shuffled = a.reshape(4, -1)[:, perm].reshape(4, 16, 16)
    l1 = style_loss(Tensor(a), b, ext, layers=(0,)).item()
    l1_perm = style_loss(Tensor(shuffled), b, ext, layers=(0,)).item()
    assert l1_perm == pytest.approx(l1, rel=1e-10)
    assert style_loss(Tensor(shuffled), b, ext).item() != pytest.approx(style_loss(Tensor(a), b, ext).item(), rel=1e-6)


def test_content_loss_is_mse():
    rng = np.random.default_rng(6)
    a, b = rng.random((4, 8, 8)), rng.random((4, 8, 8))
    assert content_loss(Tensor(a), a).item() == 0.0
    assert content_loss(Tensor(a + 0.1), a).item() == pytest.approx(0.01, rel=1e-9)
    assert content_loss(Tensor(a), b).item() == mse(Tensor(a), Tensor(b)).item()


def test_perfect_discriminator_zero_loss():
    assert lsgan_d_loss(Tensor(np.ones((1, 4, 4))), Tensor(np.zeros((1, 4, 4)))).item() == 0.0


def test_loss_decomposition_and_gating():
    gen, disc = _nets(SMALL)
    g, r = _pair(SMALL, seed=2)
    ext = StyleExtractor.from_config(SMALL)
    rec = generator_forward(gen, g, r, SMALL)
    g_loss, d_loss, comps = gan_losses(rec, r, g, disc, SMALL, ext)
    weighted = SMALL.lambda_adv * comps["g_adv"] + SMALL.lambda_style * comps["g_style"] + SMALL.lambda_content * comps["g_content"]
    assert abs(g_loss.item() - weighted) < 1e-12
    assert comps["d_loss"] == d_loss.item()
    content_only = GanConfig(**{**SMALL.to_dict(), "lambda_adv": 0.0, "lambda_style": 0.0})
    g_only, _, c = gan_losses(rec, r, g, disc, content_only, ext)
    assert g_only.item() == content_only.lambda_content * c["g_content"]


def test_generator_loss_gradients():
    cfg = GanConfig(size=16)
    gen, disc = _nets(cfg, seed=11)
    g, r = _pair(cfg, seed=12)
    ext = StyleExtractor.from_config(cfg)
    worst = 0.0
    for name in gen:
        def f(t, name=name):
            params = dict(gen)
            params[name] = t
            rec = generator_forward(params, g, r, cfg)
            return generator_loss(rec.image, r, g, disc, cfg, ext)[0]

        worst = max(worst, grad_check(f, gen[name].data.copy(), n_coords=4, seed=1))
    assert worst < 1e-3


def test_config_validation():
    with pytest.raises(ConfigError):
        GanConfig(lambda_adv=0, lambda_style=0, lambda_content=0)
    with pytest.raises(ConfigError):
        GanConfig(lambda_style=-1)
    with pytest.raises(ConfigError):
        GanConfig(dec_widths=(48, 32))
    assert GanConfig.from_dict(GanConfig().to_dict()) == GanConfig()


def test_pairs_never_correspond():
    for gi, ri in pair_schedule(9, 3, 40, seed=4):
        assert not np.any(gi == ri)


def _tiny_corpus(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.random((4, 16, 16)), rng.random((4, 16, 16))) for _ in range(n)]


def test_smoke_training_finite_and_deterministic(tmp_path):
    cfg = GanConfig(**{**SMALL.to_dict(), "steps": 5, "checkpoint_every": 2})
    a = train_gan(_tiny_corpus(), cfg, checkpoint_path=tmp_path / "a.ckpt")
    b = train_gan(_tiny_corpus(), cfg)
    assert len(a.log) == 5
    assert all(np.isfinite([r.d_loss, r.g_adv, r.g_style, r.g_content]).all() for r in a.log)
    for k in a.generator:
        assert np.array_equal(a.generator[k].data, b.generator[k].data)
    assert log_to_csv(a.log).splitlines()[0] == "step,d_loss,g_adv,g_style,g_content"
    _, _, saved_cfg, step = load_checkpoint(tmp_path / "a.ckpt")
    assert step == 4 and saved_cfg == cfg


def test_divergence_reports_step():
    corpus = _tiny_corpus()
    corpus[3] = (np.full((4, 16, 16), np.nan), corpus[3][1])
    cfg = GanConfig(**{**SMALL.to_dict(), "steps": 20})
    with pytest.raises(DivergenceError) as info:
        train_gan(corpus, cfg)
    assert info.value.step is not None


def test_small_corpus_rejected():
    with pytest.raises(DataError):
        train_gan(_tiny_corpus(1), GanConfig(**{**SMALL.to_dict(), "batch_size": 2}))


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    gen, disc = _nets(SMALL)
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, gen, disc, SMALL, step=7)
    gen2, disc2, cfg, step = load_checkpoint(path, SMALL)
    assert step == 7 and cfg == SMALL
    assert list(gen2) == list(gen) and list(disc2) == list(disc)
    for k in gen:
        assert np.array_equal(gen[k].data, gen2[k].data)
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, GanConfig())


def test_synthesize_deterministic_in_hu():
    gen, _ = _nets(SMALL)
    g, r = _pair(SMALL, seed=9)
    a = synthesize(gen, g, r, SMALL)
    b = synthesize(gen, g, r, SMALL)
    assert np.array_equal(a.image, b.image)
    assert a.hu.min() >= -1024 and a.hu.max() <= 600
    assert set(a.features) == {"dec1", "dec2"}


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(6.0), 3), [1, 2, 3, 4])
    with pytest.raises(DataError):
        moving_average([1.0], 50)


def test_trained_edit_locality(trained_gan):
    from scipy import ndimage

    from cs2.guidance import EditOp, apply_edits
    from cs2.phantom import LUNG, phantom_corpus
    from cs2.pipeline import guidance_per_channel, slab_sample, stack_guidance

    fractions = []
    for k, ph in enumerate(phantom_corpus(5, seed0=20000)):
        s = slab_sample(ph)
        maps = guidance_per_channel(s.labels, s.slab.values)
        ys, xs = np.nonzero(s.labels[1] == LUNG)
        i = len(ys) // 2
        op = EditOp("circle", -600.0, cx=float(xs[i]), cy=float(ys[i]), r=5.0)
        ref = trained_gan.samples[k].normalized()
        base = synthesize(trained_gan.result.generator, stack_guidance(maps), ref, trained_gan.cfg)
        edited = synthesize(trained_gan.result.generator, stack_guidance([apply_edits(m, [op]) for m in maps]), ref, trained_gan.cfg)
        diff = np.abs(edited.hu - base.hu).sum(axis=0)
        near = ndimage.distance_transform_edt(~op.rasterize(diff.shape)) <= 8
        fractions.append(diff[near].sum() / diff.sum())
    assert min(fractions) >= 0.6, fractions
