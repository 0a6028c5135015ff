import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltfuse import nn
from ltfuse.errors import ConfigError, InvalidShapeError, MissingFeatureError
from ltfuse.fusion import (FusionConfig, backward, blend_logits, forward, fuse_map, init_params,
                           latent_fuse, load_checkpoint, param_shapes, params_checksum, project_mask,
                           save_checkpoint)
from ltfuse.gradcheck import TOLERANCE, rel_error, suite_network
from oracles import attention_oracle, project_mask_oracle


def test_project_mask_zero_and_identity():
    rng = np.random.default_rng(0)
    m = rng.random((1, 3, 4))
    assert not project_mask(m, np.zeros(3), np.zeros(3)).any()
    np.testing.assert_array_equal(project_mask(m, np.ones(1), np.zeros(1)), m)


def test_project_mask_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = rng.random((1, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_array_equal(project_mask(m, a, b), project_mask_oracle(m, a, b))


def test_project_mask_rejects_multichannel():
    with pytest.raises(InvalidShapeError):
        project_mask(np.zeros((2, 3, 3)), np.ones(2), np.ones(2))


def test_fuse_map_examples():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((3, 2, 2))
    np.testing.assert_array_equal(fuse_map(np.zeros_like(f), f), f)
    np.testing.assert_array_equal(fuse_map(np.ones_like(f), f), 2 * f)
    assert not fuse_map(-np.ones_like(f), f).any()


def _latent_params(rng, d_cnn, d_sam, d_tok, k):
    return {
        "tok_cnn.w": rng.standard_normal((d_tok, d_cnn)), "tok_cnn.b": rng.standard_normal(d_tok),
        "tok_sam.w": rng.standard_normal((d_tok, d_sam)), "tok_sam.b": rng.standard_normal(d_tok),
        "attn.q": rng.standard_normal((d_tok, d_tok)) * 0.5, "attn.k": rng.standard_normal((d_tok, d_tok)) * 0.5,
        "attn.v": rng.standard_normal((d_tok, d_tok)),
        "fc_sam.w": rng.standard_normal((k, 2 * d_tok)), "fc_sam.b": rng.standard_normal(k),
    }


def test_latent_fuse_zero_params():
    p = {k: np.zeros_like(v) for k, v in _latent_params(np.random.default_rng(0), 3, 2, 4, 5).items()}
    p["fc_sam.b"] = np.arange(5.0)
    emb, z, _ = latent_fuse(np.ones(3), np.ones(2), p)
    assert not emb.any()
    np.testing.assert_array_equal(z[0], np.arange(5.0))


def test_latent_fuse_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d_cnn, d_sam, d_tok, k = (int(v) for v in rng.integers(1, 7, size=4))
        p = _latent_params(rng, d_cnn, d_sam, d_tok, k)
        v_cnn, v_sam = rng.standard_normal((3, d_cnn)), rng.standard_normal((3, d_sam))
        emb, z, _ = latent_fuse(v_cnn, v_sam, p)
        for i in range(3):
            ref_emb, ref_z = attention_oracle(v_cnn[i], v_sam[i], p)
            np.testing.assert_allclose(emb[i], ref_emb, atol=1e-10, rtol=0)
            np.testing.assert_allclose(z[i], ref_z, atol=1e-10, rtol=0)


def test_latent_fuse_token_swap_with_tied_projections():
    rng = np.random.default_rng(4)
    p = _latent_params(rng, 3, 3, 4, 2)
    p["tok_sam.w"], p["tok_sam.b"] = p["tok_cnn.w"], p["tok_cnn.b"]
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    e1, _, _ = latent_fuse(a, b, p)
    e2, _, _ = latent_fuse(b, a, p)
    np.testing.assert_allclose(e1[0, :4], e2[0, 4:], atol=1e-12)
    np.testing.assert_allclose(e1[0, 4:], e2[0, :4], atol=1e-12)


def test_blend_examples():
    np.testing.assert_array_equal(blend_logits([2.0, 0.0], [0.0, 2.0], 0.5), [1.0, 1.0])
    rng = np.random.default_rng(5)
    zs, zc = rng.standard_normal(4), rng.standard_normal(4)
    assert blend_logits(zs, zc, 1.0).tobytes() == zc.tobytes()
    assert blend_logits(zs, zc, 0.0).tobytes() == zs.tobytes()
    with pytest.raises(ConfigError):
        blend_logits(zs, zc, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=6), st.randoms())
def test_blend_at_one_keeps_argmax(zc, rnd):
    zc = np.array(zc)
    zs = np.array([rnd.uniform(-1e6, 1e6) for _ in zc])
    assert np.argmax(blend_logits(zs, zc, 1.0)) == np.argmax(zc)


def _cfg(**kw):
    base = dict(num_classes=4, image_shape=(8, 8, 1), stage_channels=(3, 4, 5), d_sam=3, d_tok=4)
    base.update(kw)
    return FusionConfig(**base)


def _inputs(cfg, rng, n=3):
    images = rng.standard_normal((n,) + cfg.image_shape)
    masks = rng.random((n, 1) + cfg.mask_hw) if cfg.map_fusion_stage is not None else None
    v_sam = rng.standard_normal((n, cfg.d_sam)) if cfg.latent_fusion else None
    return images, masks, v_sam


def test_plain_network_logits_are_cnn_head():
    cfg = _cfg()
    p = init_params(cfg, 0)
    images, _, _ = _inputs(cfg, np.random.default_rng(0))
    tr = forward(p, cfg, images)
    np.testing.assert_array_equal(tr.z, tr.z_cnn)
    assert tr.z_sam is None and tr.embedding is tr.v_cnn


def test_alpha_one_equals_fusion_disabled_path():
    on = _cfg(latent_fusion=True, alpha=1.0)
    off = _cfg()
    p_on, p_off = init_params(on, 3), init_params(off, 3)
    for name in p_off:
        np.testing.assert_array_equal(p_on[name], p_off[name])
    images, _, v_sam = _inputs(on, np.random.default_rng(1))
    assert forward(p_on, on, images, v_sam=v_sam).z.tobytes() == forward(p_off, off, images).z.tobytes()


def test_alpha_zero_ignores_cnn_head():
    cfg = _cfg(latent_fusion=True, alpha=0.0)
    p = init_params(cfg, 1)
    images, _, v_sam = _inputs(cfg, np.random.default_rng(2))
    z1 = forward(p, cfg, images, v_sam=v_sam).z
    p2 = dict(p, **{"fc_cnn.w": p["fc_cnn.w"] * 7.0 + 1.0, "fc_cnn.b": p["fc_cnn.b"] - 3.0})
    assert forward(p2, cfg, images, v_sam=v_sam).z.tobytes() == z1.tobytes()


def test_forward_eval_deterministic():
    cfg = _cfg(map_fusion_stage=1, latent_fusion=True)
    p = init_params(cfg, 0)
    images, masks, v_sam = _inputs(cfg, np.random.default_rng(3))
    a = forward(p, cfg, images, masks, v_sam)
    b = forward(p, cfg, images, masks, v_sam)
    for field in ("z", "z_cnn", "z_sam", "embedding", "f_fused"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_forward_requires_side_inputs():
    cfg = _cfg(latent_fusion=True)
    p = init_params(cfg, 0)
    with pytest.raises(MissingFeatureError):
        forward(p, cfg, np.zeros((1, 8, 8, 1)))


def test_train_mode_needs_rng():
    cfg = _cfg()
    with pytest.raises(ConfigError):
        forward(init_params(cfg, 0), cfg, np.zeros((1, 8, 8, 1)), mode="train")


def test_zero_mask_projection_is_noop():
    fused = _cfg(map_fusion_stage=1)
    plain = _cfg()
    p = init_params(fused, 0)
    p["mask.a"][:] = 0.0
    p["mask.b"][:] = 0.0
    images, masks, _ = _inputs(fused, np.random.default_rng(4))
    y = np.array([0, 1, 2])
    t1 = forward(p, fused, images, masks)
    t2 = forward({k: v for k, v in p.items() if not k.startswith("mask.")}, plain, images)
    np.testing.assert_array_equal(t1.z, t2.z)
    g1 = backward(p, fused, t1, nn.cross_entropy(t1.z, y)[1])
    g2 = backward(p, plain, t2, nn.cross_entropy(t2.z, y)[1])
    for name in g2:
        np.testing.assert_array_equal(g1[name], g2[name])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50, allow_nan=False), st.booleans(), st.booleans())
def test_trace_shapes_depend_only_on_config(seed, scale, map_on, lat_on):
    cfg = _cfg(map_fusion_stage=2 if map_on else None, latent_fusion=lat_on)
    p = init_params(cfg, 0)
    images, masks, v_sam = _inputs(cfg, np.random.default_rng(seed), n=2)
    tr = forward(p, cfg, images * scale, masks, v_sam)
    assert tr.z.shape == tr.z_cnn.shape == (2, cfg.num_classes)
    assert tr.v_cnn.shape == (2, cfg.d_cnn)
    assert tr.embedding.shape == (2, cfg.feature_dim)
    if lat_on:
        assert tr.z_sam.shape == (2, cfg.num_classes)
        assert tr.v_concat.shape == (2, cfg.d_cnn + cfg.d_sam)
    if map_on:
        assert tr.f_fused.shape == (2, 5) + cfg.mask_hw


@pytest.mark.parametrize("seed", range(5))
def test_network_gradients_match_finite_differences(seed):
    for analytic, numeric in suite_network(seed):
        assert rel_error(analytic, numeric) < TOLERANCE


def test_param_groups_follow_switches():
    names = set(param_shapes(_cfg()))
    assert not any(n.startswith(("mask.", "attn.", "tok_", "fc_sam")) for n in names)
    names = set(param_shapes(_cfg(map_fusion_stage=0, latent_fusion=True)))
    assert {"mask.a", "mask.b", "attn.q", "fc_sam.w"} <= names


def test_embedding_dim_contract():
    with pytest.raises(ConfigError):
        _cfg(embedding_dim=5)
    assert _cfg(embedding_dim=5 + 3).embedding_dim == 8


def test_checkpoint_roundtrip(tmp_path):
    cfg = _cfg(map_fusion_stage=1, latent_fusion=True)
    p = init_params(cfg, 9)
    save_checkpoint(tmp_path / "ck", p, cfg, extra={"note": 1})
    back, cfg2, extra = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and extra == {"note": 1}
    assert params_checksum(back) == params_checksum(p)
