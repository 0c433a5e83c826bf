import numpy as np
import pytest

from voxvid.backbone import (
    Denoiser,
    ModelConfig,
    count_attention_elements,
    timestep_features,
)
from voxvid.diffusion import ParameterError
from voxvid.nn import attention, patchify, sinusoidal_embedding, unpatchify
from voxvid.tensor import Tensor, ShapeError, backward

from conftest import tiny_config


def _random_inputs(cfg, rng, batch=1):
    hl, wl, ch = cfg.latent
    return {
        "latent": rng.standard_normal((batch, cfg.frames, hl, wl, ch)).astype(np.float32),
        "t": rng.integers(1, 1000, size=batch),
        "portrait": rng.standard_normal((batch, hl, wl, ch)).astype(np.float32),
        "audio_tokens": rng.standard_normal(
            (batch, cfg.frames, cfg.audio_tokens, cfg.hidden)
        ).astype(np.float32),
    }


def test_patchify_paper_shape():
    x = Tensor(np.zeros((16, 32, 32, 4), dtype=np.float32))
    tok = patchify(x, 2)
    assert tok.shape == (16, 256, 16)


def test_patchify_p1_is_reshape(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    tok = patchify(Tensor(x), 1)
    np.testing.assert_array_equal(tok.data, x.reshape(2, 16, 3))


def test_patchify_roundtrip(rng):
    x = rng.standard_normal((3, 8, 6, 5))
    tok = patchify(Tensor(x), 2)
    back = unpatchify(tok, 2, 8, 6, 5)
    np.testing.assert_array_equal(back.data, x)


def test_unpatchify_splits_double_channels(rng):
    tok = Tensor(rng.standard_normal((16, 256, 2 * 2 * 8)).astype(np.float32))
    out = unpatchify(tok, 2, 32, 32, 8)
    assert out.shape == (16, 32, 32, 8)
    assert out[..., :4].shape == (16, 32, 32, 4)


def test_sinusoidal_position_zero():
    emb = sinusoidal_embedding([0], 8)[0]
    np.testing.assert_array_equal(emb[:4], 0.0)
    np.testing.assert_array_equal(emb[4:], 1.0)


def test_timestep_embeddings_distinct():
    emb = timestep_features(np.arange(1, 1001))
    # All pairwise-distinct: sorting row hashes is O(n log n) vs O(n^2).
    assert len({row.tobytes() for row in emb}) == 1000


def test_count_attention_elements():
    assert count_attention_elements(16, 256, factorized=False) == 16_777_216
    assert count_attention_elements(16, 256, factorized=True) == 1_114_112
    # At F=1 the factorized form adds P trivial 1x1 temporal matrices.
    assert count_attention_elements(1, 7, True) == count_attention_elements(1, 7, False) + 7
    with pytest.raises(ParameterError):
        count_attention_elements(0, 4, True)


def test_zero_init_head_outputs_zero(rng):
    cfg = tiny_config()
    model = Denoiser(cfg, seed=0)
    inp = _random_inputs(cfg, rng)
    out = model.forward(**inp)
    assert np.all(out.eps_pred.data == 0.0)
    assert np.all(out.v_pred.data == 0.0)
    hl, wl, ch = cfg.latent
    assert out.eps_pred.shape == (1, cfg.frames, hl, wl, ch)


def test_gradient_reaches_head_weights(rng):
    cfg = tiny_config()
    model = Denoiser(cfg, seed=0)
    # Randomize so gates are open and the loss is nonzero.
    for p in model.params.values():
        p.data[...] = rng.standard_normal(p.data.shape).astype(np.float32) * 0.02
    inp = _random_inputs(cfg, rng)
    out = model.forward(**inp)
    backward((out.eps_pred * out.eps_pred).sum() + (out.v_pred * out.v_pred).sum())
    g = model.params["final.head.w"].grad
    assert g is not None and np.any(g != 0.0)


def test_attention_weight_shape_and_rows(rng):
    f, p, d, heads = 3, 5, 8, 2
    x = Tensor(rng.standard_normal((f, p, d)).astype(np.float32))
    w = [Tensor(rng.standard_normal((d, d)).astype(np.float32) * 0.1) for _ in range(4)]
    rec = []
    attention(x, x, *w, heads=heads, record=rec, tag="probe")
    assert rec[0]["weights_shape"] == (f, heads, p, p)


def test_single_key_attention_weight_is_one(rng):
    d = 8
    q = Tensor(rng.standard_normal((1, 3, d)).astype(np.float32))
    kv = Tensor(rng.standard_normal((1, 1, d)).astype(np.float32))
    w = [Tensor(np.eye(d, dtype=np.float32)) for _ in range(4)]
    out = attention(q, kv, *w, heads=2)
    # softmax over one key == 1, so every query returns the single value row.
    expect = attention(kv, kv, *w, heads=2).data[:, 0]
    np.testing.assert_allclose(out.data, np.broadcast_to(expect[:, None], out.shape),
                               rtol=1e-5)


def test_motion_kv_extends_key_axis(rng):
    cfg = tiny_config()
    model = Denoiser(cfg, seed=1)
    inp = _random_inputs(cfg, rng)
    hl, wl, ch = cfg.latent
    motion = rng.standard_normal((1, 2, hl, wl, ch)).astype(np.float32)
    rec = []
    model.forward(**inp, motion_latents=motion, record=rec)
    temporal = [r for r in rec if "temporal" in r["tag"]]
    assert len(temporal) == cfg.layers
    for r in temporal:
        assert r["weights_shape"][-1] == cfg.frames + 2
        assert r["weights_shape"][-2] == cfg.frames


def test_bridge_is_not_a_noop(rng):
    cfg = tiny_config()
    model = Denoiser(cfg, seed=2)
    for p in model.params.values():
        p.data[...] = rng.standard_normal(p.data.shape).astype(np.float32) * 0.05
    inp = _random_inputs(cfg, rng)
    base = model.forward(**inp).eps_pred.data.copy()
    for i in range(cfg.layers):
        model.params[f"block{i}.bridge.w"].data[...] = np.eye(cfg.hidden, dtype=np.float32)
        model.params[f"block{i}.bridge.b"].data[...] = 0.0
    ablated = model.forward(**inp).eps_pred.data
    assert np.max(np.abs(base - ablated)) > 0.0


def test_f1_temporal_attention_is_single_key(rng):
    cfg = tiny_config(frames=1)
    model = Denoiser(cfg, seed=3)
    inp = _random_inputs(cfg, rng)
    rec = []
    model.forward(**inp, record=rec)
    for r in rec:
        if "temporal" in r["tag"]:
            assert r["weights_shape"][-2:] == (1, 1)


def test_shape_validation(rng):
    cfg = tiny_config()
    model = Denoiser(cfg, seed=0)
    hl, wl, ch = cfg.latent
    bad = rng.standard_normal((1, cfg.frames + 1, hl, wl, ch)).astype(np.float32)
    with pytest.raises(ShapeError):
        model.forward(bad, np.array([5]), portrait=rng.standard_normal((1, hl, wl, ch)))
    with pytest.raises(ParameterError):
        model.embed_timestep(np.array([0]))


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ParameterError):
        ModelConfig(latent=(5, 4, 4), patch=2)
    with pytest.raises(ParameterError):
        ModelConfig(portrait_fusion="osmotic")
