import numpy as np
import pytest
from conftest import fd_gradcheck

from fsgcd.encoder import (LN_EPS, TRAINABLE_FIELDS, EncoderConfig, EncoderGrads,
                           EncoderParams, adapter_forward, encode, encode_backward,
                           encode_with_cache, init_encoder_params, load_checkpoint,
                           save_checkpoint, _layernorm)
from fsgcd.errors import DegenerateDataError, FeatureFormatError, ShapeMismatchError


def small_params(seed=0, dim=7, adapter=3, hidden=9, embed=5, randomize=True):
    rng = np.random.default_rng(seed)
    p = init_encoder_params(EncoderConfig(input_dim=dim, adapter_dim=adapter,
                                          head_hidden=hidden, embed_dim=embed), rng)
    if randomize:
        for name in TRAINABLE_FIELDS:
            getattr(p, name)[...] += rng.normal(0, 0.3, size=getattr(p, name).shape)
    return p


def test_zero_down_projection_disables_adapter():
    p = small_params()
    p.w_down[...] = 0.0
    v = np.random.default_rng(1).normal(size=7)
    out = adapter_forward(v, p)
    ln_f, _ = _layernorm(v[None, :], p.frozen_ln_gain, p.frozen_ln_bias)
    expected = ln_f[0] @ p.frozen_mlp_w + p.frozen_mlp_b + v
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-14)


def test_zero_scale_ignores_adapter_weights():
    p = small_params()
    p.scale = 0.0
    v = np.random.default_rng(2).normal(size=7)
    before = adapter_forward(v, p)
    p.w_down[...] = np.random.default_rng(3).normal(size=p.w_down.shape)
    p.w_up[...] = np.random.default_rng(4).normal(size=p.w_up.shape)
    np.testing.assert_array_equal(adapter_forward(v, p), before)


def _straight_line_forward(v, p):
    # Independent re-evaluation, scalar style: normalize, bottleneck, fuse.
    d = v.size
    mu = sum(v) / d
    var = sum((x - mu) ** 2 for x in v) / d
    xhat = [(x - mu) / np.sqrt(var + LN_EPS) for x in v]
    ln_a = [p.ln_gain[j] * xhat[j] + p.ln_bias[j] for j in range(d)]
    z = [sum(ln_a[j] * p.w_down[j, k] for j in range(d)) for k in range(p.w_down.shape[1])]
    h = [max(val, 0.0) for val in z]
    vbar = [sum(h[k] * p.w_up[k, j] for k in range(len(h))) for j in range(d)]
    mu_f = sum(v) / d
    var_f = sum((x - mu_f) ** 2 for x in v) / d
    xhat_f = [(x - mu_f) / np.sqrt(var_f + LN_EPS) for x in v]
    ln_f = [p.frozen_ln_gain[j] * xhat_f[j] + p.frozen_ln_bias[j] for j in range(d)]
    mlp = [sum(ln_f[i] * p.frozen_mlp_w[i, j] for i in range(d)) + p.frozen_mlp_b[j]
           for j in range(d)]
    return np.array([mlp[j] + v[j] + p.scale * vbar[j] for j in range(d)])


def test_adapter_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(5)
    for seed in range(5):
        p = small_params(seed=seed)
        v = rng.normal(size=7)
        got = adapter_forward(v, p)
        want = _straight_line_forward(v, p)
        assert np.abs(got - want).max() / np.abs(want).max() < 1e-12


def test_encode_unit_norm_and_deterministic():
    p = small_params()
    x = np.random.default_rng(6).normal(size=(11, 7))
    emb = encode(x, p)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(emb, encode(x, p))


def test_encode_invariant_to_positive_head_rescale():
    p = small_params()
    x = np.random.default_rng(7).normal(size=(4, 7))
    base = encode(x, p)
    p.head_w2[...] *= 3.7
    p.head_b2[...] *= 3.7
    np.testing.assert_allclose(encode(x, p), base, atol=1e-12)


def test_encode_zero_prenorm_raises():
    p = small_params(randomize=False)
    p.head_w2[...] = 0.0
    p.head_b2[...] = 0.0
    with pytest.raises(DegenerateDataError, match="zero embedding"):
        encode(np.ones(7), p)


def test_encode_dimension_mismatch():
    p = small_params()
    with pytest.raises(ShapeMismatchError):
        encode(np.ones(8), p)


def test_layernorm_standardizes():
    rng = np.random.default_rng(8)
    x = rng.normal(2.0, 3.0, size=(40, 13))
    _, xhat = _layernorm(x, np.ones(13), np.zeros(13))
    assert np.abs(xhat.mean(axis=1)).max() < 1e-9
    assert np.abs(xhat.var(axis=1) - 1.0).max() < 1e-9


def test_backward_zero_upstream_gives_zero_grads():
    p = small_params()
    x = np.random.default_rng(9).normal(size=(3, 7))
    _, cache = encode_with_cache(x, p)
    grads = encode_backward(cache, np.zeros((3, 5)))
    for _, g in grads.items():
        assert not g.any()


def test_backward_rejects_nonfinite_upstream():
    p = small_params()
    _, cache = encode_with_cache(np.ones((2, 7)), p)
    bad = np.full((2, 5), np.nan)
    with pytest.raises(DegenerateDataError):
        encode_backward(cache, bad)


def test_backward_has_no_frozen_entries():
    names = {name for name, _ in EncoderGrads(*[np.zeros(1)] * 8).items()}
    assert names == set(TRAINABLE_FIELDS)
    assert "frozen_mlp_w" not in names and "scale" not in names


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(10)
    for seed in range(5):
        p = small_params(seed=seed)
        x = rng.normal(size=(3, 7))
        r = rng.normal(size=(3, 5))
        _, cache = encode_with_cache(x, p)
        grads = encode_backward(cache, r)

        def scalar():
            return float((encode(x, p) * r).sum())

        arrays = [getattr(p, name) for name in TRAINABLE_FIELDS]
        gs = [getattr(grads, name) for name in TRAINABLE_FIELDS]
        assert fd_gradcheck(scalar, arrays, gs) <= 1e-4


def test_trainable_count_stays_below_full_block_finetuning():
    dim, adapter = 768, 64
    p = init_encoder_params(
        EncoderConfig(input_dim=dim, adapter_dim=adapter),
        np.random.default_rng(0))
    count = p.trainable_parameter_count()
    expected = (2 * dim * adapter            # bottleneck
                + 2 * dim                    # adapter layernorm
                + dim * 2048 + 2048          # head layer 1
                + 2048 * 256 + 256)          # head layer 2
    assert count == expected
    # far fewer parameters than fine-tuning one full transformer block (~12 d^2)
    assert count < 12 * dim * dim


def test_checkpoint_roundtrip(tmp_path):
    p = small_params(seed=3)
    path = tmp_path / "p.fsgp"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    for name in TRAINABLE_FIELDS:
        np.testing.assert_array_equal(getattr(q, name),
                                      getattr(p, name).astype(np.float32).astype(np.float64))
    assert q.scale == float(np.float32(p.scale))
    # byte-stable: saving the loaded params reproduces the file
    path2 = tmp_path / "p2.fsgp"
    save_checkpoint(q, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.fsgp"
    path.write_bytes(b"JUNKxxxx")
    with pytest.raises(FeatureFormatError, match="magic"):
        load_checkpoint(path)


def test_adapter_dim_must_be_bottleneck():
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=8, adapter_dim=8)
