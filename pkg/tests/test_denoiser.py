import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from syncanim import denoiser as dn
from syncanim import tensorcore as tc
from syncanim.diffusion import make_condition
from syncanim.tensorcore import Tensor

from conftest import tiny_config
from helpers import random_batch, randomize_audio


def _forward(model, batch, null_audio=False, t=500):
    with tc.no_grad():
        cond = make_condition(model, batch, False, False, null_audio)
        return model.forward(Tensor(batch.x0), t, cond).data


def test_config_validation():
    with pytest.raises(dn.ModelConfigError):
        tiny_config(d_model=15)
    with pytest.raises(dn.ModelConfigError):
        tiny_config(audio_width=7)
    with pytest.raises(dn.ModelConfigError):
        tiny_config(S=9)


def test_partition_is_audio_only(tiny_model):
    part = tiny_model.partition()
    assert part.trainable_names
    assert all(dn._is_audio_param(n) for n in part.trainable_names)
    assert not any(dn._is_audio_param(n) for n in part.frozen_names)
    expected = {n for n in tiny_model.params if "audio_xattn" in n or n.startswith("audio_proj")}
    assert set(part.trainable_names) == expected
    assert "audio_proj.null" in part.trainable_names
    assert 0 < part.trainable_fraction < 0.5
    assert "trainable" in part.report()


def test_output_projection_starts_at_zero(tiny_model):
    for p in tiny_model.trainable_parameters():
        if p.name.endswith("w_o"):
            assert np.all(p.data == 0)


def test_zero_init_audio_is_inert(tiny_model):
    batch = random_batch(tiny_model, 2)
    assert np.array_equal(_forward(tiny_model, batch), _forward(tiny_model, batch, null_audio=True))


def test_audio_matters_after_training_signal(tiny_model):
    randomize_audio(tiny_model)
    batch = random_batch(tiny_model, 2)
    assert not np.array_equal(_forward(tiny_model, batch), _forward(tiny_model, batch, null_audio=True))


def test_nulled_audio_ignores_tokens(tiny_model):
    randomize_audio(tiny_model)
    a = random_batch(tiny_model, 2, seed=1)
    b = random_batch(tiny_model, 2, seed=1)
    b.features = [f + 5.0 for f in b.features]
    assert np.array_equal(_forward(tiny_model, a, True), _forward(tiny_model, b, True))


def test_cross_attention_locality(tiny_model):
    """Frame k's audio update ignores tokens outside its window, bit for bit."""
    randomize_audio(tiny_model)
    B, d = 1, tiny_model.cfg.d_model
    r = np.random.default_rng(5)
    h = Tensor(r.normal(size=(B, tiny_model.cfg.K, tiny_model.cfg.S, d)))
    mask = tiny_model.audio_mask().visible
    T = mask.shape[1]
    toks = r.normal(size=(B, T + 1, d))
    times = tiny_model.token_layout[0][2]
    win = dn.AudioWindow.build(mask, np.zeros(B, dtype=bool), times, d)
    with tc.no_grad():
        base = tiny_model.audio_cross_attention(h, Tensor(toks), win, 0).data
    for k in (0, 5, 11):
        hidden = np.flatnonzero(~mask[k])
        pert = toks.copy()
        pert[:, hidden] += r.normal(size=(B, hidden.size, d)) * 10
        with tc.no_grad():
            out = tiny_model.audio_cross_attention(h, Tensor(pert), win, 0).data
        assert np.array_equal(out[:, k], base[:, k])
        seen = np.flatnonzero(mask[k])
        pert2 = toks.copy()
        pert2[:, seen[0]] += 1.0
        with tc.no_grad():
            out2 = tiny_model.audio_cross_attention(h, Tensor(pert2), win, 0).data
        assert not np.array_equal(out2[:, k], base[:, k])


def test_audio_window_dense_matches_mask(tiny_model):
    mask = tiny_model.audio_mask().visible
    T = mask.shape[1]
    flags = np.array([False, True])
    win = dn.AudioWindow.build(mask, flags, np.linspace(0, 2, T), 16)
    dense = win.dense(T)
    assert np.array_equal(dense[0, :, :T], mask) and not dense[0, :, T].any()
    assert not dense[1, :, :T].any() and dense[1, :, T].all()


def test_chunk_mask_variant():
    model, _ = dn.build_model(tiny_config(use_chunk_mask=True), seed=0)
    m = model.audio_mask().visible
    assert np.all(m.sum(axis=0) == 1)


def test_shape_and_condition_errors(tiny_model):
    batch = random_batch(tiny_model, 1)
    cond = make_condition(tiny_model, batch, False, False, False)
    with pytest.raises(tc.DimensionError):
        tiny_model.forward(Tensor(batch.x0[:, :5]), 10, cond)
    cond.audio = None
    with pytest.raises(dn.ConditionError):
        tiny_model.forward(Tensor(batch.x0), 10, cond)


def test_state_hash_tracks_partition(tiny_model):
    fr, tr = tiny_model.state_hash(False), tiny_model.state_hash(True)
    randomize_audio(tiny_model)
    assert tiny_model.state_hash(False) == fr
    assert tiny_model.state_hash(True) != tr


def test_precondition_keeps_weights_bounded():
    from syncanim.schedule import NoiseSchedule

    t = np.arange(1, 1001)
    c_skip, c_out = NoiseSchedule().precondition(t, 0.5)
    assert np.all(np.isfinite(c_skip)) and np.all(c_out > 0)
    assert c_skip.max() < 1.2 and c_out.max() <= 1.0
    # c_skip is the regression slope of the noise on x_t; check it by sampling
    r = np.random.default_rng(0)
    ab = NoiseSchedule().ab(300)
    x0, eps = r.normal(0, 0.5, 200_000), r.normal(size=200_000)
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    slope = np.dot(xt, eps) / np.dot(xt, xt)
    assert slope == pytest.approx(c_skip[299], rel=0.02)
    assert np.std(eps - slope * xt) == pytest.approx(c_out[299], rel=0.02)
    # at the last step x_t is almost pure noise, so the skip carries it through
    assert c_skip[-1] == pytest.approx(1.0, abs=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_codec_round_trip_is_a_projection(seed):
    frames = np.random.default_rng(seed).random((2, 32, 32)) * 0.6 + 0.2
    once = dn.latent_to_frames(dn.frames_to_latent(frames))
    twice = dn.latent_to_frames(dn.frames_to_latent(once))
    np.testing.assert_allclose(once, twice, atol=1e-12)


def test_codec_exact_on_smooth_content():
    y, x = np.mgrid[0:32, 0:32] / 31.0
    frames = 0.5 + 0.2 * np.cos(np.pi * x) * 0.5
    lat = dn.frames_to_latent(frames)
    assert lat.shape == (16, 16)
    np.testing.assert_allclose(dn.latent_to_frames(lat), frames, atol=0.02)
