import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from syncanim import diffusion as df
from syncanim import tensorcore as tc
from syncanim.diffusion import DropoutPolicy, GuidanceScales
from syncanim.schedule import NoiseSchedule, StepRangeError

from helpers import random_batch, randomize_audio


def test_schedule_endpoints():
    s = NoiseSchedule()
    assert s.ab(0) == 1.0
    assert s.ab(1) == pytest.approx(1 - 1e-4)
    assert np.all(np.diff(s.alpha_bar) < 0)
    with pytest.raises(StepRangeError):
        s.ab(1001)


def test_add_noise_formula():
    s = NoiseSchedule()
    x0, eps = np.ones((2, 3)), np.full((2, 3), 2.0)
    out = df.add_noise(x0, np.array([10, 900]), eps, s)
    for i, t in enumerate((10, 900)):
        ab = s.alpha_bar[t - 1]
        np.testing.assert_allclose(out[i], np.sqrt(ab) + 2 * np.sqrt(1 - ab))
    with pytest.raises(StepRangeError):
        df.add_noise(x0, 0, eps)


def test_policy_and_scale_validation():
    with pytest.raises(df.DiffusionConfigError):
        DropoutPolicy(audio=1.5)
    with pytest.raises(df.DiffusionConfigError):
        GuidanceScales(audio=-1)


def test_dropout_rate_in_band():
    ni, nt, na = df.sample_null_flags(DropoutPolicy(), 10_000, np.random.default_rng(0))
    for flags in (ni, nt, na):
        assert 0.04 <= flags.mean() <= 0.06
    # drops are independent across modalities
    assert abs((ni & na).mean() - ni.mean() * na.mean()) < 0.005


def test_ddim_timesteps():
    steps = df.ddim_timesteps(20)
    assert steps[0] == 1000 and steps[-1] == 50 and len(steps) == 20
    assert np.all(np.diff(steps) == -50)
    with pytest.raises(df.DiffusionConfigError):
        df.ddim_timesteps(0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.floats(-3, 3))
def test_zero_eps_oracle(n, x):
    """With a zero noise predictor DDIM just rescales: x_0 = x_T / sqrt(alpha_bar(t_1))."""
    s = NoiseSchedule()
    first = df.ddim_timesteps(n)[0]
    out = df.ddim_loop(lambda v, t: np.zeros_like(v), np.array([x]), n, s)
    assert abs(out[0] - x / np.sqrt(s.ab(first))) <= 1e-10 * max(1.0, abs(x) / np.sqrt(s.ab(first)))


def test_exact_eps_recovers_x0():
    s = NoiseSchedule()
    x0, eps = np.array([0.3, -0.7]), np.array([1.1, 0.4])
    xT = df.add_noise(x0, 1000, eps, s)
    out = df.ddim_loop(lambda v, t: eps, xT, 10, s)
    np.testing.assert_allclose(out, x0, atol=1e-10)


def test_combine_guidance_identities():
    r = np.random.default_rng(0)
    e = {k: r.normal(size=(2, 3)) for k in df.BRANCHES}
    assert np.array_equal(df.combine_guidance(e, GuidanceScales(0, 0, 0)), e["uncond"])
    np.testing.assert_allclose(df.combine_guidance(e, GuidanceScales(1, 1, 1)), e["full"], atol=1e-15)
    ia = df.combine_guidance(e, GuidanceScales(1, 1, 0))
    np.testing.assert_allclose(ia, e["image_text"], atol=1e-15)


def test_branch_eps_matches_individual_passes(tiny_model):
    randomize_audio(tiny_model)
    batch = random_batch(tiny_model, 2)
    x = np.random.default_rng(1).normal(size=batch.x0.shape)
    e = df.branch_eps(tiny_model, x, 400, batch)
    flags = {"uncond": (1, 1, 1), "image": (0, 1, 1), "image_text": (0, 0, 1), "full": (0, 0, 0)}
    for name, (ni, nt, na) in flags.items():
        with tc.no_grad():
            cond = df.make_condition(tiny_model, batch, bool(ni), bool(nt), bool(na))
            ref = tiny_model.forward(tc.Tensor(x), 400, cond).data
        np.testing.assert_allclose(e[name], ref, atol=1e-12)


def test_guidance_on_model_identities(tiny_model):
    randomize_audio(tiny_model)
    batch = random_batch(tiny_model, 1)
    x = np.random.default_rng(2).normal(size=batch.x0.shape)
    e = df.branch_eps(tiny_model, x, 700, batch)
    assert np.array_equal(df.guided_eps(tiny_model, x, 700, batch, GuidanceScales(0, 0, 0)), e["uncond"])
    np.testing.assert_allclose(df.guided_eps(tiny_model, x, 700, batch, GuidanceScales(1, 1, 1)), e["full"],
                               atol=1e-12)


def test_ddim_sample_is_deterministic(tiny_model):
    batch = random_batch(tiny_model, 1)
    a = df.ddim_sample(tiny_model, batch, n_steps=3, seed=9)
    b = df.ddim_sample(tiny_model, batch, n_steps=3, seed=9)
    c = df.ddim_sample(tiny_model, batch, n_steps=3, seed=10)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_training_step_only_touches_trainable(tiny_model):
    batch = random_batch(tiny_model, 3)
    loss, graph = df.training_step(tiny_model, batch, DropoutPolicy(), np.random.default_rng(0))
    assert loss.item() > 0
    graph.backward(loss)
    for p in tiny_model.parameters():
        if not p.trainable:
            assert not p.grad.any(), p.name
    assert any(p.grad.any() for p in tiny_model.trainable_parameters())


def test_training_step_rejects_empty(tiny_model):
    batch = random_batch(tiny_model, 1)
    empty = df.Batch(batch.x0[:0], batch.image_latent[:0], batch.class_ids[:0], [f[:0] for f in batch.features])
    with pytest.raises(df.DiffusionConfigError):
        df.training_step(tiny_model, empty, DropoutPolicy(), np.random.default_rng(0))
