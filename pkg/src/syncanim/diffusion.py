"""Noise schedule, epsilon-prediction training, guidance and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .audiofront import AudioTokenSequence
from .denoiser import ConditionBundle, Denoiser
from .schedule import T_TRAIN, NoiseSchedule, StepRangeError
from .tensorcore import Tensor


class DiffusionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceScales:
    image: float = 2.0
    text: float = 2.0
    audio: float = 4.0

    def __post_init__(self):
        if min(self.image, self.text, self.audio) < 0:
            raise DiffusionConfigError("guidance scales must be nonnegative")


@dataclass(frozen=True)
class DropoutPolicy:
    image: float = 0.05
    text: float = 0.05
    audio: float = 0.05

    def __post_init__(self):
        for p in (self.image, self.text, self.audio):
            if not 0.0 <= p <= 1.0:
                raise DiffusionConfigError("drop probabilities must lie in [0, 1]")


def add_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T_train):
        raise StepRangeError(f"t must lie in [1, {schedule.T_train}]")
    ab = schedule.ab(t).reshape(t.shape + (1,) * (np.ndim(x0) - t.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sample_null_flags(policy: DropoutPolicy, B: int, rng: np.random.Generator):
    """Independent per-modality drop decisions for a batch of ``B``."""
    u = rng.random((3, B))
    return u[0] < policy.image, u[1] < policy.text, u[2] < policy.audio


@dataclass
class Batch:
    """Prepared training/sampling inputs for B clips."""

    x0: np.ndarray  # [B, K, S, c]
    image_latent: np.ndarray  # [B, S, c]
    class_ids: np.ndarray  # [B]
    features: list[np.ndarray] = field(default_factory=list)  # per source [B, T_i, d_enc]

    def __len__(self) -> int:
        return len(self.x0)


def make_condition(model: Denoiser, batch: Batch, null_image, null_text, null_audio) -> ConditionBundle:
    B = len(batch)
    audio = model.project_audio(batch.features) if batch.features else None
    return ConditionBundle(
        image_latent=batch.image_latent,
        class_ids=batch.class_ids,
        audio=audio,
        audio_mask=model.audio_mask() if audio is not None else None,
        null_image=np.broadcast_to(np.asarray(null_image, dtype=bool), (B,)).copy(),
        null_text=np.broadcast_to(np.asarray(null_text, dtype=bool), (B,)).copy(),
        null_audio=np.broadcast_to(np.asarray(null_audio, dtype=bool), (B,)).copy(),
    )


def training_step(model: Denoiser, batch: Batch, policy: DropoutPolicy, rng: np.random.Generator,
                  schedule: NoiseSchedule = NoiseSchedule()) -> tuple[Tensor, tc.Graph]:
    """Record one epsilon-MSE loss on a fresh graph; caller runs backward.

    Image dropout nulls both the cross-attention tokens and the
    concatenated image latent.
    """
    B = len(batch)
    if B == 0:
        raise DiffusionConfigError("empty batch")
    t = rng.integers(1, schedule.T_train + 1, size=B)
    eps = rng.standard_normal(batch.x0.shape)
    x_t = add_noise(batch.x0, t, eps, schedule)
    ni, nt, na = sample_null_flags(policy, B, rng)
    graph = tc.Graph()
    with graph:
        cond = make_condition(model, batch, ni, nt, na)
        pred = model.forward(Tensor(x_t), t, cond)
        loss = tc.mse(pred, eps)
    return loss, graph


# -- guidance ------------------------------------------------------------

BRANCHES = ("uncond", "image", "image_text", "full")


def _branch_flags(B: int):
    """Null flags for the four branches stacked as 4*B rows."""
    ni = np.repeat([True, False, False, False], B)
    nt = np.repeat([True, True, False, False], B)
    na = np.repeat([True, True, True, False], B)
    return ni, nt, na


def branch_eps(model: Denoiser, x_t: np.ndarray, t, batch: Batch) -> dict[str, np.ndarray]:
    """Noise predictions for the four nested condition subsets."""
    B = len(batch)
    rep = Batch(
        x0=np.concatenate([x_t] * 4),
        image_latent=np.concatenate([batch.image_latent] * 4),
        class_ids=np.concatenate([batch.class_ids] * 4),
        features=[np.concatenate([f] * 4) for f in batch.features],
    )
    tt = np.concatenate([np.broadcast_to(np.asarray(t), (B,))] * 4)
    with tc.no_grad():
        cond = make_condition(model, rep, *_branch_flags(B))
        out = model.forward(Tensor(rep.x0), tt, cond).data
    return {name: out[i * B:(i + 1) * B] for i, name in enumerate(BRANCHES)}


def combine_guidance(e: dict[str, np.ndarray], scales: GuidanceScales) -> np.ndarray:
    """Nested guidance written as one weight per branch.

    Expanding ``u + s_i (i - u) + s_t (it - i) + s_a (f - it)`` gives the
    weights below. In this form unit scales return the full branch and
    zero scales the unconditional one bit for bit, since every other
    weight is exactly zero.
    """
    s_i, s_t, s_a = scales.image, scales.text, scales.audio
    return ((1.0 - s_i) * e["uncond"] + (s_i - s_t) * e["image"]
            + (s_t - s_a) * e["image_text"] + s_a * e["full"])


def guided_eps(model: Denoiser, x_t: np.ndarray, t, batch: Batch, scales: GuidanceScales) -> np.ndarray:
    return combine_guidance(branch_eps(model, x_t, t, batch), scales)


# -- DDIM ----------------------------------------------------------------


def ddim_timesteps(n_steps: int, T_train: int = T_TRAIN) -> np.ndarray:
    """Descending 1-based steps on a uniform stride, starting at ``T_train``."""
    if n_steps < 1:
        raise DiffusionConfigError("n_steps must be at least 1")
    if n_steps > T_train:
        raise DiffusionConfigError("n_steps cannot exceed T_train")
    return np.round(np.arange(n_steps, 0, -1) * T_train / n_steps).astype(int)


def ddim_loop(eps_fn: Callable[[np.ndarray, int], np.ndarray], x_T: np.ndarray, n_steps: int,
              schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from ``x_T`` given a noise predictor."""
    steps = ddim_timesteps(n_steps, schedule.T_train)
    x = x_T
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab, ab_prev = schedule.ab(t), schedule.ab(t_prev)
        eps = eps_fn(x, int(t))
        x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
    return x


def initial_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xDD1])).standard_normal(shape)


def ddim_sample(model: Denoiser, batch: Batch, scales: GuidanceScales = GuidanceScales(),
                n_steps: int = 20, seed: int = 0, schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    shape = (len(batch), model.cfg.K, model.cfg.S, batch.image_latent.shape[-1])
    x_T = initial_noise(shape, seed)
    return ddim_loop(lambda x, t: guided_eps(model, x, t, batch, scales), x_T, n_steps, schedule)
