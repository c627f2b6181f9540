"""Shared builders for model-level tests."""

import numpy as np

from syncanim import denoiser as dn
from syncanim.diffusion import Batch


def random_batch(model: dn.Denoiser, B: int, seed: int = 0) -> Batch:
    r = np.random.default_rng(seed)
    K, S = model.cfg.K, model.cfg.S
    x0 = r.normal(0, 0.5, (B, K, S, dn.LATENT_CH))
    feats = [r.normal(size=(B, len(t), dn.D_ENC)) for _, _, t in model.token_layout]
    return Batch(x0=x0, image_latent=x0[:, 0].copy(), class_ids=r.integers(0, 4, B), features=feats)


def randomize_audio(model: dn.Denoiser, seed: int = 0, scale: float = 0.3) -> None:
    """Give the zero-initialized output projections nonzero weights."""
    r = np.random.default_rng(seed)
    for p in model.trainable_parameters():
        if p.name.endswith("w_o"):
            p.data = r.normal(0, scale, p.shape)
