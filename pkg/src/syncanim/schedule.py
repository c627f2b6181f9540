"""Linear-beta DDPM noise schedule shared by the denoiser and the sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_TRAIN = 1000


class StepRangeError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T_train: int = T_TRAIN
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T_train)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def ab(self, t) -> np.ndarray:
        """alpha_bar at 1-based step(s) ``t``; ``t = 0`` maps to 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T_train):
            raise StepRangeError(f"step outside [0, {self.T_train}]")
        full = np.concatenate([[1.0], self.alpha_bar])
        return full[t]

    def precondition(self, t, sigma_data: float) -> tuple[np.ndarray, np.ndarray]:
        """Skip and output weights for ``eps = c_skip * x_t + c_out * F``.

        ``c_skip * x_t`` is the best linear guess of the noise when the
        clean signal has scale ``sigma_data``; ``c_out`` is the standard
        deviation of what remains, so ``F`` has unit-scale targets at
        every step and both weights stay bounded.
        """
        ab = self.ab(t)
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
        v = ab * sigma_data ** 2 + (1.0 - ab)
        return s / v, a * sigma_data / np.sqrt(v)
