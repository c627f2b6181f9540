"""Audio-synchronized image animation with a frozen video prior, at desk scale.

Modules:

- ``tensorcore``: reverse-mode autodiff over numpy arrays, Adam, checkpoints
- ``audiofront``: waveform to mel spectrogram, frozen toy encoders, feature taps
- ``windowcond``: frame timeline and window attention masks
- ``denoiser``: the frozen latent denoiser with trainable audio cross-attention
- ``diffusion``: noise schedule, condition dropout, multi-condition guidance, DDIM
- ``curation``: metadata, scene, motion and text filters for corpus cleaning
- ``synthbench``: synthetic audio-video clips with known event times
- ``metrics``: oracle sync scorer, RelSync/AlignSync, Frechet distance, IA/IT
- ``training`` and ``experiments``: stage training, run cache, preset grids
- ``cli``: the ``syncanim`` command
"""

__version__ = "0.1.0"
