"""Feature caching, batch assembly, stage training, base-prior fitting and sampling."""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .audiofront import FeatureTapConfig, encode_all, mel_spectrogram
from .clips import ClipRecord
from .denoiser import Denoiser, ModelConfig, build_model, frames_to_latent, latent_to_frames
from .diffusion import Batch, DropoutPolicy, GuidanceScales, ddim_sample, training_step
from .synthbench import CLASSES

PRIOR_DIR = Path(__file__).with_name("data")


class TrainingError(RuntimeError):
    pass


# -- features and batches --------------------------------------------------


class FeatureCache:
    """Frozen-encoder features per clip, memoized in memory (and optionally on disk).

    Encoder weights are fixed, so a clip's features depend only on its
    waveform and the tap configuration.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self._mem: dict[tuple[str, str], list[np.ndarray]] = {}
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _key(clip: ClipRecord, taps: Sequence[FeatureTapConfig]) -> tuple[str, str]:
        h = hashlib.sha1(np.ascontiguousarray(clip.audio.samples).tobytes())
        h.update(repr([(t.encoder_id, tuple(t.tap_layers)) for t in taps]).encode())
        return clip.id, h.hexdigest()[:16]

    def get(self, clip: ClipRecord, taps: Sequence[FeatureTapConfig]) -> list[np.ndarray]:
        key = self._key(clip, taps)
        if key in self._mem:
            return self._mem[key]
        path = self.directory / f"{key[1]}.npz" if self.directory else None
        if path is not None and path.exists():
            with np.load(path) as z:
                feats = [z[f"f{i}"] for i in range(len(z.files))]
        else:
            feats = [m.features for m in encode_all(mel_spectrogram(clip.audio), taps)]
            if path is not None:
                np.savez(path, **{f"f{i}": f for i, f in enumerate(feats)})
        self._mem[key] = feats
        return feats


def make_batch(clips: Sequence[ClipRecord], model: Denoiser, cache: FeatureCache | None = None) -> Batch:
    """Latents, first-frame image latent, class ids and encoder features for ``clips``."""
    if not clips:
        raise TrainingError("no clips to batch")
    cache = cache or FeatureCache()
    x0 = np.stack([frames_to_latent(c.float_frames()) for c in clips])
    if x0.shape[1] != model.cfg.K:
        raise TrainingError(f"clips have {x0.shape[1]} frames, model expects K={model.cfg.K}")
    feats = [cache.get(c, model.cfg.taps) for c in clips]
    per_source = [np.stack([f[i] for f in feats]) for i in range(len(feats[0]))]
    classes = np.array([CLASSES.index(c.labels["class"]) for c in clips])
    return Batch(x0=x0, image_latent=x0[:, 0].copy(), class_ids=classes, features=per_source)


def subset(batch: Batch, idx) -> Batch:
    return Batch(batch.x0[idx], batch.image_latent[idx], batch.class_ids[idx], [f[idx] for f in batch.features])


# -- stage training --------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-2
    seed: int = 0
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise TrainingError("epochs >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def train_stage(model: Denoiser, batch: Batch, stage: StageConfig,
                on_epoch: Callable[[int, float], None] | None = None,
                optimizer: tc.Adam | None = None) -> TrainLog:
    """Epoch loop over a prepared batch; only trainable parameters move."""
    if len(batch) == 0:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([stage.seed, 0x7A1]))
    params = model.trainable_parameters()
    opt = optimizer or tc.Adam(params, lr=stage.lr)
    log = TrainLog()
    t0 = time.perf_counter()
    n = len(batch)
    per_epoch = math.ceil(n / stage.batch_size)
    for epoch in range(stage.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(per_epoch):
            idx = order[i * stage.batch_size:(i + 1) * stage.batch_size]
            loss, graph = training_step(model, subset(batch, idx), stage.dropout, rng)
            for p in params:
                p.zero_grad()
            graph.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            log.steps += 1
        log.epoch_loss.append(total / n)
        if on_epoch:
            on_epoch(epoch, log.epoch_loss[-1])
    log.seconds = time.perf_counter() - t0
    return log


def train_steps(model: Denoiser, batch: Batch, steps: int, batch_size: int, lr: float, seed: int) -> list[float]:
    """Fixed number of optimizer steps on random minibatches."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57E]))
    params = model.trainable_parameters()
    opt = tc.Adam(params, lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(batch), size=min(batch_size, len(batch)), replace=False)
        loss, graph = training_step(model, subset(batch, idx), DropoutPolicy(), rng)
        for p in params:
            p.zero_grad()
        graph.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


# -- the frozen base prior -------------------------------------------------


@dataclass(frozen=True)
class PriorConfig:
    """Recipe for the audio-free video prior that stands in for a pretrained backbone."""

    n_clips: int = 512
    steps: int = 800
    batch_size: int = 32
    lr: float = 2e-3
    data_seed: int = 90210
    model_seed: int = 0


def prior_clips(pc: PriorConfig, fps: float = 6.0) -> list[ClipRecord]:
    from .synthbench import _random_spec, generate_clip

    rng = np.random.default_rng(pc.data_seed)
    return [generate_clip(_random_spec(rng), fps, pc.data_seed * 100003 + i, f"prior-{i:05d}")
            for i in range(pc.n_clips)]


def prior_key(cfg: ModelConfig, pc: PriorConfig) -> str:
    spec = {k: v for k, v in asdict(cfg).items() if k not in ("window", "use_chunk_mask", "taps")}
    from . import synthbench as sb

    render = {k: getattr(sb, k) for k in ("VISUAL_DECAY_S", "FLASH_GAIN", "TEXTURE_STD", "PULSE_GROWTH")}
    blob = json.dumps({"model": spec, "prior": asdict(pc), "render": render}, sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def fit_base_prior(cfg: ModelConfig, pc: PriorConfig = PriorConfig(), log: Callable[[str], None] | None = None) -> Denoiser:
    """Train every base weight on clean, audio-free clips; audio layers untouched."""
    model, _ = build_model(cfg, pc.model_seed)
    batch = make_batch(prior_clips(pc, cfg.fps), model)
    model.use_audio = False
    model.set_base_trainable(True)
    try:
        losses = train_steps(model, batch, pc.steps, pc.batch_size, pc.lr, pc.model_seed)
    finally:
        model.use_audio = True
        model.set_base_trainable(False)
    if log:
        log(f"prior fitted: final loss {np.mean(losses[-50:]):.5f}")
    return model


def prior_path(cfg: ModelConfig, pc: PriorConfig = PriorConfig(), cache_dir=None) -> Path:
    name = f"prior-{prior_key(cfg, pc)}.ckpt"
    shipped = PRIOR_DIR / name
    if shipped.exists():
        return shipped
    root = Path(cache_dir or os.environ.get("SYNCANIM_CACHE", Path.home() / ".cache" / "syncanim"))
    return root / name


def load_base_model(cfg: ModelConfig, pc: PriorConfig = PriorConfig(), seed: int = 0, cache_dir=None,
                    log: Callable[[str], None] | None = None) -> Denoiser:
    """A model whose frozen base comes from the fitted prior (fitting it once if needed).

    Audio layers are freshly initialized from ``seed``.
    """
    path = prior_path(cfg, pc, cache_dir)
    if not path.exists():
        fitted = fit_base_prior(cfg, pc, log)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tc.save_checkpoint(tmp, [p for p in fitted.parameters() if not p.trainable])
        os.replace(tmp, path)
    model, _ = build_model(cfg, seed)
    ckpt = tc.load_checkpoint(path)
    tc.apply_checkpoint([p for p in model.parameters() if not p.trainable], ckpt)
    return model


# -- checkpoints -----------------------------------------------------------


def save_model(model: Denoiser, path, optimizer: tc.Adam | None = None) -> str:
    tc.save_checkpoint(path, model.parameters(), optimizer)
    return model.state_hash()


def load_model_state(model: Denoiser, path) -> None:
    tc.apply_checkpoint(model.parameters(), tc.load_checkpoint(path))


# -- sampling --------------------------------------------------------------


def generate(model: Denoiser, clips: Sequence[ClipRecord], scales: GuidanceScales = GuidanceScales(),
             n_steps: int = 20, seed: int = 0, cache: FeatureCache | None = None,
             chunk: int = 16) -> np.ndarray:
    """Guided DDIM samples for ``clips`` decoded to frames [B, K, 32, 32].

    Each clip is conditioned on its first frame, class label and audio;
    the initial noise depends only on ``seed`` and the clip's position.
    """
    batch = make_batch(clips, model, cache)
    out = []
    for start in range(0, len(clips), chunk):
        idx = np.arange(start, min(start + chunk, len(clips)))
        lat = ddim_sample(model, subset(batch, idx), scales, n_steps, seed=seed * 1_000_003 + start)
        out.append(latent_to_frames(lat))
    return np.concatenate(out)
