"""Audio waveform to timestamped conditioning tokens.

Pipeline: 16 kHz waveform -> 128-bin log-mel spectrogram (25 ms Hann
windows, 10 ms hop, no edge padding) -> two frozen 12-layer encoders ->
features tapped at several depths -> one trainable linear projection per
tap -> concatenated token sequence, ordered by encoder, then layer, then
time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Parameter, Tensor

SAMPLE_RATE = 16000
WIN = 400
HOP = 160
N_FFT = 512
N_MELS = 128
LOG_EPS = 1e-6
LOG_FLOOR = float(np.log(LOG_EPS))

ENCODER_DEPTH = 12
ENCODER_IDS = ("semantic", "masked-pred")
# layers (0-based) that halve the time axis before their conv
_STRIDES = {
    "semantic": (0, 1, 2, 6),
    "masked-pred": (1, 3, 5, 9),
}
_ENCODER_SEEDS = {"semantic": 7001, "masked-pred": 7002}


class AudioLengthError(ValueError):
    pass


class AudioConfigError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioConfigError(f"sample rate must be {SAMPLE_RATE} Hz")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def normalized(self) -> "Waveform":
        peak = np.abs(self.samples).max(initial=0.0)
        return self if peak <= 1.0 else Waveform(self.samples / peak)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T_mel, 128]
    frame_times: np.ndarray
    window_ms: float = 25.0
    hop_ms: float = 10.0
    duration: float = 0.0


@dataclass(frozen=True)
class FeatureTapConfig:
    encoder_id: str
    tap_layers: tuple[int, ...] = (3, 7, 11)

    def __post_init__(self):
        if self.encoder_id not in ENCODER_IDS:
            raise AudioConfigError(f"unknown encoder {self.encoder_id!r}")
        if not self.tap_layers:
            raise AudioConfigError("at least one tap layer required")
        for layer in self.tap_layers:
            if not 0 <= layer < ENCODER_DEPTH:
                raise AudioConfigError(f"tap layer {layer} outside encoder depth {ENCODER_DEPTH}")
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))


@dataclass
class FeatureMap:
    encoder_id: str
    layer: int
    features: np.ndarray  # [T_i, d_enc]
    times: np.ndarray  # [T_i]


@dataclass
class AudioTokenSequence:
    """Projected tokens; ``tokens`` may carry a leading batch axis."""

    tokens: Tensor
    token_times: np.ndarray
    source_tags: list[tuple[str, int]]
    source_sizes: list[int] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return len(self.token_times)

    def source_times(self) -> list[np.ndarray]:
        out, start = [], 0
        for n in self.source_sizes:
            out.append(self.token_times[start:start + n])
            start += n
        return out


# -- mel spectrogram -----------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape [n_mels, n_fft//2 + 1]."""
    bins = np.linspace(0, sr / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bins.size))
    for i in range(n_mels):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bins - lo) / (c - lo)
        down = (hi - bins) / (hi - c)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB = mel_filterbank()
_HANN = np.hanning(WIN + 2)[1:-1]


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    x = np.asarray(w.samples, dtype=np.float64)
    n = len(x)
    if n < WIN:
        raise AudioLengthError(f"waveform has {n} samples, need at least {WIN}")
    t_mel = 1 + (n - WIN) // HOP
    idx = np.arange(WIN)[None, :] + HOP * np.arange(t_mel)[:, None]
    frames = x[idx] * _HANN
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = np.log(spec @ _FB.T + LOG_EPS)
    times = (np.arange(t_mel) * HOP + WIN / 2) / SAMPLE_RATE
    return MelSpectrogram(frames=mel, frame_times=times, duration=w.duration)


# -- frozen encoders -----------------------------------------------------


class ToyEncoder:
    """Seeded, frozen residual stack of strided convs and local attention.

    Stands in for a pretrained audio encoder. Residual connections keep
    onset information local in time through all twelve layers.
    """

    def __init__(self, encoder_id: str, d_enc: int = 32, attn_span: int = 4, seed: int | None = None):
        if encoder_id not in ENCODER_IDS:
            raise AudioConfigError(f"unknown encoder {encoder_id!r}")
        self.encoder_id = encoder_id
        self.d = d_enc
        self.attn_span = attn_span
        self.strides = _STRIDES[encoder_id]
        rng = np.random.default_rng(_ENCODER_SEEDS[encoder_id] if seed is None else seed)
        pre = f"encoder.{encoder_id}"
        d = d_enc

        def p(name, arr):
            return Parameter(arr, f"{pre}.{name}", trainable=False)

        self.w_in = p("w_in", rng.normal(0, 1 / np.sqrt(N_MELS), (N_MELS, d)))
        self.b_in = p("b_in", np.zeros(d))
        self.layers = []
        for i in range(ENCODER_DEPTH):
            self.layers.append({
                "ln1_g": p(f"L{i}.ln1_g", np.ones(d)),
                "ln1_b": p(f"L{i}.ln1_b", np.zeros(d)),
                "conv": p(f"L{i}.conv", rng.normal(0, 0.5 / np.sqrt(3 * d), (3 * d, d))),
                "ln2_g": p(f"L{i}.ln2_g", np.ones(d)),
                "ln2_b": p(f"L{i}.ln2_b", np.zeros(d)),
                "wq": p(f"L{i}.wq", rng.normal(0, 1 / np.sqrt(d), (d, d))),
                "wk": p(f"L{i}.wk", rng.normal(0, 1 / np.sqrt(d), (d, d))),
                "wv": p(f"L{i}.wv", rng.normal(0, 1 / np.sqrt(d), (d, d))),
                "wo": p(f"L{i}.wo", rng.normal(0, 0.5 / np.sqrt(d), (d, d))),
            })
        self._norm_g = np.ones(d)
        self._norm_b = np.zeros(d)

    def parameters(self) -> list[Parameter]:
        out = [self.w_in, self.b_in]
        for layer in self.layers:
            out.extend(layer.values())
        return out

    @staticmethod
    def _pool(h: Tensor, times: np.ndarray):
        n = (h.shape[0] // 2) * 2
        pooled = h.data[:n].reshape(n // 2, 2, h.shape[1]).mean(axis=1)
        return Tensor(pooled), times[:n].reshape(-1, 2).mean(axis=1)

    def _local_mask(self, n: int) -> np.ndarray:
        i = np.arange(n)
        return np.abs(i[:, None] - i[None, :]) <= self.attn_span

    def forward(self, mel: MelSpectrogram, taps: Sequence[int]) -> list[FeatureMap]:
        h = tc.linear(Tensor((mel.frames - LOG_FLOOR) / -LOG_FLOOR), self.w_in, self.b_in)
        times = mel.frame_times
        want = set(taps)
        out = []
        g1 = Tensor(self._norm_g)
        b1 = Tensor(self._norm_b)
        for i, L in enumerate(self.layers):
            if i in self.strides and h.shape[0] >= 2:
                h, times = self._pool(h, times)
            x = tc.layer_norm(h, L["ln1_g"], L["ln1_b"])
            padded = np.concatenate([x.data[:1], x.data, x.data[-1:]], axis=0)
            window = np.concatenate([padded[:-2], padded[1:-1], padded[2:]], axis=1)
            h = h + tc.tanh(tc.matmul(Tensor(window), L["conv"]))
            x = tc.layer_norm(h, L["ln2_g"], L["ln2_b"])
            q, k, v = x @ L["wq"], x @ L["wk"], x @ L["wv"]
            att = tc.masked_softmax((q @ tc.transpose(k, (1, 0))) * (1 / np.sqrt(self.d)),
                                    self._local_mask(h.shape[0]))
            h = h + (att @ v) @ L["wo"]
            if i in want:
                feat = tc.layer_norm(h, g1, b1)
                out.append(FeatureMap(self.encoder_id, i, feat.data.copy(), times.copy()))
        return out


_ENCODER_CACHE: dict[tuple, ToyEncoder] = {}


def get_encoder(encoder_id: str, d_enc: int = 32) -> ToyEncoder:
    key = (encoder_id, d_enc)
    if key not in _ENCODER_CACHE:
        _ENCODER_CACHE[key] = ToyEncoder(encoder_id, d_enc)
    return _ENCODER_CACHE[key]


def encode_audio(mel: MelSpectrogram, cfg: FeatureTapConfig, encoder: ToyEncoder | None = None) -> list[FeatureMap]:
    """Run one frozen encoder and return a feature map per tap layer."""
    enc = encoder or get_encoder(cfg.encoder_id)
    if enc.encoder_id != cfg.encoder_id:
        raise AudioConfigError("encoder does not match tap config")
    for layer in cfg.tap_layers:
        if not 0 <= layer < ENCODER_DEPTH:
            raise AudioConfigError(f"tap layer {layer} outside encoder depth {ENCODER_DEPTH}")
    with tc.no_grad():
        maps = enc.forward(mel, cfg.tap_layers)
    order = {layer: i for i, layer in enumerate(cfg.tap_layers)}
    return sorted(maps, key=lambda m: order[m.layer])


def encode_all(mel: MelSpectrogram, taps: Sequence[FeatureTapConfig]) -> list[FeatureMap]:
    out = []
    for cfg in taps:
        out.extend(encode_audio(mel, cfg))
    return out


def tap_layout(taps: Sequence[FeatureTapConfig], n_samples: int = 2 * SAMPLE_RATE) -> list[tuple[str, int, np.ndarray]]:
    """Token times per (encoder, layer) for a waveform of ``n_samples``."""
    mel = mel_spectrogram(Waveform(np.zeros(n_samples)))
    return [(m.encoder_id, m.layer, m.times) for m in encode_all(mel, taps)]


# -- trainable projections -----------------------------------------------


class FeatureProjections:
    """One trainable linear map per (encoder, layer) source."""

    def __init__(self, sources: Sequence[tuple[str, int]], d_enc: int, d_model: int,
                 rng: np.random.Generator, zero_init: bool = False):
        self.d_model = d_model
        self.d_enc = d_enc
        self.layers: dict[tuple[str, int], tuple[Parameter, Parameter]] = {}
        for enc, layer in sources:
            w = np.zeros((d_enc, d_model)) if zero_init else rng.normal(0, 1 / np.sqrt(d_enc), (d_enc, d_model))
            self.layers[(enc, layer)] = (
                Parameter(w, f"audio_proj.{enc}.L{layer}.w"),
                Parameter(np.zeros(d_model), f"audio_proj.{enc}.L{layer}.b"),
            )

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers.values() for p in pair]


def project_and_merge(maps: Sequence[FeatureMap] | Sequence[tuple[str, int, np.ndarray, np.ndarray]],
                      projections: FeatureProjections) -> AudioTokenSequence:
    """Project each feature map and concatenate along the token axis.

    ``maps`` is either a list of :class:`FeatureMap` for one clip or a
    list of ``(encoder, layer, features[B, T_i, d_enc], times[T_i])``
    tuples for a batch.
    """
    parts, times, tags, sizes = [], [], [], []
    keys = set()
    for m in maps:
        if isinstance(m, FeatureMap):
            enc, layer, feats, t = m.encoder_id, m.layer, m.features, m.times
        else:
            enc, layer, feats, t = m
        key = (enc, layer)
        if key not in projections.layers:
            raise AudioConfigError(f"no projection for source {key}")
        if key in keys:
            raise AudioConfigError(f"duplicate source {key}")
        keys.add(key)
        w, b = projections.layers[key]
        if feats.shape[-1] != w.shape[0]:
            raise AudioConfigError(f"feature width {feats.shape[-1]} != projection input {w.shape[0]}")
        parts.append(tc.linear(Tensor(feats), w, b))
        times.append(np.asarray(t))
        tags.extend([key] * len(t))
        sizes.append(len(t))
    if set(projections.layers) != keys:
        raise AudioConfigError("projection set does not match feature sources")
    axis = parts[0].ndim - 2
    tokens = tc.concat(parts, axis=axis)
    return AudioTokenSequence(tokens=tokens, token_times=np.concatenate(times), source_tags=tags, source_sizes=sizes)


# -- waveform I/O --------------------------------------------------------


def write_pcm(path, w: Waveform, clip_id: str) -> None:
    """Headerless little-endian int16 PCM plus a JSON sidecar."""
    path = Path(path)
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    path.write_bytes(pcm.tobytes())
    sidecar = {"clip_id": clip_id, "sample_count": int(pcm.size), "sample_rate": SAMPLE_RATE}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def read_pcm(path) -> tuple[Waveform, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    pcm = np.frombuffer(path.read_bytes(), dtype="<i2")
    if pcm.size != meta["sample_count"]:
        raise AudioLengthError(f"{path}: sidecar says {meta['sample_count']} samples, found {pcm.size}")
    return Waveform(pcm.astype(np.float64) / 32767.0), meta
