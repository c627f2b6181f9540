"""Synchronization, distribution and semantic metrics.

The oracle scorer turns a clip into two impulse trains on the frame grid
(rises in mean brightness, peaks of audio energy rise), correlates them
over integer lags and reports the softmax mass at lag zero. RelSync and
AlignSync compare a generation to ground truth under that scorer and
are rescaled to 0-100.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audiofront import SAMPLE_RATE, Waveform
from .clips import ClipRecord

# onset detection on 5 ms energy frames with a 2.5 ms hop
_E_WIN, _E_HOP = 80, 40
ONSET_LOOKBACK = 8
ONSET_THRESHOLD = 3.0
SMOOTH_SIGMA = 1.0
SYNC_TEMPERATURE = 0.25


class MetricInputError(ValueError):
    pass


@dataclass
class SyncResult:
    prob: float
    degenerate: bool
    correlation: np.ndarray
    lags: np.ndarray


# -- impulse trains ------------------------------------------------------


def visual_train(frames: np.ndarray) -> np.ndarray:
    """Positive frame-to-frame change of mean brightness, one value per frame."""
    f = np.asarray(frames, dtype=np.float64)
    if f.max(initial=0.0) > 1.0:
        f = f / 255.0
    b = f.reshape(len(f), -1).mean(axis=1)
    return np.maximum(np.diff(b, prepend=b[0]), 0.0)


def audio_train(samples: np.ndarray, n_frames: int, fps: float) -> np.ndarray:
    """Audio onset strength binned to the frame grid.

    Short-time log energy is compared with its minimum over the preceding
    20 ms; rises above the threshold that are local peaks count as onsets.
    Frame ``k`` (sampled at ``(k + 0.5) / fps``) collects onsets in
    ``((k - 0.5) / fps, (k + 0.5) / fps]``, the interval in which an event
    first shows up in that frame.
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < _E_WIN + _E_HOP:
        raise MetricInputError("audio too short for onset analysis")
    frames = sliding_window_view(x, _E_WIN)[::_E_HOP]
    e = np.log((frames ** 2).mean(axis=1) + 1e-10)
    n = len(e)
    padded = np.concatenate([np.full(ONSET_LOOKBACK, e[0]), e])
    base = sliding_window_view(padded, ONSET_LOOKBACK)[:n].min(axis=1)
    rise = np.maximum(e - base - ONSET_THRESHOLD, 0.0)
    left = np.concatenate([[0.0], rise[:-1]])
    right = np.concatenate([rise[1:], [0.0]])
    peaks = np.where((rise > left) & (rise >= right), rise, 0.0)
    # the largest rise lands on the first window that starts at the transient
    times = np.arange(n) * _E_HOP / SAMPLE_RATE
    k = np.clip(np.ceil(times * fps - 0.5).astype(int), 0, n_frames - 1)
    out = np.zeros(n_frames)
    np.maximum.at(out, k, peaks)
    return out


def _smooth(x: np.ndarray, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    r = int(np.ceil(3 * sigma))
    ker = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return np.convolve(x, ker / ker.sum(), mode="same")


def lag_correlation(v: np.ndarray, a: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation sum_k v[k + l] a[k] / (|v| |a|) for l in [-L, L]."""
    K = len(v)
    den = np.linalg.norm(v) * np.linalg.norm(a)
    out = np.empty(2 * max_lag + 1)
    for i, l in enumerate(range(-max_lag, max_lag + 1)):
        if l >= 0:
            out[i] = v[l:] @ a[:K - l]
        else:
            out[i] = v[:K + l] @ a[-l:]
    return out / den


# -- the oracle scorer -----------------------------------------------------


def oracle_sync(frames: np.ndarray, audio: Waveform | np.ndarray, fps: float = 6.0,
                temperature: float = SYNC_TEMPERATURE) -> SyncResult:
    samples = audio.samples if isinstance(audio, Waveform) else np.asarray(audio)
    K = len(frames)
    if abs(len(samples) / SAMPLE_RATE - K / fps) > 1.0 / fps:
        raise MetricInputError(f"video spans {K / fps:.3f} s but audio {len(samples) / SAMPLE_RATE:.3f} s")
    L = K // 2
    lags = np.arange(-L, L + 1)
    v = _smooth(visual_train(frames))
    a = _smooth(audio_train(samples, K, fps))
    if np.linalg.norm(v) < 1e-12 or np.linalg.norm(a) < 1e-12:
        return SyncResult(1.0 / len(lags), True, np.zeros(len(lags)), lags)
    c = lag_correlation(v, a, L)
    z = np.exp((c - c.max()) / temperature)
    return SyncResult(float(z[L] / z.sum()), False, c, lags)


def oracle_sync_prob(frames: np.ndarray, audio, fps: float = 6.0) -> float:
    return oracle_sync(frames, audio, fps).prob


SyncScorer = Callable[[np.ndarray, Waveform, float], float]


# -- RelSync / AlignSync ---------------------------------------------------


def relsync_from_probs(p_gen: float, p_gt: float) -> tuple[float, bool]:
    """Reported (0-100) RelSync and a degenerate flag."""
    if p_gen + p_gt <= 0:
        return 100.0, True
    raw = min(max(100.0 * p_gen / (p_gen + p_gt), 0.0), 50.0)
    return 2.0 * raw, False


def alignsync_from_probs(p_gen: float, p_gt: float, semantic: float) -> tuple[float, bool]:
    if not 0.0 <= semantic <= 1.0:
        raise MetricInputError("semantic alignment must lie in [0, 1]")
    rel, flag = relsync_from_probs(p_gen, p_gt)
    raw = (semantic / 2.0) * (rel / 2.0)
    return 4.0 * raw, flag


def relsync(gen_video, gt_video, audio, scorer: SyncScorer = oracle_sync_prob, fps: float = 6.0) -> float:
    return relsync_from_probs(scorer(gen_video, audio, fps), scorer(gt_video, audio, fps))[0]


def alignsync(gen_video, gt_video, audio, semantic: float, scorer: SyncScorer = oracle_sync_prob,
              fps: float = 6.0) -> float:
    return alignsync_from_probs(scorer(gen_video, audio, fps), scorer(gt_video, audio, fps), semantic)[0]


# -- Frechet distance ------------------------------------------------------


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[0] == 1 and a.shape[1] > 1 and np.ndim(feats_a) == 1:
        a = a.T
    if b.shape[0] == 1 and b.shape[1] > 1 and np.ndim(feats_b) == 1:
        b = b.T
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise MetricInputError("features contain non-finite values")
    if a.shape[1] != b.shape[1]:
        raise MetricInputError("feature widths differ")
    d = a.shape[1]
    if min(len(a), len(b)) <= d:
        warnings.warn(f"Frechet distance with n <= d ({min(len(a), len(b))} <= {d}); covariance is rank deficient")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    ra = _sqrtm_psd(ca)
    cross = _sqrtm_psd(ra @ cb @ ra)
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    return max(val, 0.0)


# -- fixed video feature network -------------------------------------------


class VideoFeatureNet:
    """Seeded random space-time conv stack mapping frame stacks to vectors.

    Two 3x3x3 conv + tanh layers with spatial average pooling, then
    per-channel mean and standard deviation over space-time.
    """

    def __init__(self, seed: int = 31337, channels: tuple[int, int] = (8, 8)):
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.w1 = rng.normal(0, 1 / np.sqrt(27), (27, c1))
        self.w2 = rng.normal(0, 1 / np.sqrt(27 * c1), (27 * c1, c2))
        self.dim = 2 * c2

    @staticmethod
    def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        # x [T, H, W, C] -> valid 3x3x3 conv -> [T-2, H-2, W-2, C_out]
        win = sliding_window_view(x, (3, 3, 3), axis=(0, 1, 2))
        T, H, W, C = win.shape[:4]
        return np.tanh(win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(T, H, W, -1) @ w)

    @staticmethod
    def _pool(x: np.ndarray) -> np.ndarray:
        T, H, W, C = x.shape
        H2, W2 = H // 2, W // 2
        return x[:, :2 * H2, :2 * W2].reshape(T, H2, 2, W2, 2, C).mean(axis=(2, 4))

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        f = np.asarray(frames, dtype=np.float64)
        if f.max(initial=0.0) > 1.0:
            f = f / 255.0
        x = (f - 0.5)[..., None] * 2.0
        h = self._pool(self._conv(x, self.w1))
        h = self._conv(h, self.w2)
        flat = h.reshape(-1, h.shape[-1])
        return np.concatenate([flat.mean(axis=0), flat.std(axis=0)])

    def embed(self, videos: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([self(v) for v in videos])


# -- semantic proxies --------------------------------------------------------


def _cos01(u: np.ndarray, v: np.ndarray) -> float:
    den = np.linalg.norm(u) * np.linalg.norm(v)
    return float((1.0 + (u @ v) / den) / 2.0) if den > 0 else 0.5


def audio_class(samples: np.ndarray, carriers: dict[str, float]) -> str:
    """Class whose carrier frequency holds the most spectral energy."""
    spec = np.abs(np.fft.rfft(samples)) ** 2
    freqs = np.fft.rfftfreq(len(samples), 1.0 / SAMPLE_RATE)
    energy = {c: spec[np.abs(freqs - f) < 40.0].sum() for c, f in carriers.items()}
    return max(sorted(energy), key=energy.get)


@dataclass
class SemanticProxy:
    """Class prototypes in the feature net's space, built from reference clips.

    ``it`` compares a video to the prototype of its text label; ``ia``
    compares it to the prototype of the class recognized from its audio.
    Both map cosine similarity affinely to [0, 1]. Embeddings are centered
    on the reference mean so the prototypes are discriminative.
    """

    net: VideoFeatureNet
    prototypes: dict[str, np.ndarray]
    center: np.ndarray
    carriers: dict[str, float]

    @classmethod
    def build(cls, reference: Sequence[ClipRecord], net: VideoFeatureNet | None = None) -> "SemanticProxy":
        from .synthbench import CARRIER_HZ

        net = net or VideoFeatureNet()
        emb = net.embed([c.float_frames() for c in reference])
        center = emb.mean(axis=0)
        labels = np.array([c.labels["class"] for c in reference])
        protos = {c: (emb[labels == c] - center).mean(axis=0) for c in sorted(set(labels))}
        return cls(net, protos, center, dict(CARRIER_HZ))

    def _emb(self, frames) -> np.ndarray:
        return self.net(frames) - self.center

    def it(self, frames, label: str) -> float:
        return _cos01(self._emb(frames), self.prototypes[label])

    def ia(self, frames, audio) -> float:
        samples = audio.samples if isinstance(audio, Waveform) else np.asarray(audio)
        cls_ = audio_class(samples, {k: v for k, v in self.carriers.items() if k in self.prototypes})
        return _cos01(self._emb(frames), self.prototypes[cls_])


# -- reports -----------------------------------------------------------------

REPORT_COLUMNS = ("n_clips", "sync", "sync_gt", "relsync", "alignsync", "ia", "it", "fvd_like")


@dataclass
class MetricReport:
    fvd_like: float
    ia: float
    it: float
    relsync: float
    alignsync: float
    sync: float
    sync_gt: float
    n_clips: int
    protocol: dict = field(default_factory=dict)
    per_clip: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("relsync", "alignsync"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise MetricInputError(f"{name}={v} outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def csv_row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in self.csv_row()])
        return buf.getvalue()


def score_generations(generated: Sequence[np.ndarray], reference: Sequence[ClipRecord],
                      proxy: SemanticProxy, scorer: SyncScorer = oracle_sync_prob,
                      protocol: dict | None = None, net: VideoFeatureNet | None = None) -> MetricReport:
    """Aggregate every metric for generated windows against their ground truth."""
    if len(generated) != len(reference) or not reference:
        raise MetricInputError("need one generation per reference window")
    net = net or proxy.net
    rows = []
    for gen, ref in sorted(zip(generated, reference), key=lambda p: p[1].id):
        gt = ref.float_frames()
        p_gen = scorer(gen, ref.audio, ref.fps)
        p_gt = scorer(gt, ref.audio, ref.fps)
        ia = proxy.ia(gen, ref.audio)
        rows.append({
            "id": ref.id,
            "sync": p_gen,
            "sync_gt": p_gt,
            "relsync": relsync_from_probs(p_gen, p_gt)[0],
            "alignsync": alignsync_from_probs(p_gen, p_gt, ia)[0],
            "ia": ia,
            "it": proxy.it(gen, ref.labels["class"]),
        })
    gen_feats = net.embed([g for g, _ in sorted(zip(generated, reference), key=lambda p: p[1].id)])
    ref_feats = net.embed([r.float_frames() for r in sorted(reference, key=lambda r: r.id)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fd = frechet_distance(gen_feats, ref_feats)

    def avg(k):
        return float(np.mean([r[k] for r in rows]))

    return MetricReport(fvd_like=fd, ia=avg("ia"), it=avg("it"), relsync=avg("relsync"),
                        alignsync=avg("alignsync"), sync=avg("sync"), sync_gt=avg("sync_gt"),
                        n_clips=len(rows), protocol=dict(protocol or {}), per_clip=rows)
