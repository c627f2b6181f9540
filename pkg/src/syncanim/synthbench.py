"""Synthetic paired audio-video clips with known event times.

Each clip shows one bright object on a textured background. At every
event time the object gets a visual impulse (brightening plus a
class-specific motion) and the audio gets a decaying tone burst whose
carrier frequency identifies the class. Corruptions mimic the ways real
web video breaks audio-visual supervision.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .audiofront import SAMPLE_RATE, Waveform
from .clips import ClipRecord

CLASSES = ("bounce", "flash", "strike", "pulse")
CARRIER_HZ = {"bounce": 300.0, "flash": 1500.0, "strike": 3000.0, "pulse": 700.0}
FRAME_SIZE = 32
NOMINAL_RESOLUTION = (256, 256)
LOW_RESOLUTION = (48, 48)
VISUAL_DECAY_S = 0.2
FLASH_GAIN = 0.12
TEXTURE_STD = 0.18
PULSE_GROWTH = 0.25
CUT_LEVEL_SHIFT = 0.45
AUDIO_DECAY_S = 0.06
CLICK_DECAY_S = 0.004
MIN_EVENT_GAP_S = 0.3

RENDER_KINDS = ("temporal_offset", "distractor_motion", "occluded_source")
PIXEL_KINDS = ("shot_cut", "camera_shake", "low_res", "text_overlay")
AUDIO_KINDS = ("ambient_noise",)
CORRUPTION_KINDS = ("temporal_offset", "ambient_noise", "distractor_motion", "occluded_source",
                    "shot_cut", "camera_shake", "text_overlay", "low_res")

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "temporal_offset": {"delta": 0.25},
    "ambient_noise": {"snr_db": 0.0},
    "distractor_motion": {},
    "occluded_source": {},
    "shot_cut": {"t": 1.0},
    "camera_shake": {"amplitude": 4.0},
    "text_overlay": {"area": 0.2},
    "low_res": {},
}

MANIFEST_SCHEMA_VERSION = 1


class SpecError(ValueError):
    pass


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    class_id: str
    event_times: tuple[float, ...]
    position: tuple[float, float] = (16.0, 16.0)
    size: float = 3.5
    color: float = 0.8
    background: float = 0.25
    texture_seed: int = 0
    duration: float = 2.0

    def __post_init__(self):
        if self.class_id not in CLASSES:
            raise SpecError(f"unknown class {self.class_id!r}")
        if not self.event_times:
            raise SpecError("a scene needs at least one event")
        for t in self.event_times:
            if not 0.0 < t < self.duration:
                raise SpecError(f"event at {t} s outside (0, {self.duration})")
        object.__setattr__(self, "event_times", tuple(float(t) for t in self.event_times))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["event_times"] = tuple(d["event_times"])
        d["position"] = tuple(d["position"])
        return cls(**d)


@dataclass(frozen=True)
class Corruption:
    kind: str
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise SpecError(f"unknown corruption {self.kind!r}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        _validate_params(self.kind, merged)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def _validate_params(kind: str, p: dict) -> None:
    ok = {
        "temporal_offset": lambda: abs(p["delta"]) <= 1.0,
        "ambient_noise": lambda: -20.0 <= p["snr_db"] <= 40.0,
        "shot_cut": lambda: 0.0 < p["t"],
        "camera_shake": lambda: 0.0 < p["amplitude"] <= 8.0,
        "text_overlay": lambda: 0.0 < p["area"] <= 0.5,
    }.get(kind, lambda: True)()
    if not ok:
        raise SpecError(f"parameters out of range for {kind}: {p}")


# -- rendering -----------------------------------------------------------


def _texture(seed: int, level: float, size: int = FRAME_SIZE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.5, mode="wrap")
    tex = tex / (tex.std() + 1e-12) * TEXTURE_STD
    return level + tex


def _envelope(t: np.ndarray, events: Sequence[float]) -> np.ndarray:
    env = np.zeros_like(t)
    for e in events:
        dt = t - e
        env += np.where(dt >= 0, np.exp(-np.maximum(dt, 0.0) / VISUAL_DECAY_S), 0.0)
    return np.minimum(env, 1.5)


def _blob(x: float, y: float, sigma: float, size: int = FRAME_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2))


def _object_frame(class_id: str, env: float, pos, size: float, color: float) -> np.ndarray:
    x, y = pos
    sigma = size * (1 + 0.25 * env)
    amp = color * (0.35 + 0.65 * env)
    if class_id == "pulse":
        sigma = size * (1 + PULSE_GROWTH * env)
    elif class_id == "bounce":
        y = y + 3.0 * env
    elif class_id == "strike":
        x = x + 3.0 * env
    return amp * _blob(x, y, sigma)


def frame_times(duration: float, fps: float) -> np.ndarray:
    n = int(round(duration * fps))
    return (np.arange(n) + 0.5) / fps


def render_video(spec: SceneSpec, fps: float, visual_events: Sequence[float] | None = None,
                 distractor: dict | None = None, occluder: bool = False) -> np.ndarray:
    """Float frames in [0, 1], shape [N, 32, 32]."""
    times = frame_times(spec.duration, fps)
    events = spec.event_times if visual_events is None else visual_events
    env = _envelope(times, events)
    bg = _texture(spec.texture_seed, spec.background)
    frames = np.empty((len(times), FRAME_SIZE, FRAME_SIZE))
    occ = None
    if occluder:
        occ = 1.0 - 0.95 * _blob(*spec.position, 2.0 * spec.size + 2.0)
    if distractor is not None:
        denv = _envelope(times, distractor["events"])
    for i in range(len(times)):
        f = bg + FLASH_GAIN * env[i] + _object_frame(spec.class_id, env[i], spec.position, spec.size, spec.color)
        if occ is not None:
            f = f * occ
        if distractor is not None:
            f = f + distractor["color"] * (0.4 + 0.6 * denv[i]) * _blob(*distractor["position"], 2.0)
        frames[i] = f
    return np.clip(frames, 0.0, 1.0)


def render_audio(spec: SceneSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    x = rng.normal(0, 0.002, n)
    f = CARRIER_HZ[spec.class_id]
    click = rng.normal(0, 1.0, n)
    for e in spec.event_times:
        dt = t - e
        on = dt >= 0
        d = np.maximum(dt, 0.0)
        x += np.where(on, 0.5 * np.sin(2 * np.pi * f * d) * np.exp(-d / AUDIO_DECAY_S), 0.0)
        x += np.where(on, 0.3 * click * np.exp(-d / CLICK_DECAY_S), 0.0)
    return np.clip(x, -1.0, 1.0)


def _to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


def _sub_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _random_spec(rng: np.random.Generator, class_id: str | None = None, duration: float = 2.0,
                 n_events: int | None = None) -> SceneSpec:
    class_id = class_id or CLASSES[rng.integers(len(CLASSES))]
    n = n_events or int(rng.integers(1, 4))
    events = _sample_events(rng, n, duration)
    return SceneSpec(
        class_id=class_id,
        event_times=events,
        position=(float(rng.uniform(11, 21)), float(rng.uniform(10, 18))),
        size=float(rng.uniform(3.0, 4.5)),
        color=float(rng.uniform(0.6, 0.9)),
        background=float(rng.uniform(0.15, 0.35)),
        texture_seed=int(rng.integers(2 ** 31)),
        duration=duration,
    )


def _sample_events(rng: np.random.Generator, n: int, duration: float, margin: float = 0.15) -> tuple:
    for _ in range(1000):
        ev = np.sort(rng.uniform(margin, duration - margin, n))
        if n == 1 or np.diff(ev).min() >= MIN_EVENT_GAP_S:
            return tuple(float(round(e, 4)) for e in ev)
    raise SpecError("could not place events")


def _materialize(spec: SceneSpec, fps: float, seed: int, corrs: Sequence[Corruption],
                 clip_id: str, resolution=NOMINAL_RESOLUTION) -> ClipRecord:
    shift = sum(c.params["delta"] for c in corrs if c.kind == "temporal_offset")
    visual_events = tuple(e + shift for e in spec.event_times)
    for e in visual_events:
        if not 0.0 < e < spec.duration:
            raise SpecError(f"offset {shift} pushes event {e} outside the clip")
    distractor = None
    if any(c.kind == "distractor_motion" for c in corrs):
        r = _sub_rng(seed, 11)
        distractor = {"events": _sample_events(r, int(r.integers(1, 4)), spec.duration),
                      "position": (float(r.uniform(4, 28)), float(r.uniform(4, 28))),
                      "color": float(r.uniform(0.5, 0.9))}
    occluder = any(c.kind == "occluded_source" for c in corrs)
    frames = render_video(spec, fps, visual_events, distractor, occluder)
    kinds = {c.kind: c for c in corrs}
    times = frame_times(spec.duration, fps)
    if "shot_cut" in kinds:
        r = _sub_rng(seed, 12)
        other = _random_spec(r, duration=spec.duration)
        level = spec.background + CUT_LEVEL_SHIFT if spec.background < 0.5 else spec.background - CUT_LEVEL_SHIFT
        other = SceneSpec(**{**other.to_dict(), "background": level,
                             "event_times": other.event_times, "position": other.position})
        alt = render_video(other, fps)
        cut = times >= kinds["shot_cut"].params["t"]
        frames[cut] = alt[cut]
    if "camera_shake" in kinds:
        r = _sub_rng(seed, 13)
        a = kinds["camera_shake"].params["amplitude"]
        for i in range(len(frames)):
            ang = r.uniform(0, 2 * np.pi)
            dx, dy = int(round(a * np.cos(ang))), int(round(a * np.sin(ang)))
            frames[i] = ndimage.shift(frames[i], (dy, dx), order=0, mode="nearest")
    if "low_res" in kinds:
        for i in range(len(frames)):
            small = frames[i].reshape(8, 4, 8, 4).mean(axis=(1, 3))
            frames[i] = np.clip(ndimage.zoom(small, 4, order=1), 0, 1)
        resolution = LOW_RESOLUTION
    if "text_overlay" in kinds:
        frames = _caption(frames, kinds["text_overlay"].params["area"], _sub_rng(seed, 14))
    audio = render_audio(spec, seed)
    if "ambient_noise" in kinds:
        clean = audio.copy()
        sig_power = np.mean(clean ** 2)
        snr = kinds["ambient_noise"].params["snr_db"]
        noise = _sub_rng(seed, 15).normal(0, np.sqrt(sig_power / 10 ** (snr / 10)), clean.size)
        audio = np.clip(clean + noise, -1.0, 1.0)
    labels = {
        "class": spec.class_id,
        "events": list(spec.event_times),
        "visual_events": list(visual_events),
        "corruptions": [c.to_dict() for c in corrs],
        "spec": spec.to_dict(),
        "seed": int(seed),
    }
    clip = ClipRecord(id=clip_id, fps=float(fps), resolution=tuple(resolution), duration=spec.duration,
                      frames=_to_uint8(frames), audio=Waveform(audio), labels=labels)
    clip.check()
    return clip


def _caption(frames: np.ndarray, area: float, rng: np.random.Generator) -> np.ndarray:
    h = frames.shape[1]
    rows = max(2, int(round(area * h)))
    box = np.full((rows, frames.shape[2]), 0.05)
    cells = rng.random((rows // 2 + 1, frames.shape[2] // 2 + 1)) < 0.5
    glyphs = np.kron(cells, np.ones((2, 2)))[:rows, :frames.shape[2]].astype(bool)
    box[glyphs] = 0.95
    out = frames.copy()
    out[:, h - rows:, :] = box
    return out


def generate_clip(spec: SceneSpec, fps: float = 6.0, seed: int = 0, clip_id: str | None = None) -> ClipRecord:
    return _materialize(spec, fps, seed, (), clip_id or f"{spec.class_id}-{seed}")


def corrupt(c: ClipRecord, corr: Corruption, seed: int | None = None) -> ClipRecord:
    """Return ``c`` re-materialized with ``corr`` added to its corruption list.

    The clip is rebuilt from its stored scene spec, so corruptions compose
    in a fixed order regardless of application order.
    """
    spec = SceneSpec.from_dict(c.labels["spec"])
    prior = [Corruption(d["kind"], d["params"]) for d in c.labels.get("corruptions", [])]
    if any(p.kind == corr.kind for p in prior):
        raise SpecError(f"{c.id} already carries {corr.kind}")
    base_seed = c.labels.get("seed", 0) if seed is None else seed
    return _materialize(spec, c.fps, base_seed, prior + [corr], c.id)


def shift_video(c: ClipRecord, frames_offset: int) -> ClipRecord:
    """Delay the picture by whole frames (first frame repeated), audio untouched."""
    f = c.frames
    if frames_offset > 0:
        f = np.concatenate([np.repeat(f[:1], frames_offset, axis=0), f[:-frames_offset]], axis=0)
    elif frames_offset < 0:
        f = np.concatenate([f[-frames_offset:], np.repeat(f[-1:], -frames_offset, axis=0)], axis=0)
    return ClipRecord(c.id, c.fps, c.resolution, c.duration, f, c.audio, dict(c.labels))


# -- onset oracles -------------------------------------------------------


def detect_audio_onsets(w: Waveform, threshold: float = 3.0, min_gap: float = 0.1) -> np.ndarray:
    """Energy-rise onsets in seconds.

    Log energy over 5 ms windows with 2.5 ms hop; a rise of more than
    ``threshold`` nats over the previous 20 ms minimum marks an onset.
    """
    x = w.samples
    win, hop = 80, 40
    n = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    e = np.log((x[idx] ** 2).mean(axis=1) + 1e-10)
    look = 8
    base = np.array([e[max(0, i - look):i].min() if i > 0 else e[0] for i in range(n)])
    rise = e - base
    onsets = []
    last = -np.inf
    for i in range(n):
        if rise[i] > threshold:
            t = (i * hop + win) / SAMPLE_RATE
            if t - last >= min_gap:
                onsets.append(t - win / SAMPLE_RATE / 2)
                last = t
    return np.array(onsets)


def visual_brightness(frames: np.ndarray) -> np.ndarray:
    f = frames.astype(np.float64)
    if frames.dtype == np.uint8:
        f = f / 255.0
    return f.reshape(len(f), -1).mean(axis=1)


def detect_visual_impulses(frames: np.ndarray, fps: float, rel_threshold: float = 0.3) -> np.ndarray:
    """Frame times at which mean brightness rises sharply."""
    b = visual_brightness(frames)
    d = np.maximum(np.diff(b, prepend=b[0]), 0.0)
    if d.max() <= 0:
        return np.array([])
    peaks = [i for i in range(len(d)) if d[i] >= rel_threshold * d.max()
             and d[i] >= d[max(0, i - 1)] and d[i] >= d[min(len(d) - 1, i + 1)]]
    return (np.array(peaks) + 0.5) / fps


# -- benchmark -----------------------------------------------------------


@dataclass
class BenchmarkConfig:
    classes: tuple[str, ...] = CLASSES
    fps: float = 6.0
    pretrain_size: int = 2000
    pretrain_corruption_rate: float = 0.6
    multi_corruption_prob: float = 0.25
    corruption_kinds: tuple[str, ...] = CORRUPTION_KINDS
    finetune_pool_per_class: int = 10
    k_shots: tuple[int, ...] = (1, 5, 10)
    test_per_class: int = 20
    test_duration: float = 4.0
    workers: int = 1

    def __post_init__(self):
        for c in self.classes:
            if c not in CLASSES:
                raise BenchConfigError(f"unknown class {c!r}")
        if len(self.classes) < 2:
            raise BenchConfigError("need at least two classes")
        for k in self.k_shots:
            if not 0 <= k <= self.finetune_pool_per_class:
                raise BenchConfigError(f"K={k} exceeds finetune pool of {self.finetune_pool_per_class}")
        if not 0.0 <= self.pretrain_corruption_rate <= 1.0:
            raise BenchConfigError("corruption rate must be within [0, 1]")


@dataclass
class DatasetManifest:
    seed: int
    splits: dict[str, list[str]]
    corruption_rates: dict[str, float]
    config: dict[str, Any]
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps({"schema_version": self.schema_version, "seed": self.seed, "splits": self.splits,
                           "corruption_rates": self.corruption_rates, "config": self.config},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise BenchConfigError(f"unsupported manifest schema {d.get('schema_version')}")
        return cls(seed=d["seed"], splits=d["splits"], corruption_rates=d["corruption_rates"], config=d["config"])


@dataclass
class Benchmark:
    manifest: DatasetManifest
    clips: dict[str, ClipRecord]

    def split(self, name: str) -> list[ClipRecord]:
        return [self.clips[i] for i in self.manifest.splits[name]]


def _clip_seed(master: int, split: str, index: int) -> int:
    tag = sum(ord(ch) * 131 ** i for i, ch in enumerate(split)) % (2 ** 31)
    return int(np.random.SeedSequence([master, tag, index]).generate_state(1)[0])


def _pretrain_job(args):
    master, i, cfg, corrupt_kinds = args
    seed = _clip_seed(master, "pretrain", i)
    rng = _sub_rng(seed, 1)
    spec = _random_spec(rng, class_id=cfg.classes[int(rng.integers(len(cfg.classes)))])
    corrs = []
    for kind in corrupt_kinds:
        params = {}
        if kind == "temporal_offset":
            for _ in range(100):
                d = float(rng.choice([-1, 1]) * rng.uniform(0.2, 0.5))
                if all(0.0 < e + d < spec.duration for e in spec.event_times):
                    params["delta"] = round(d, 4)
                    break
            else:
                continue
        elif kind == "ambient_noise":
            params["snr_db"] = float(rng.uniform(-5, 5))
        elif kind == "shot_cut":
            params["t"] = float(rng.uniform(0.5, 1.5))
        elif kind == "camera_shake":
            params["amplitude"] = float(rng.uniform(3, 6))
        elif kind == "text_overlay":
            params["area"] = float(rng.uniform(0.15, 0.3))
        corrs.append(Corruption(kind, params))
    return _materialize(spec, cfg.fps, seed, corrs, f"pt-{i:05d}")


def _clean_job(args):
    master, split, i, class_id, fps, duration = args
    seed = _clip_seed(master, split, i)
    rng = _sub_rng(seed, 1)
    n = int(rng.integers(1, 4)) if duration <= 2.0 else int(rng.integers(2, 6))
    spec = _random_spec(rng, class_id=class_id, duration=duration, n_events=n)
    return _materialize(spec, fps, seed, (), f"{split}-{class_id}-{i:03d}")


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=16))


def kshot_subset(pool_ids: Sequence[str], clips: dict[str, ClipRecord], K: int, seed: int) -> list[str]:
    """K ids per class drawn without replacement from ``pool_ids``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, K]))
    by_class: dict[str, list[str]] = {}
    for i in pool_ids:
        by_class.setdefault(clips[i].labels["class"], []).append(i)
    out = []
    for cls in sorted(by_class):
        ids = by_class[cls]
        if K > len(ids):
            raise BenchConfigError(f"K={K} exceeds {len(ids)} pool clips for class {cls}")
        out.extend(ids[j] for j in sorted(rng.choice(len(ids), size=K, replace=False)))
    return out


def build_benchmark(cfg: BenchmarkConfig | None = None, seed: int = 0) -> Benchmark:
    cfg = cfg or BenchmarkConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE]))
    n = cfg.pretrain_size
    n_bad = int(round(cfg.pretrain_corruption_rate * n))
    bad = set(rng.permutation(n)[:n_bad].tolist())
    jobs = []
    for i in range(n):
        kinds: list[str] = []
        if i in bad:
            count = 2 if rng.random() < cfg.multi_corruption_prob else 1
            kinds = [str(k) for k in rng.choice(cfg.corruption_kinds, size=count, replace=False)]
        jobs.append((seed, i, cfg, tuple(kinds)))
    pretrain = _map(_pretrain_job, jobs, cfg.workers)
    pool_jobs = [(seed, "ft", ci * cfg.finetune_pool_per_class + j, c, cfg.fps, 2.0)
                 for ci, c in enumerate(cfg.classes) for j in range(cfg.finetune_pool_per_class)]
    pool = _map(_clean_job, pool_jobs, cfg.workers)
    test_jobs = [(seed, "te", ci * cfg.test_per_class + j, c, cfg.fps, cfg.test_duration)
                 for ci, c in enumerate(cfg.classes) for j in range(cfg.test_per_class)]
    test = _map(_clean_job, test_jobs, cfg.workers)
    clips = {c.id: c for c in pretrain + pool + test}
    splits = {
        "pretrain": [c.id for c in pretrain],
        "finetune_pool": [c.id for c in pool],
        "test": [c.id for c in test],
    }
    for k in cfg.k_shots:
        splits[f"finetune_K{k}"] = kshot_subset(splits["finetune_pool"], clips, k, seed) if k else []
    rates = {"pretrain": sum(1 for c in pretrain if c.labels["corruptions"]) / max(1, n),
             "finetune_pool": 0.0, "test": 0.0}
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items() if k != "workers"}
    manifest = DatasetManifest(seed=seed, splits=splits, corruption_rates=rates, config=config)
    return Benchmark(manifest=manifest, clips=clips)


def evaluation_windows(clip: ClipRecord, n: int = 3, length: float = 2.0) -> list[ClipRecord]:
    """``n`` uniformly spaced sub-clips of ``length`` seconds."""
    if clip.duration < length:
        raise SpecError(f"{clip.id} shorter than the {length} s evaluation window")
    starts = np.linspace(0.0, clip.duration - length, n) if n > 1 else np.array([0.0])
    nf = int(round(length * clip.fps))
    ns = int(round(length * SAMPLE_RATE))
    out = []
    for j, s in enumerate(starts):
        f0 = int(round(s * clip.fps))
        a0 = int(round(s * SAMPLE_RATE))
        labels = dict(clip.labels)
        labels["events"] = [e - s for e in clip.labels["events"] if s < e < s + length]
        labels["window_start"] = float(s)
        out.append(ClipRecord(f"{clip.id}@{j}", clip.fps, clip.resolution, length,
                              clip.frames[f0:f0 + nf].copy(), Waveform(clip.audio.samples[a0:a0 + ns].copy()),
                              labels))
    return out
