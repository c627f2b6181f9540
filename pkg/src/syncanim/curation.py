"""Automatic corpus curation: metadata, blacklist, scene split, motion and text filters.

The detectors are classical stand-ins that keep the decision structure of
a real pipeline:

* scene cuts from the L1 distance between 32-bin intensity histograms of
  neighbouring frames,
* sharp motion from the mean absolute frame difference,
* burned-in text from pixels that stay both static and edge-like.

Per-clip work is independent. The report is rebuilt in input order, so
the outcome does not depend on the number of workers.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .clips import ClipFormatError, ClipRecord

HIST_BINS = 32
TEXT_BLUR_SIGMA = 0.7
TEXT_EDGE_THRESHOLD = 0.25
TEXT_EDGE_PERSISTENCE = 0.9
TEXT_STATIC_VAR = 1e-4

FILTER_ORDER = ("metadata", "blacklist", "scene", "motion", "text")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CurationConfig:
    """Filter thresholds. The three detector thresholds are calibrated on the synthetic corpus."""

    min_duration_s: float = 2.0
    min_fps: float = 6.0
    min_resolution: int = 64
    scene_threshold: float = 0.5
    motion_threshold: float = 0.105
    text_threshold: float = 0.05
    blacklist_ids: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "blacklist_ids", frozenset(self.blacklist_ids))
        for name in ("min_duration_s", "min_fps", "min_resolution", "scene_threshold",
                     "motion_threshold", "text_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blacklist_ids"] = sorted(self.blacklist_ids)
        return d


@dataclass(frozen=True)
class FilterResult:
    passed: bool
    reason: str = ""
    score: float = 0.0


# -- individual filters ----------------------------------------------------


def metadata_filter(c: ClipRecord, cfg: CurationConfig = CurationConfig()) -> FilterResult:
    """Reject clips that are too short, too slow or too small (thresholds inclusive)."""
    try:
        duration, fps = float(c.duration), float(c.fps)
        w, h = (int(v) for v in c.resolution)
    except (TypeError, ValueError) as exc:
        raise ClipFormatError(f"{getattr(c, 'id', '?')}: unreadable metadata") from exc
    if not (np.isfinite(duration) and np.isfinite(fps)) or duration <= 0 or fps <= 0 or min(w, h) <= 0:
        raise ClipFormatError(f"{c.id}: corrupt metadata")
    if duration < cfg.min_duration_s:
        return FilterResult(False, "duration", duration)
    if fps < cfg.min_fps:
        return FilterResult(False, "fps", fps)
    if min(w, h) < cfg.min_resolution:
        return FilterResult(False, "resolution", float(min(w, h)))
    return FilterResult(True)


def _gray(frames: np.ndarray) -> np.ndarray:
    f = np.asarray(frames)
    if f.dtype == np.uint8:
        f = f.astype(np.float64) / 255.0
    if f.ndim == 4:
        f = f @ np.array([0.299, 0.587, 0.114])
    return f


def histogram_distances(frames: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Half L1 distance between consecutive normalized intensity histograms, in [0, 1]."""
    f = _gray(frames)
    idx = np.clip((f.reshape(len(f), -1) * bins).astype(int), 0, bins - 1)
    hist = np.stack([np.bincount(r, minlength=bins) for r in idx]) / idx.shape[1]
    return 0.5 * np.abs(np.diff(hist, axis=0)).sum(axis=1)


def scene_boundaries(frames: np.ndarray, threshold: float) -> list[int]:
    """Frame indices that start a new scene (distance to the previous frame >= threshold)."""
    if len(frames) < 2:
        raise ValueError("scene splitting needs at least two frames")
    return [i + 1 for i, d in enumerate(histogram_distances(frames)) if d >= threshold]


def split_scenes(c: ClipRecord, threshold: float, min_duration_s: float = 2.0) -> list[tuple[int, int]]:
    """Half-open frame ranges of the scenes that are long enough to keep."""
    cuts = [0, *scene_boundaries(c.frames, threshold), c.n_frames]
    min_frames = int(round(min_duration_s * c.fps))
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b - a >= min_frames]


def motion_score(frames: np.ndarray) -> float:
    f = _gray(frames)
    if len(f) < 2:
        raise ValueError("motion scoring needs at least two frames")
    return float(np.abs(np.diff(f, axis=0)).mean())


def motion_filter(c: ClipRecord, threshold: float) -> FilterResult:
    s = motion_score(c.frames)
    return FilterResult(s <= threshold, "" if s <= threshold else "motion", s)


def text_score(frames: np.ndarray) -> float:
    """Fraction of pixels that are edges in >= 90% of frames and temporally static."""
    f = _gray(frames)
    if len(f) < 2:
        raise ValueError("text scoring needs at least two frames")
    blurred = ndimage.gaussian_filter(f, (0, TEXT_BLUR_SIGMA, TEXT_BLUR_SIGMA), mode="nearest")
    gy = ndimage.sobel(blurred, axis=1, mode="nearest") / 8.0
    gx = ndimage.sobel(blurred, axis=2, mode="nearest") / 8.0
    edge = np.hypot(gx, gy) > TEXT_EDGE_THRESHOLD
    persistent = edge.mean(axis=0) >= TEXT_EDGE_PERSISTENCE
    static = f.var(axis=0) < TEXT_STATIC_VAR
    return float((persistent & static).mean())


def text_overlay_filter(c: ClipRecord, threshold: float) -> FilterResult:
    s = text_score(c.frames)
    return FilterResult(s <= threshold, "" if s <= threshold else "text", s)


# -- pipeline --------------------------------------------------------------


@dataclass
class ClipDecision:
    id: str
    outcome: str  # "kept", "rejected" or "split"
    reason: str = ""
    scores: dict = field(default_factory=dict)
    children: list = field(default_factory=list)  # kept segment ids


def _segment(c: ClipRecord, a: int, b: int, j: int) -> ClipRecord:
    from .audiofront import SAMPLE_RATE, Waveform

    s0, s1 = int(round(a / c.fps * SAMPLE_RATE)), int(round(b / c.fps * SAMPLE_RATE))
    labels = {**c.labels, "parent": c.id, "segment": [a, b]}
    return ClipRecord(f"{c.id}#s{j}", c.fps, c.resolution, (b - a) / c.fps, c.frames[a:b].copy(),
                      Waveform(c.audio.samples[s0:s1].copy()), labels)


def _content_filters(c: ClipRecord, cfg: CurationConfig, scores: dict) -> str:
    m = motion_filter(c, cfg.motion_threshold)
    scores["motion"] = m.score
    if not m.passed:
        return "motion"
    t = text_overlay_filter(c, cfg.text_threshold)
    scores["text"] = t.score
    if not t.passed:
        return "text"
    return ""


def curate_clip(c: ClipRecord, cfg: CurationConfig) -> tuple[ClipDecision, list[ClipRecord]]:
    """Decision for one clip and the records it contributes to the curated corpus."""
    meta = metadata_filter(c, cfg)
    if not meta.passed:
        return ClipDecision(c.id, "rejected", meta.reason), []
    if c.id in cfg.blacklist_ids:
        return ClipDecision(c.id, "rejected", "blacklist"), []
    scores: dict = {}
    cuts = scene_boundaries(c.frames, cfg.scene_threshold)
    scores["scene_cuts"] = len(cuts)
    if not cuts:
        reason = _content_filters(c, cfg, scores)
        if reason:
            return ClipDecision(c.id, "rejected", reason, scores), []
        return ClipDecision(c.id, "kept", "", scores), [c]
    kept = []
    for j, (a, b) in enumerate(split_scenes(c, cfg.scene_threshold, cfg.min_duration_s)):
        seg = _segment(c, a, b, j)
        if not _content_filters(seg, cfg, {}):
            kept.append(seg)
    if not kept:
        return ClipDecision(c.id, "rejected", "scene", scores), []
    return ClipDecision(c.id, "split", "", scores, [s.id for s in kept]), kept


def _job(args):
    c, cfg = args
    return curate_clip(c, cfg)


@dataclass
class CurationReport:
    decisions: list[ClipDecision]
    config: dict

    @property
    def counts(self) -> dict[str, int]:
        out = Counter(d.outcome if d.outcome != "rejected" else f"rejected:{d.reason}" for d in self.decisions)
        out["input"] = len(self.decisions)
        out["segments"] = sum(len(d.children) for d in self.decisions)
        return dict(sorted(out.items()))

    def kept_ids(self) -> list[str]:
        ids = []
        for d in self.decisions:
            ids.extend([d.id] if d.outcome == "kept" else d.children)
        return ids

    def rejected_by(self, reason: str) -> set[str]:
        return {d.id for d in self.decisions if d.outcome == "rejected" and d.reason == reason}

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "counts": self.counts,
                           "decisions": [asdict(d) for d in self.decisions]}, sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "outcome", "reason", "scene_cuts", "motion", "text", "children"])
        for d in self.decisions:
            s = d.scores
            w.writerow([d.id, d.outcome, d.reason, s.get("scene_cuts", ""),
                        f"{s['motion']:.6f}" if "motion" in s else "",
                        f"{s['text']:.6f}" if "text" in s else "", ";".join(d.children)])
        return buf.getvalue()


def run_pipeline(corpus: Sequence[ClipRecord], cfg: CurationConfig = CurationConfig(),
                 workers: int = 1) -> tuple[list[ClipRecord], CurationReport]:
    """Apply metadata, blacklist, scene, motion and text filters in that order."""
    ids = [c.id for c in corpus]
    dup = sorted(i for i, n in Counter(ids).items() if n > 1)
    if dup:
        raise CorpusError(f"duplicate clip ids: {dup[:5]}")
    jobs = [(c, cfg) for c in corpus]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_job(j) for j in jobs]
    curated = [clip for _, kept in results for clip in kept]
    return curated, CurationReport([d for d, _ in results], cfg.to_dict())


# -- evaluation against generator labels -----------------------------------

# corruption label -> the filter responsible for catching it
LABELED_FILTERS = {
    "shot_cut": "scene",
    "camera_shake": "motion",
    "text_overlay": "text",
    "low_res": "resolution",
}


def precision_recall(corpus: Sequence[ClipRecord], report: CurationReport) -> dict[str, dict[str, float]]:
    """Per corruption type, how well the pipeline's decisions match the generator labels.

    Precision counts the clips attributed to the type's filter (for scenes,
    any clip in which a cut was found) that really carry the label. Recall
    counts labeled clips that did not survive intact.
    """
    by_id = {c.id: c for c in corpus}
    if set(by_id) != {d.id for d in report.decisions}:
        raise CorpusError("report does not cover the corpus")
    out = {}
    for kind, name in LABELED_FILTERS.items():
        flagged = {d.id for d in report.decisions
                   if (d.outcome == "rejected" and d.reason == name) or (name == "scene" and d.outcome == "split")}
        removed = {d.id for d in report.decisions if d.outcome != "kept"}
        truth = {i for i, c in by_id.items() if kind in c.corruption_kinds}
        out[kind] = {
            "precision": len(flagged & truth) / len(flagged) if flagged else 1.0,
            "recall": len(truth & removed) / len(truth) if truth else 1.0,
            "positives": len(truth),
            "flagged": len(flagged),
        }
    return out
