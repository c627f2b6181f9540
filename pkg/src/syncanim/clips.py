"""Clip records and the on-disk clip container.

A container is one directory per clip::

    <clip_id>/frames.bin   magic + dims + fps + dtype, then raw uint8 frames
    <clip_id>/audio.pcm    headerless int16 little-endian PCM, 16 kHz
    <clip_id>/audio.json   sidecar with sample count and clip id
    <clip_id>/meta.json    metadata, labels and scene spec
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .audiofront import Waveform, read_pcm, write_pcm

FRAME_MAGIC = b"SYNFRM01"
_DTYPE_CODES = {0: np.uint8}


class ClipFormatError(ValueError):
    pass


@dataclass
class ClipRecord:
    id: str
    fps: float
    resolution: tuple[int, int]
    duration: float
    frames: np.ndarray  # uint8 [N, H, W] or [N, H, W, 3]
    audio: Waveform
    labels: dict[str, Any] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    def float_frames(self) -> np.ndarray:
        """Grayscale frames in [0, 1] as float64 [N, H, W]."""
        f = self.frames.astype(np.float64) / 255.0
        if f.ndim == 4:
            f = f @ np.array([0.299, 0.587, 0.114])
        return f

    def check(self) -> None:
        if self.n_frames != int(round(self.duration * self.fps)):
            raise ClipFormatError(
                f"{self.id}: {self.n_frames} frames but duration*fps = {self.duration * self.fps}")

    @property
    def corruption_kinds(self) -> set[str]:
        return {c["kind"] for c in self.labels.get("corruptions", [])}


def write_clip(root, clip: ClipRecord) -> Path:
    d = Path(root) / clip.id
    d.mkdir(parents=True, exist_ok=True)
    frames = np.ascontiguousarray(clip.frames, dtype=np.uint8)
    n, h, w = frames.shape[:3]
    c = 1 if frames.ndim == 3 else frames.shape[3]
    head = FRAME_MAGIC + struct.pack("<IIIIdB", n, h, w, c, float(clip.fps), 0)
    (d / "frames.bin").write_bytes(head + frames.tobytes())
    write_pcm(d / "audio.pcm", clip.audio, clip.id)
    meta = {
        "id": clip.id,
        "fps": clip.fps,
        "resolution": list(clip.resolution),
        "duration": clip.duration,
        "labels": clip.labels,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return d


def read_clip(path) -> ClipRecord:
    d = Path(path)
    try:
        meta = json.loads((d / "meta.json").read_text())
        raw = (d / "frames.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ClipFormatError(f"{d}: {e}") from e
    if not raw.startswith(FRAME_MAGIC):
        raise ClipFormatError(f"{d}: bad frame magic")
    off = len(FRAME_MAGIC)
    n, h, w, c, fps, code = struct.unpack_from("<IIIIdB", raw, off)
    off += struct.calcsize("<IIIIdB")
    if code not in _DTYPE_CODES:
        raise ClipFormatError(f"{d}: unknown dtype code {code}")
    shape = (n, h, w) if c == 1 else (n, h, w, c)
    frames = np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(shape).copy()
    audio, _ = read_pcm(d / "audio.pcm")
    for key in ("id", "fps", "resolution", "duration"):
        if key not in meta:
            raise ClipFormatError(f"{d}: metadata lacks {key!r}")
    return ClipRecord(id=meta["id"], fps=float(meta["fps"]), resolution=tuple(meta["resolution"]),
                      duration=float(meta["duration"]), frames=frames, audio=audio,
                      labels=meta.get("labels", {}))


def read_corpus(root) -> list[ClipRecord]:
    root = Path(root)
    return [read_clip(p) for p in sorted(root.iterdir()) if (p / "meta.json").exists()]


def write_corpus(root, clips) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    for clip in clips:
        write_clip(root, clip)
