"""Frame timelines and audio attention windows.

Frame ``i`` (1-based) sits at the center of its display interval,
``t_i = (i - 0.5) / fps``. A window of radius ``r_f`` frames makes an
audio token visible to frame ``i`` iff ``|tau - t_i| <= r_f / fps``.
With ``r_f = 0.5`` the windows tile the clip, which recovers the
one-chunk-per-frame baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class WindowConfigError(ValueError):
    pass


class CoverageError(ValueError):
    pass


# absorbs float rounding in |tau - t| at exact window edges
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class FrameTimeline:
    K: int
    fps: float
    frame_times: np.ndarray

    @property
    def duration(self) -> float:
        return self.K / self.fps


@dataclass(frozen=True)
class WindowSpec:
    radius_frames: float = 1.5

    def __post_init__(self):
        if not self.radius_frames > 0:
            raise WindowConfigError("window radius must be positive")

    def seconds(self, fps: float) -> float:
        return self.radius_frames / fps


@dataclass(frozen=True)
class AttentionMask:
    visible: np.ndarray  # bool [K, T]

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape

    def to_text(self) -> str:
        return mask_to_text(self)


def frame_timestamps(K: int, fps: float) -> FrameTimeline:
    if K < 1 or not fps > 0:
        raise WindowConfigError(f"need K >= 1 and fps > 0, got K={K}, fps={fps}")
    times = (np.arange(1, K + 1, dtype=np.float64) - 0.5) / fps
    return FrameTimeline(K=K, fps=float(fps), frame_times=times)


def build_window_mask(tl: FrameTimeline, token_times: Sequence[float], spec: WindowSpec) -> AttentionMask:
    tau = np.asarray(token_times, dtype=np.float64)
    if tau.ndim != 1:
        raise WindowConfigError("token_times must be one-dimensional")
    dur = tl.duration
    if tau.size and (tau.min() < -_EDGE_TOL or tau.max() > dur + _EDGE_TOL):
        raise WindowConfigError(f"token times must lie within [0, {dur}]")
    r = spec.seconds(tl.fps)
    visible = np.abs(tau[None, :] - tl.frame_times[:, None]) <= r + _EDGE_TOL
    empty = np.flatnonzero(~visible.any(axis=1))
    if empty.size:
        raise CoverageError(f"frame {int(empty[0]) + 1} has no audio token within radius {spec.radius_frames}")
    return AttentionMask(visible)


def chunk_mask(K: int, T_tok: int) -> AttentionMask:
    """Split ``T_tok`` tokens into ``K`` contiguous chunks, one per frame.

    Chunk sizes differ by at most one; the remainder goes to the earliest
    chunks.
    """
    if K < 1 or T_tok < K:
        raise WindowConfigError(f"chunk_mask needs T_tok >= K >= 1, got K={K}, T_tok={T_tok}")
    base, rem = divmod(T_tok, K)
    sizes = [base + (1 if i < rem else 0) for i in range(K)]
    visible = np.zeros((K, T_tok), dtype=bool)
    start = 0
    for i, n in enumerate(sizes):
        visible[i, start:start + n] = True
        start += n
    return AttentionMask(visible)


def build_source_masks(tl: FrameTimeline, source_times: Sequence[Sequence[float]], spec: WindowSpec) -> AttentionMask:
    """Build one window mask per token source and join them column-wise."""
    parts = [build_window_mask(tl, times, spec).visible for times in source_times]
    return AttentionMask(np.concatenate(parts, axis=1))


def mask_to_text(mask: AttentionMask) -> str:
    K, T = mask.shape
    rows = ["".join("1" if v else "0" for v in row) for row in mask.visible]
    return f"MASK {K} {T}\n" + "\n".join(rows) + "\n"


def mask_from_text(text: str) -> AttentionMask:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    head = lines[0].split()
    if head[0] != "MASK" or len(head) != 3:
        raise ValueError("not a mask dump")
    K, T = int(head[1]), int(head[2])
    rows = lines[1:]
    if len(rows) != K or any(len(r) != T or set(r) - {"0", "1"} for r in rows):
        raise ValueError("mask dump body does not match header")
    return AttentionMask(np.array([[c == "1" for c in r] for r in rows], dtype=bool))
