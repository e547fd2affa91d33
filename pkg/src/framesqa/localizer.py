"""From frame scores to detected low-quality segments.

Pipeline: calibrate a threshold on clean reference scores for a target
false-alarm rate, mark frames strictly below it, smooth the binary mask with
a centered majority vote, drop short runs, and convert runs to intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import EventList
from .model import FPS


@dataclass
class DetectionConfig:
    target_far: float = 0.01
    smooth_window_s: float = 0.2
    min_duration_s: float = 0.1
    threshold: float | None = None

    def validate(self) -> None:
        if not 0.0 < self.target_far <= 1.0:
            raise ValueError("target_far must be in (0, 1]")
        if self.smooth_window_s <= 0 or self.min_duration_s <= 0:
            raise ValueError("window and minimum duration must be positive")


def select_threshold(reference_scores, target_far: float = 0.01) -> float:
    """Lower quantile of the pooled reference scores at ``target_far``.

    The linearly interpolated quantile is capped at the k-th smallest score,
    k = floor(target_far * n) + 1, so at most ``target_far * n`` reference
    frames fall strictly below the returned threshold.
    """
    if isinstance(reference_scores, np.ndarray):
        x = np.sort(reference_scores.ravel())
    else:
        parts = [np.ravel(r) for r in reference_scores]
        x = np.sort(np.concatenate(parts)) if parts else np.empty(0)
    if x.size == 0:
        raise ValueError("empty reference")
    if not 0.0 < target_far <= 1.0:
        raise ValueError("target_far must be in (0, 1]")
    if not np.all(np.isfinite(x)):
        raise ValueError("reference scores must be finite")
    k = min(math.floor(target_far * x.size) + 1, x.size)
    return float(min(np.quantile(x, target_far), x[k - 1]))


def binarize(q, threshold: float) -> np.ndarray:
    return np.asarray(q) < threshold


def window_frames(window_s: float, fps: int = FPS) -> int:
    """Odd window length in frames covering ``window_s`` (10 frames -> 11)."""
    n = int(round(window_s * fps))
    if n < 1:
        raise ValueError("smoothing window shorter than one frame")
    return n if n % 2 else n + 1


def runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of ones as (start, stop) with exclusive stop."""
    m = np.concatenate([[0], np.asarray(mask, dtype=np.int8), [0]])
    edges = np.flatnonzero(np.diff(m))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def smooth_and_prune(
    mask, fps: int = FPS, smooth_window_s: float = 0.2, min_duration_s: float = 0.1
) -> np.ndarray:
    """Centered majority vote (edge-replicated, ties -> 1), then drop short runs.

    Works on the last axis, so a 2-D array of masks is smoothed row-wise.
    """
    mask = np.asarray(mask, dtype=bool)
    w = window_frames(smooth_window_s, fps)
    half = w // 2
    pad = [(0, 0)] * (mask.ndim - 1) + [(half, half)]
    padded = np.pad(mask.astype(np.int32), pad, mode="edge")
    c = np.cumsum(padded, axis=-1)
    c = np.concatenate([np.zeros(c.shape[:-1] + (1,), dtype=c.dtype), c], axis=-1)
    votes = c[..., w:] - c[..., :-w]
    smoothed = 2 * votes >= w

    min_len = math.ceil(min_duration_s * fps - 1e-9)
    flat = smoothed.reshape(-1, smoothed.shape[-1])
    for row in flat:
        for start, stop in runs(row):
            if stop - start < min_len:
                row[start:stop] = False
    return flat.reshape(smoothed.shape)


def extract_segments(mask, fps: int = FPS, utt_id: str = "") -> EventList:
    return EventList(utt_id, [(a / fps, b / fps) for a, b in runs(mask)])


def events_to_mask(events, n_frames: int, fps: int = FPS) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=bool)
    for onset, offset in events:
        mask[int(round(onset * fps)) : int(round(offset * fps))] = True
    return mask


def detect_scores(q, threshold: float, cfg: DetectionConfig | None = None, fps: int = FPS, utt_id: str = "") -> EventList:
    """Threshold, smooth, prune and segment one utterance's frame scores."""
    cfg = cfg or DetectionConfig()
    mask = smooth_and_prune(binarize(q, threshold), fps, cfg.smooth_window_s, cfg.min_duration_s)
    return extract_segments(mask, fps, utt_id)


def detect(model, w, cfg: DetectionConfig, threshold: float | None = None, utt_id: str = "") -> EventList:
    """Score a waveform with ``model`` and return its detected segments."""
    from .model import forward
    from .signal_io import preprocess

    theta = threshold if threshold is not None else cfg.threshold
    if theta is None:
        raise ValueError("no threshold given; calibrate one with select_threshold")
    q, _, _ = forward(model, preprocess(w))
    return detect_scores(q, theta, cfg, FPS, utt_id)


def segment_min_scores(q, events: EventList, fps: int = FPS) -> list[float]:
    q = np.asarray(q)
    return [float(q[int(round(a * fps)) : int(round(b * fps))].min()) for a, b in events]
