"""Evaluation: frame-score volatility, rank correlations, intersection-based
detection scoring, and dev-set threshold tuning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .events import EventList
from .localizer import DetectionConfig, runs, smooth_and_prune
from .model import FPS

RHO_1 = (0.7, 0.3)
RHO_2 = (0.7, 0.5)


def log_returns(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.size < 2:
        raise ValueError("need at least 2 frames for log-returns")
    if np.any(q <= 0):
        raise ValueError("frame scores must be positive")
    return np.log(q[1:] / q[:-1])


def volatility(q, fps: int = FPS) -> float:
    """sqrt(T / fps) * std(log-returns), population std; units of per-second."""
    q = np.asarray(q, dtype=np.float64)
    if q.size < 3:
        raise ValueError("need at least 3 frames for volatility")
    return float(math.sqrt(q.size / fps) * np.std(log_returns(q)))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise ValueError("spearman is undefined for constant input")
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


def system_spearman(utt_scores, utt_labels, system_ids) -> float:
    """Spearman between per-system mean predictions and per-system mean labels."""
    systems = sorted(set(system_ids))
    if len(systems) < 2:
        raise ValueError("system-level correlation needs at least 2 systems")
    ids = np.asarray(system_ids)
    s, l = np.asarray(utt_scores, dtype=float), np.asarray(utt_labels, dtype=float)
    return spearman([s[ids == k].mean() for k in systems], [l[ids == k].mean() for k in systems])


# --- intersection-based detection evaluation --------------------------------

@dataclass
class EvalConfig:
    rho_dtc: float = RHO_1[0]
    rho_gtc: float = RHO_1[1]

    def validate(self) -> None:
        if not (0 < self.rho_dtc <= 1 and 0 < self.rho_gtc <= 1):
            raise ValueError("tolerances must lie in (0, 1]")


@dataclass
class DetectionReport:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1)
        return d


def _intervals(events) -> np.ndarray:
    return np.asarray(list(events), dtype=np.float64).reshape(-1, 2)


def utterance_counts(dets, gts, rho_dtc: float, rho_gtc: float) -> tuple[int, int, int]:
    """(tp, fp, fn) for one utterance.

    A detection is relevant when its summed overlap with ground truth covers
    at least ``rho_dtc`` of its length; a ground-truth event is a hit when the
    relevant detections cover at least ``rho_gtc`` of it.
    """
    d, g = _intervals(dets), _intervals(gts)
    if len(d) == 0:
        return 0, 0, len(g)
    if len(g) == 0:
        return 0, len(d), 0
    inter = np.minimum(d[:, 1:2], g[None, :, 1]) - np.maximum(d[:, 0:1], g[None, :, 0])
    inter = np.clip(inter, 0.0, None)
    relevant = inter.sum(axis=1) / (d[:, 1] - d[:, 0]) >= rho_dtc
    hit = inter[relevant].sum(axis=0) / (g[:, 1] - g[:, 0]) >= rho_gtc
    tp = int(hit.sum())
    return tp, int((~relevant).sum()), len(g) - tp


def _as_dict(lists) -> dict[str, EventList]:
    if isinstance(lists, Mapping):
        return dict(lists)
    return {ev.utt_id: ev for ev in lists}


def intersection_eval(dets, gts, cfg: EvalConfig | None = None) -> DetectionReport:
    """Sum per-utterance counts over the union of utterances in ``dets`` and ``gts``."""
    cfg = cfg or EvalConfig()
    cfg.validate()
    dets, gts = _as_dict(dets), _as_dict(gts)
    tp = fp = fn = 0
    for utt in sorted(set(dets) | set(gts)):
        d = dets.get(utt, EventList(utt))
        g = gts.get(utt, EventList(utt))
        a, b, c = utterance_counts(d, g, cfg.rho_dtc, cfg.rho_gtc)
        tp, fp, fn = tp + a, fp + b, fn + c
    return DetectionReport(tp, fp, fn)


def _report_f1(tp, fp, fn):
    prec = np.divide(tp, tp + fp, out=np.zeros(tp.shape), where=(tp + fp) > 0)
    rec = np.divide(tp, tp + fn, out=np.zeros(tp.shape), where=(tp + fn) > 0)
    return np.divide(2 * prec * rec, prec + rec, out=np.zeros(tp.shape), where=(prec + rec) > 0)


def tune_threshold(
    dev_scores: Mapping[str, np.ndarray],
    dev_gts,
    cfg: EvalConfig | None = None,
    det_cfg: DetectionConfig | None = None,
    fps: int = FPS,
) -> tuple[float, DetectionReport]:
    """Threshold maximizing intersection-based F1 over the dev set.

    Candidates are the midpoints between consecutive distinct dev frame scores
    plus one sentinel below the minimum and one above the maximum; this covers
    every distinct set of binary masks.  Ties go to the smallest threshold.
    """
    cfg = cfg or EvalConfig()
    det_cfg = det_cfg or DetectionConfig()
    gts = _as_dict(dev_gts)
    if not dev_scores:
        raise ValueError("empty dev set")
    pooled = np.unique(np.concatenate([np.ravel(q) for q in dev_scores.values()]))
    if pooled.size == 0:
        raise ValueError("empty dev scores")
    candidates = np.concatenate([[pooled[0] - 1.0], (pooled[:-1] + pooled[1:]) / 2, [pooled[-1] + 1.0]])

    tp = np.zeros(candidates.size, dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    for utt, q in dev_scores.items():
        q = np.asarray(q, dtype=np.float64)
        g = gts.get(utt, EventList(utt))
        levels = np.unique(q)
        # masks[j] = frames whose score is among the j smallest distinct levels
        masks = q[None, :] <= np.concatenate([[-np.inf], levels])[:, None]
        masks = smooth_and_prune(masks, fps, det_cfg.smooth_window_s, det_cfg.min_duration_s)
        counts = np.array(
            [
                utterance_counts([(a / fps, b / fps) for a, b in runs(m)], g, cfg.rho_dtc, cfg.rho_gtc)
                for m in masks
            ]
        )
        j = np.searchsorted(levels, candidates, side="left")
        tp += counts[j, 0]
        fp += counts[j, 1]
        fn += counts[j, 2]
    best = int(np.argmax(_report_f1(tp, fp, fn)))
    return float(candidates[best]), DetectionReport(int(tp[best]), int(fp[best]), int(fn[best]))


def evaluate_threshold(dev_scores, dev_gts, threshold, cfg=None, det_cfg=None, fps: int = FPS) -> DetectionReport:
    """Run the localizer at one threshold and score it."""
    from .localizer import detect_scores

    det_cfg = det_cfg or DetectionConfig()
    dets = {u: detect_scores(q, threshold, det_cfg, fps, u) for u, q in dev_scores.items()}
    return intersection_eval(dets, dev_gts, cfg)
