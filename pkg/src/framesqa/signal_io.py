"""Waveform I/O, preprocessing and the synthetic degradation corpus.

The corpus stands in for real MOS-annotated data: clean harmonic "speech" is
synthesized per utterance, localized degradations are injected, and the MOS
label is a deterministic function of the injected degradations so that the
ground-truth segments double as localization targets.
"""

from __future__ import annotations

import csv
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventList

DEGRADATION_TYPES = ("burst_noise", "clipping", "dropout", "hum")
SEVERITY_LEVELS = ("low", "mid", "high")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be 1-D (mono)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass
class Utterance:
    utt_id: str
    waveform: Waveform
    mos: float
    system_id: str
    events: EventList
    # (type, severity) for each entry of ``events``
    degradations: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not 1.0 <= self.mos <= 5.0:
            raise ValueError(f"{self.utt_id}: mos {self.mos} outside [1, 5]")
        self.events.validate(self.waveform.duration)


@dataclass
class CorpusConfig:
    n_utterances: int = 100
    duration_range: tuple[float, float] = (3.0, 5.0)
    degradation_types: tuple[str, ...] = DEGRADATION_TYPES
    severity_range: tuple[float, float] = (0.3, 1.0)
    events_per_utt_range: tuple[int, int] = (0, 3)
    event_duration_range: tuple[float, float] = (0.2, 0.8)
    sample_rate: int = 16000
    seed: int = 0

    def validate(self) -> None:
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        for name in ("duration_range", "severity_range", "events_per_utt_range", "event_duration_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.duration_range[0] <= 0:
            raise ValueError("durations must be positive")
        if not 0.0 <= self.severity_range[0] <= self.severity_range[1] <= 1.0:
            raise ValueError("severity_range must lie in [0, 1]")
        if self.events_per_utt_range[0] < 0:
            raise ValueError("events_per_utt_range must be non-negative")
        if self.event_duration_range[0] <= 0 or self.event_duration_range[1] > self.duration_range[0]:
            raise ValueError("event durations must be positive and fit the shortest utterance")
        unknown = set(self.degradation_types) - set(DEGRADATION_TYPES)
        if unknown or not self.degradation_types:
            raise ValueError(f"unknown or empty degradation types: {sorted(unknown)}")


# --- WAV I/O ----------------------------------------------------------------

def load_waveform(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise ValueError(f"{path}: non-mono WAV ({wf.getnchannels()} channels)")
            if wf.getsampwidth() != 2 or wf.getcomptype() != "NONE":
                raise ValueError(f"{path}: unsupported encoding, need 16-bit PCM")
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: unsupported encoding ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, sr)


def save_waveform(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# --- preprocessing ----------------------------------------------------------

def rms_dbfs(w: Waveform) -> float:
    return 20.0 * np.log10(np.sqrt(np.mean(w.samples**2)))


def loudness_equalize(w: Waveform, target_dbfs: float = -18.0) -> Waveform:
    """Scale ``w`` so that its RMS level equals ``target_dbfs``."""
    rms = np.sqrt(np.mean(w.samples**2))
    if rms == 0.0:
        raise ValueError("silent input")
    return Waveform(w.samples * (10.0 ** (target_dbfs / 20.0) / rms), w.sample_rate)


def mean_std_normalize(w: Waveform) -> Waveform:
    """Zero mean, unit population standard deviation."""
    centered = w.samples - w.samples.mean()
    std = np.sqrt(np.mean(centered**2))
    if std == 0.0:
        raise ValueError("zero variance")
    return Waveform(centered / std, w.sample_rate)


def preprocess(w: Waveform, target_dbfs: float = -18.0) -> Waveform:
    return mean_std_normalize(loudness_equalize(w, target_dbfs))


# --- synthetic corpus -------------------------------------------------------

def mos_from_degradations(events, severities, duration: float) -> float:
    """Severity-weighted degraded fraction mapped onto the 1..5 scale."""
    load = sum(s * (b - a) for (a, b), s in zip(events, severities))
    return float(np.clip(5.0 - 4.0 * load / duration, 1.0, 5.0))


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    """Moving average along the last axis (crossfades piecewise-constant controls)."""
    if width <= 1:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(width // 2, width - 1 - width // 2)]
    c = np.cumsum(np.pad(x, pad, mode="edge"), axis=-1)
    c = np.concatenate([np.zeros(c.shape[:-1] + (1,)), c], axis=-1)
    return (c[..., width:] - c[..., :-width]) / width


def _synth_speech(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Phone-like segments: voiced formant patterns, fricatives, stop closures
    with bursts and short pauses, over a low-level background noise."""
    kinds, lengths = [], []
    total, since_pause = 0, 0.0
    while total < n:
        if since_pause > rng.uniform(0.6, 1.4):
            kind, dur, since_pause = "pause", rng.uniform(0.06, 0.18), 0.0
        else:
            r = rng.random()
            kind = "voiced" if r < 0.7 else "fricative" if r < 0.88 else "stop"
            dur = {"voiced": rng.uniform(0.06, 0.16), "fricative": rng.uniform(0.05, 0.12)}.get(
                kind, rng.uniform(0.03, 0.06)
            )
            since_pause += dur
        length = max(1, int(dur * sr))
        kinds.append(kind)
        lengths.append(length)
        total += length
    idx = np.repeat(np.arange(len(kinds)), lengths)[:n]

    t = np.arange(n) / sr
    f0_base = rng.uniform(90.0, 220.0)
    f0 = f0_base * (1.0 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= np.linspace(1.05, 0.92, n)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    n_harm = int(3800.0 // (f0_base * 1.15))
    k = np.arange(1, n_harm + 1)
    amps = np.zeros((n_harm, len(kinds)))
    gains = rng.uniform(0.5, 1.0, len(kinds))
    for p, kind in enumerate(kinds):
        if kind == "voiced":
            formants = np.sort(rng.uniform([250, 800, 1800], [850, 2000, 3200]))
            env = sum(np.exp(-0.5 * ((k * f0_base - fc) / (80 + 0.06 * fc)) ** 2) for fc in formants) + 0.03
            amps[:, p] = gains[p] * env / k**0.6
    fade = int(0.01 * sr)
    harm_amp = _smooth(amps[:, idx], fade)
    voiced = np.zeros(n)
    for j in range(n_harm):
        voiced += harm_amp[j] * np.sin((j + 1) * phase + rng.uniform(0, 2 * np.pi))
    voiced /= np.sqrt(np.mean(voiced**2)) + 1e-12

    kind_arr = np.array(kinds)[idx]
    white = rng.standard_normal(n + 2)
    hiss = white[2:] - 1.6 * white[1:-1] + 0.8 * white[:-2]
    fric_gate = _smooth(np.where(kind_arr == "fricative", gains[idx], 0.0), fade)
    burst_gate = np.zeros(n)
    starts = np.concatenate([[0], np.cumsum(lengths)])[:-1]
    for p, kind in enumerate(kinds):
        if kind == "stop":
            b = min(starts[p] + lengths[p], n)
            burst_gate[max(b - int(0.012 * sr), 0) : b] = 1.5
    background = _smooth(rng.standard_normal(n), 8) * 10 ** (-38 / 20) * 2.0
    x = voiced + 0.35 * fric_gate * hiss + 0.5 * burst_gate * white[:n] + background
    return x


def _apply_degradation(x, seg, kind, severity, rng, sr, ref_rms):
    n = seg.stop - seg.start
    ramp = min(int(0.005 * sr), n // 2)
    fade = np.ones(n)
    if ramp > 0:
        fade[:ramp] = np.linspace(0, 1, ramp)
        fade[-ramp:] = np.linspace(1, 0, ramp)
    part = x[seg]
    if kind == "burst_noise":
        gain = ref_rms * 10 ** ((-20.0 + 26.0 * severity) / 20)
        x[seg] = part + fade * gain * rng.standard_normal(n)
    elif kind == "clipping":
        ceiling = np.max(np.abs(x)) * (1.0 - 0.9 * severity)
        x[seg] = np.clip(part, -ceiling, ceiling) * (1.0 + 6.0 * severity)
    elif kind == "dropout":
        gain = 10 ** (-40.0 * severity / 20)
        x[seg] = part * (1.0 - fade * (1.0 - gain))
    elif kind == "hum":
        t = np.arange(seg.start, seg.stop) / sr
        hum = sum(np.sin(2 * np.pi * 50.0 * h * t) / h for h in range(1, 5))
        gain = ref_rms * 10 ** ((-20.0 + 26.0 * severity) / 20)
        x[seg] = part + fade * gain * hum
    else:
        raise ValueError(f"unknown degradation {kind!r}")


def generate_utterance(cfg: CorpusConfig, index: int) -> Utterance:
    """Generate utterance ``index`` from its own seeded stream (seed + index)."""
    rng = np.random.default_rng(cfg.seed + index)
    sr = cfg.sample_rate
    duration = rng.uniform(*cfg.duration_range)
    n = int(round(duration * sr))
    duration = n / sr
    x = _synth_speech(rng, n, sr)
    ref_rms = np.sqrt(np.mean(x**2))

    n_events = int(rng.integers(cfg.events_per_utt_range[0], cfg.events_per_utt_range[1] + 1))
    kind = str(rng.choice(list(cfg.degradation_types)))
    level = int(rng.integers(len(SEVERITY_LEVELS)))
    s_lo, s_hi = cfg.severity_range
    width = (s_hi - s_lo) / len(SEVERITY_LEVELS)

    raw = []
    for _ in range(n_events):
        dur = rng.uniform(*cfg.event_duration_range)
        onset = rng.uniform(0.0, duration - dur)
        sev = rng.uniform(s_lo + level * width, s_lo + (level + 1) * width)
        # snap to samples so WAV and labels agree exactly
        a, b = int(round(onset * sr)), int(round((onset + dur) * sr))
        raw.append((a, b, sev))

    merged: list[list] = []
    for a, b, sev in sorted(raw):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
            merged[-1][2] = max(merged[-1][2], sev)
        else:
            merged.append([a, b, sev])

    for a, b, sev in merged:
        _apply_degradation(x, slice(a, b), kind, sev, rng, sr, ref_rms)

    peak = np.max(np.abs(x))
    x *= 0.9 / peak

    events = [(a / sr, b / sr) for a, b, _ in merged]
    severities = [sev for _, _, sev in merged]
    system_id = f"{kind}_{SEVERITY_LEVELS[level]}" if merged else "clean"
    return Utterance(
        utt_id=f"utt{index:05d}",
        waveform=Waveform(x, sr),
        mos=mos_from_degradations(events, severities, duration),
        system_id=system_id,
        events=EventList(f"utt{index:05d}", events),
        degradations=[(kind, sev) for sev in severities],
    )


def generate_corpus(cfg: CorpusConfig) -> list[Utterance]:
    cfg.validate()
    return [generate_utterance(cfg, i) for i in range(cfg.n_utterances)]


# --- corpus on disk ---------------------------------------------------------

def _atomic_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def write_split(out_dir, split: str, utterances: list[Utterance]) -> dict[str, Path]:
    """Write WAVs plus ``<split>.csv`` manifest and ``<split>_events.csv``."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / split
    wav_dir.mkdir(parents=True, exist_ok=True)
    manifest_rows, event_rows = [], []
    for utt in utterances:
        rel = Path(split) / f"{utt.utt_id}.wav"
        save_waveform(out_dir / rel, utt.waveform)
        manifest_rows.append([rel.as_posix(), repr(utt.mos), utt.system_id])
        for (onset, offset), (kind, sev) in zip(utt.events, utt.degradations):
            event_rows.append([utt.utt_id, repr(onset), repr(offset), kind, repr(sev)])
    manifest = out_dir / f"{split}.csv"
    events = out_dir / f"{split}_events.csv"
    _atomic_csv(manifest, ["path", "mos", "system_id"], manifest_rows)
    _atomic_csv(events, ["utt_id", "onset_s", "offset_s", "type", "severity"], event_rows)
    return {"manifest": manifest, "events": events}


def read_split(corpus_dir, split: str) -> list[Utterance]:
    """Load a split written by :func:`write_split`."""
    corpus_dir = Path(corpus_dir)
    per_utt: dict[str, list] = {}
    events_path = corpus_dir / f"{split}_events.csv"
    if events_path.exists():
        with open(events_path, newline="") as f:
            for row in csv.DictReader(f):
                per_utt.setdefault(row["utt_id"], []).append(
                    (float(row["onset_s"]), float(row["offset_s"]), row["type"], float(row["severity"]))
                )
    utterances = []
    with open(corpus_dir / f"{split}.csv", newline="") as f:
        for row in csv.DictReader(f):
            path = corpus_dir / row["path"]
            utt_id = path.stem
            evs = sorted(per_utt.get(utt_id, []))
            utterances.append(
                Utterance(
                    utt_id=utt_id,
                    waveform=load_waveform(path),
                    mos=float(row["mos"]),
                    system_id=row["system_id"],
                    events=EventList(utt_id, [(a, b) for a, b, _, _ in evs]),
                    degradations=[(k, s) for _, _, k, s in evs],
                )
            )
    return utterances
