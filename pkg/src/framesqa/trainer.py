"""Training loop, learning-rate schedule and checkpoint files."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .losses import LossWeights, sample_slice, total_loss
from .metrics import spearman, system_spearman, volatility
from .model import FPS, FrameQualityModel, ModelConfig
from .signal_io import Utterance, preprocess

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_MAGIC = b"FSQACKPT"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    decoder_variant: str = "recurrent"
    seed: int = 0
    slice_min_s: float = 0.2
    slice_max_s: float = 1.0
    # extra ModelConfig fields, e.g. {"d_model": 32}
    model: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.slice_min_s <= self.slice_max_s:
            raise ValueError("need 0 < slice_min_s <= slice_max_s")
        self.weights.validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**self.model, "decoder": self.decoder_variant})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear decay from lr_start at step 0 to lr_end at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return cfg.lr_end
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * step / total_steps


# --- data ---------------------------------------------------------------------

@torch.no_grad()
def prepare_bands(model: FrameQualityModel, utterances: list[Utterance]) -> list[torch.Tensor]:
    """Preprocess and run the fixed spectral front end once per utterance."""
    dtype = next(model.parameters()).dtype
    out = []
    for utt in utterances:
        x = torch.as_tensor(preprocess(utt.waveform).samples, dtype=dtype)[None]
        out.append(model.features.log_bands(x)[0])
    return out


def collate(bands: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([b.shape[0] for b in bands])
    padded = torch.nn.utils.rnn.pad_sequence(bands, batch_first=True)
    return padded, lengths


@torch.no_grad()
def score_bands(model: FrameQualityModel, bands: list[torch.Tensor], batch_size: int = 32):
    """Frame scores (list of arrays) and utterance scores for pre-computed bands."""
    frames, utts = [], []
    for i in range(0, len(bands), batch_size):
        x, lengths = collate(bands[i : i + batch_size])
        out = model.forward_bands(x, lengths)
        for b, n in enumerate(lengths.tolist()):
            frames.append(out.scores[b, :n].double().numpy())
        utts.extend(out.utterance.double().tolist())
    return frames, np.asarray(utts)


def evaluate_split(model: FrameQualityModel, utterances: list[Utterance], bands=None) -> dict:
    bands = bands if bands is not None else prepare_bands(model, utterances)
    frames, preds = score_bands(model, bands)
    labels = [u.mos for u in utterances]
    systems = [u.system_id for u in utterances]
    res = {"volatility": float(np.mean([volatility(q) for q in frames]))}
    try:
        res["srcc"] = spearman(preds, labels)
    except ValueError:
        res["srcc"] = float("nan")
    try:
        res["system_srcc"] = system_spearman(preds, labels, systems)
    except ValueError:
        res["system_srcc"] = float("nan")
    return res


# --- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FrameQualityModel
    best_state: dict
    best_epoch: int
    history: list[dict]
    steps: int

    def best_model(self) -> FrameQualityModel:
        m = FrameQualityModel(self.model.cfg)
        m.load_state_dict(self.best_state)
        return m


def train(
    train_set: list[Utterance],
    dev_set: list[Utterance],
    cfg: TrainConfig,
    log_fn: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a frame-quality model; deterministic for a given ``cfg.seed``.

    ``log_fn`` receives one dict per optimizer step with the loss breakdown
    and the learning rate used for that step.
    """
    cfg.validate()
    if not train_set or not dev_set:
        raise ValueError("train and dev splits must be non-empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = FrameQualityModel(cfg.model_config())
    train_bands = prepare_bands(model, train_set)
    dev_bands = prepare_bands(model, dev_set)
    labels = torch.tensor([u.mos for u in train_set], dtype=torch.float32)

    n_batches = -(-len(train_set) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)

    history: list[dict] = []
    best_srcc, best_epoch, best_state = -np.inf, 0, copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, lengths = collate([train_bands[i] for i in idx])
            slices = None
            if cfg.weights.uses_slices:
                slices = [
                    sample_slice(int(n), FPS, rng, cfg.slice_min_s, cfg.slice_max_s) for n in lengths.tolist()
                ]
            lr = lr_at(step, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            loss, parts = total_loss(model, x, lengths, labels[idx], cfg.weights, slices)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch}): {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            if log_fn is not None:
                log_fn({"step": step, **{k: parts[k] for k in ("l_mos", "l_con", "l_emb", "l_scores", "total")}, "lr": lr})

        model.eval()
        dev = evaluate_split(model, dev_set, dev_bands)
        record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        record.update({f"dev_{k}": v for k, v in dev.items()})
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if dev["srcc"] > best_srcc:
            best_srcc, best_epoch = dev["srcc"], epoch
            best_state = copy.deepcopy(model.state_dict())
    return TrainResult(model, best_state, best_epoch, history, step)


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: FrameQualityModel, step: int = 0, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint: magic, JSON header, raw tensor bytes."""
    blobs, entries, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    data = b"".join(blobs)
    header = {
        "version": CHECKPOINT_VERSION,
        "format": "framesqa-checkpoint",
        "architecture": model.cfg.to_dict(),
        "step": step,
        "extra": extra or {},
        "tensors": entries,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + data)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != _MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"incompatible checkpoint version {header.get('version')!r}")
    data = raw[16 + hlen :]
    if hashlib.sha256(data).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: corrupted tensor data")
    return header, data


def load_checkpoint(path) -> FrameQualityModel:
    header, data = read_checkpoint(path)
    model = FrameQualityModel(ModelConfig.from_dict(header["architecture"]))
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(data[e["offset"] : e["offset"] + n], dtype=dt).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    if state:
        model.to(next(iter(state.values())).dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not match architecture") from exc
    model.eval()
    return model
