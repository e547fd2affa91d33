"""Toy encoder/decoder quality model with frame-level outputs.

Layout: a frame-local feature extractor (fixed 25 ms log-band analysis at a
20 ms hop followed by a trainable per-frame projection), a small transformer
encoder with convolutional relative positions, and a per-frame decoder whose
outputs are squashed into the MOS range (1, 5).  Padded batches carry a
``lengths`` tensor with the number of valid frames per row.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .signal_io import Waveform

HOP = 320
FPS = 50


@dataclass
class ModelConfig:
    decoder: str = "recurrent"  # "linear" or "recurrent"
    sample_rate: int = 16000
    hop: int = HOP
    win: int = 400
    n_bands: int = 40
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    pos_kernel: int = 15
    rnn_hidden: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _mel_filterbank(n_freq: int, n_bands: int, sample_rate: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    freqs = np.linspace(0, sample_rate / 2, n_freq)
    edges = mel_to_hz(np.linspace(hz_to_mel(20.0), hz_to_mel(sample_rate / 2), n_bands + 2))
    fb = np.zeros((n_freq, n_bands))
    for b in range(n_bands):
        lo, mid, hi = edges[b : b + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[:, b] = np.maximum(0.0, np.minimum(up, down))
    # bands narrower than one bin would otherwise be empty
    empty = fb.sum(axis=0) == 0
    fb[np.argmin(np.abs(freqs[:, None] - edges[1:-1][None, :]), axis=0)[empty], np.where(empty)[0]] = 1.0
    return fb


def frame_lengths(n_samples, hop: int = HOP):
    """Number of frames for ``n_samples`` samples: floor(N / hop)."""
    return n_samples // hop


def valid_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T, device=lengths.device)[None, :] < lengths[:, None]


class FeatureExtractor(nn.Module):
    """Frame-local latents; frame t sees samples [t*hop, t*hop + win)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.hop, self.win = cfg.hop, cfg.win
        n_freq = cfg.win // 2 + 1
        n = np.arange(cfg.win)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win)
        k = np.arange(n_freq)
        arg = 2 * np.pi * np.outer(n, k) / cfg.win
        self.register_buffer("cos_basis", torch.tensor(window[:, None] * np.cos(arg), dtype=torch.float32))
        self.register_buffer("sin_basis", torch.tensor(window[:, None] * np.sin(arg), dtype=torch.float32))
        self.register_buffer(
            "filterbank", torch.tensor(_mel_filterbank(n_freq, cfg.n_bands, cfg.sample_rate), dtype=torch.float32)
        )
        self.proj = nn.Sequential(
            nn.Linear(cfg.n_bands, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, cfg.d_model)
        )

    def log_bands(self, samples: torch.Tensor) -> torch.Tensor:
        """(B, N) samples -> (B, floor(N/hop), n_bands) log band energies."""
        T = samples.shape[-1] // self.hop
        if T < 1:
            raise ValueError(f"input of {samples.shape[-1]} samples is shorter than one frame ({self.hop})")
        padded = F.pad(samples, (0, self.win - self.hop))
        frames = padded.unfold(-1, self.win, self.hop)[:, :T]
        power = (frames @ self.cos_basis) ** 2 + (frames @ self.sin_basis) ** 2
        return 0.25 * torch.log(power @ self.filterbank + 1e-4)

    def project(self, bands: torch.Tensor) -> torch.Tensor:
        return self.proj(bands)

    def forward(self, samples: torch.Tensor) -> torch.Tensor:
        return self.project(self.log_bands(samples))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        hd = D // self.n_heads
        q, k, v = self.qkv(self.norm1(x)).view(B, T, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None, None, :])
        y = y.transpose(1, 2).reshape(B, T, D)
        x = x + self.out(y)
        return x + self.ff(self.norm2(x))


class Encoder(nn.Module):
    """Transformer over latents; positions enter only through a depthwise conv."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.pos_conv = nn.Conv1d(d, d, cfg.pos_kernel, padding=cfg.pos_kernel // 2, groups=d)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, z: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = valid_mask(lengths, z.shape[1])
        m = mask[..., None].to(z.dtype)
        z = z * m
        x = z + F.gelu(self.pos_conv(z.transpose(1, 2)).transpose(1, 2))
        x = x * m
        for layer in self.layers:
            x = layer(x, mask) * m
        return self.norm(x) * m


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.decoder not in ("linear", "recurrent"):
            raise ValueError(f"unknown decoder variant {cfg.decoder!r}")
        self.variant = cfg.decoder
        self.width = cfg.d_model
        if self.variant == "recurrent":
            self.rnn_fwd = nn.LSTM(cfg.d_model, cfg.rnn_hidden, batch_first=True)
            self.rnn_bwd = nn.LSTM(cfg.d_model, cfg.rnn_hidden, batch_first=True)
            self.head = nn.Linear(2 * cfg.rnn_hidden, 1)
        else:
            self.head = nn.Linear(cfg.d_model, 1)

    def raw(self, h: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.width:
            raise ValueError("embedding width does not match decoder")
        if self.variant == "recurrent":
            # right padding never reaches valid frames of the forward pass; the
            # backward pass runs forward over each row reversed within its length
            rev = _reverse_index(lengths, h.shape[1])
            fwd, _ = self.rnn_fwd(h)
            bwd, _ = self.rnn_bwd(_gather_time(h, rev))
            h = torch.cat([fwd, _gather_time(bwd, rev)], dim=-1)
        return self.head(h).squeeze(-1)

    def forward(self, h: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return squash(self.raw(h, lengths))


def _reverse_index(lengths: torch.Tensor, T: int) -> torch.Tensor:
    t = torch.arange(T)[None, :]
    n = lengths[:, None]
    return torch.where(t < n, n - 1 - t, t)


def _gather_time(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return x.gather(1, index[..., None].expand(-1, -1, x.shape[-1]))


def squash(raw: torch.Tensor) -> torch.Tensor:
    """Map raw decoder outputs onto (1, 5)."""
    return 1.0 + 4.0 * torch.sigmoid(raw)


def l2_normalize_embeddings(h: torch.Tensor, lengths: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Divide every frame by the L2 norm of the time-pooled embedding."""
    mask = valid_mask(lengths, h.shape[1])[..., None].to(h.dtype)
    pooled = (h * mask).sum(dim=1) / lengths[:, None].to(h.dtype)
    norm = pooled.norm(dim=-1)
    if torch.any(norm <= eps):
        raise ValueError("pooled embedding norm is (near) zero")
    return h / norm[:, None, None]


def time_pool(q: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    if torch.any(lengths < 1):
        raise ValueError("cannot pool an empty score sequence")
    mask = valid_mask(lengths, q.shape[1]).to(q.dtype)
    return (q * mask).sum(dim=1) / lengths.to(q.dtype)


@dataclass
class ModelOutput:
    scores: torch.Tensor  # (B, T) frame scores
    utterance: torch.Tensor  # (B,) pooled prediction
    embeddings: torch.Tensor  # (B, T, D) normalized encoder output
    latents: torch.Tensor  # (B, T, D) feature-extractor output
    lengths: torch.Tensor  # (B,) valid frames


class FrameQualityModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.features = FeatureExtractor(self.cfg)
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    def from_latents(self, z: torch.Tensor, lengths: torch.Tensor):
        """Encode, normalize and decode latents; returns (scores, embeddings)."""
        h = l2_normalize_embeddings(self.encoder(z, lengths), lengths)
        return self.decoder(h, lengths), h

    def forward_bands(self, bands: torch.Tensor, lengths: torch.Tensor) -> ModelOutput:
        z = self.features.project(bands)
        q, h = self.from_latents(z, lengths)
        return ModelOutput(q, time_pool(q, lengths), h, z, lengths)

    def forward(self, samples: torch.Tensor, n_samples: torch.Tensor | None = None) -> ModelOutput:
        if n_samples is None:
            n_samples = torch.full((samples.shape[0],), samples.shape[-1], dtype=torch.long)
        lengths = frame_lengths(n_samples, self.cfg.hop)
        if torch.any(lengths < 1):
            raise ValueError("input shorter than one frame")
        return self.forward_bands(self.features.log_bands(samples), lengths)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# --- single-utterance convenience API ---------------------------------------

def _as_batch(model: nn.Module, w: Waveform) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(w.samples, dtype=dtype)[None, :]


@torch.no_grad()
def extract_features(model: FrameQualityModel, w: Waveform) -> np.ndarray:
    """Latent sequence z of shape (floor(N/320), d_model)."""
    return model.features(_as_batch(model, w))[0].numpy()


@torch.no_grad()
def encode(model: FrameQualityModel, z) -> np.ndarray:
    """Run the transformer on a latent sequence (T, D) on its own."""
    zt = torch.as_tensor(np.asarray(z), dtype=next(model.parameters()).dtype)[None]
    if zt.shape[1] < 1:
        raise ValueError("need at least one frame")
    return model.encoder(zt, torch.tensor([zt.shape[1]]))[0].numpy()


@torch.no_grad()
def decode_frames(model: FrameQualityModel, h) -> np.ndarray:
    ht = torch.as_tensor(np.asarray(h), dtype=next(model.parameters()).dtype)[None]
    return model.decoder(ht, torch.tensor([ht.shape[1]]))[0].numpy()


@torch.no_grad()
def forward(model: FrameQualityModel, w: Waveform):
    """Return (frame scores, utterance score, normalized embeddings) for one waveform."""
    out = model(_as_batch(model, w))
    return out.scores[0].numpy(), float(out.utterance[0]), out.embeddings[0].numpy()


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple[int, float, float]  # (flat index, analytic, numeric)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def gradient_check(
    params,
    loss_closure,
    tolerance: float = 1e-4,
    n_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-8,
    points: int = 2,
) -> GradCheckReport:
    """Compare autograd gradients with central differences on sampled coordinates.

    ``points`` selects the 2-point or 4-point central stencil; the latter has
    O(step^4) truncation error, so a larger step keeps rounding noise low.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``loss_closure`` must be a deterministic function of ``params``.
    """
    if points not in (2, 4):
        raise ValueError("points must be 2 or 4")
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_closure()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite")
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).detach().double()
    offsets = np.cumsum([0] + [p.numel() for p in params])
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_coords, total), replace=False)

    worst = (-1, 0.0, 0.0)
    max_err = 0.0
    with torch.no_grad():
        for idx in picks:
            which = int(np.searchsorted(offsets, idx, side="right") - 1)
            flat = params[which].view(-1)
            local = int(idx - offsets[which])
            orig = flat[local].item()

            def at(offset):
                flat[local] = orig + offset
                value = loss_closure().item()
                if not np.isfinite(value):
                    raise ValueError("loss is not finite under perturbation")
                return value

            if points == 2:
                numeric = (at(step) - at(-step)) / (2 * step)
            else:
                numeric = (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12 * step)
            flat[local] = orig
            a = analytic[idx].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > max_err:
                max_err, worst = err, (int(idx), a, numeric)
    return GradCheckReport(max_err, len(picks), worst)
