"""Training objectives: MOS regression, pairwise contrastive term, the
Quality-Net style frame penalty, and the two slice-consistency terms.

Functions accept tensors (or plain floats where noted) so the same code runs
in float32 training and float64 gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import FPS, FrameQualityModel, ModelOutput, valid_mask


@dataclass
class LossWeights:
    lambda_emb: float = 0.0
    lambda_scores: float = 0.0
    contrastive_margin: float = 0.1
    y_max: float = 5.0
    # optional Quality-Net baseline term, off in every standard configuration
    lambda_qn: float = 0.0
    # consistency sums run over M-m+1 frames but are divided by M-m+offset
    normalizer_offset: int = 0

    def validate(self) -> None:
        for name in ("lambda_emb", "lambda_scores", "lambda_qn", "contrastive_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def uses_slices(self) -> bool:
        return self.lambda_emb > 0 or self.lambda_scores > 0


@dataclass(frozen=True)
class SliceSpec:
    """Contiguous frame slice, 1-based and inclusive on both ends."""

    m: int
    M: int

    @property
    def n_frames(self) -> int:
        return self.M - self.m + 1

    def frames(self) -> slice:
        return slice(self.m - 1, self.M)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def loss_mos(y_hat, y) -> torch.Tensor:
    return (_t(y_hat) - _t(y)).abs()


def loss_contrastive(y_hat, y, margin: float = 0.1) -> torch.Tensor:
    """Mean hinge over all unordered pairs of |(y_hat_i - y_hat_j) - (y_i - y_j)|."""
    y_hat, y = _t(y_hat), _t(y)
    n = y_hat.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    i, j = torch.triu_indices(n, n, offset=1)
    diff = (y_hat[i] - y_hat[j]) - (y[i] - y[j])
    return torch.relu(diff.abs() - margin).mean()


def qualitynet_penalty(y_hat, q, y_max: float = 5.0) -> torch.Tensor:
    """10**(y_hat - y_max) * sum_t (y_hat - q_t)**2 for one utterance."""
    y_hat, q = _t(y_hat), _t(q)
    return 10.0 ** (y_hat - y_max) * ((y_hat - q) ** 2).sum()


def sample_slice(
    T: int, fps: int = FPS, rng: np.random.Generator | None = None, min_s: float = 0.2, max_s: float = 1.0
) -> SliceSpec:
    """Uniform slice length in [ceil(min_s*fps), min(floor(max_s*fps), T-1)], then uniform start."""
    rng = rng if rng is not None else np.random.default_rng()
    lo = math.ceil(min_s * fps - 1e-9)
    hi = min(math.floor(max_s * fps + 1e-9), T - 1)
    if lo < 2 or hi < lo:
        raise ValueError(f"utterance of {T} frames is too short for a {min_s}s slice")
    length = int(rng.integers(lo, hi + 1))
    m = int(rng.integers(1, T - length + 2))
    return SliceSpec(m, m + length - 1)


def _check_slice(full_len: int, slice_len: int, s: SliceSpec) -> None:
    if not 1 <= s.m < s.M <= full_len:
        raise ValueError(f"invalid slice ({s.m}, {s.M}) for {full_len} frames")
    if slice_len != s.n_frames:
        raise ValueError(f"slice sequence has {slice_len} frames, expected {s.n_frames}")


def loss_emb(h, h_slice, s: SliceSpec, normalizer_offset: int = 0) -> torch.Tensor:
    """(1/(M-m)) * sum over the slice of squared L2 distances between embeddings."""
    h, h_slice = _t(h), _t(h_slice)
    _check_slice(h.shape[0], h_slice.shape[0], s)
    d = h[s.frames()] - h_slice
    return (d**2).sum() / (s.M - s.m + normalizer_offset)


def loss_scores(q, q_slice, s: SliceSpec, normalizer_offset: int = 0) -> torch.Tensor:
    """(1/(M-m)) * sum over the slice of absolute frame-score differences."""
    q, q_slice = _t(q), _t(q_slice)
    _check_slice(q.shape[0], q_slice.shape[0], s)
    return (q[s.frames()] - q_slice).abs().sum() / (s.M - s.m + normalizer_offset)


def slice_branch(model: FrameQualityModel, out: ModelOutput, slices: list[SliceSpec]):
    """Re-encode each utterance's latent slice standalone; returns (q_slice, h_slice, lengths)."""
    lengths = torch.tensor([s.n_frames for s in slices])
    L = int(lengths.max())
    z = out.latents
    rows = []
    for b, s in enumerate(slices):
        zs = z[b, s.frames()]
        rows.append(torch.nn.functional.pad(zs, (0, 0, 0, L - zs.shape[0])))
    q_slice, h_slice = model.from_latents(torch.stack(rows), lengths)
    return q_slice, h_slice, lengths


def total_loss(
    model: FrameQualityModel,
    bands: torch.Tensor,
    lengths: torch.Tensor,
    labels: torch.Tensor,
    weights: LossWeights,
    slices: list[SliceSpec] | None = None,
):
    """Full objective for one padded batch.

    ``L = mean(L_mos) + L_con + lambda_emb*mean(L_emb) + lambda_scores*mean(L_scores)
    (+ lambda_qn*mean(penalty))``.  The slice branch is evaluated only when a
    consistency weight is positive.  Returns ``(total, breakdown)`` where the
    breakdown holds detached floats.
    """
    out = model.forward_bands(bands, lengths)
    y_hat = out.utterance
    l_mos = loss_mos(y_hat, labels).mean()
    if y_hat.shape[0] >= 2:
        l_con = loss_contrastive(y_hat, labels, weights.contrastive_margin)
    else:
        l_con = y_hat.new_zeros(())
    total = l_mos + l_con
    terms = {"l_mos": l_mos, "l_con": l_con}

    if weights.lambda_qn > 0:
        mask = valid_mask(out.lengths, out.scores.shape[1]).to(y_hat.dtype)
        resid = ((y_hat[:, None] - out.scores) ** 2 * mask).sum(dim=1)
        l_qn = (10.0 ** (y_hat - weights.y_max) * resid).mean()
        total = total + weights.lambda_qn * l_qn
        terms["l_qn"] = l_qn

    if weights.uses_slices:
        if slices is None:
            raise ValueError("consistency weights are set but no slices were given")
        q_slice, h_slice, _ = slice_branch(model, out, slices)
        l_emb = torch.stack(
            [
                loss_emb(out.embeddings[b, : out.lengths[b]], h_slice[b, : s.n_frames], s, weights.normalizer_offset)
                for b, s in enumerate(slices)
            ]
        ).mean()
        l_sc = torch.stack(
            [
                loss_scores(out.scores[b, : out.lengths[b]], q_slice[b, : s.n_frames], s, weights.normalizer_offset)
                for b, s in enumerate(slices)
            ]
        ).mean()
        total = total + weights.lambda_emb * l_emb + weights.lambda_scores * l_sc
        terms["l_emb"] = l_emb
        terms["l_scores"] = l_sc
    else:
        terms["l_emb"] = y_hat.new_zeros(())
        terms["l_scores"] = y_hat.new_zeros(())

    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
