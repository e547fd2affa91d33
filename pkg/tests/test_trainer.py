import math

import numpy as np
import pytest
import torch

from framesqa import losses as losses_mod
from framesqa.losses import LossWeights
from framesqa.model import FrameQualityModel, ModelConfig
from framesqa.trainer import (
    CHECKPOINT_VERSION,
    CheckpointError,
    TrainConfig,
    collate,
    load_checkpoint,
    lr_at,
    prepare_bands,
    read_checkpoint,
    save_checkpoint,
    score_bands,
    train,
)

SMALL = {"n_bands": 16, "d_model": 16, "n_heads": 2, "d_ff": 32, "pos_kernel": 5, "rnn_hidden": 12}


def small_cfg(**kw):
    base = dict(epochs=1, lr_start=1e-3, lr_end=1e-5, batch_size=4, model=SMALL, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig()
        assert lr_at(0, 100, cfg) == pytest.approx(1e-4, rel=1e-12)
        assert lr_at(100, 100, cfg) == pytest.approx(1e-6, rel=1e-12)
        assert lr_at(50, 100, cfg) == pytest.approx(5.05e-5, rel=1e-12)

    def test_monotone(self):
        cfg = TrainConfig()
        lrs = [lr_at(s, 37, cfg) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(11, 10, TrainConfig())
        with pytest.raises(ValueError):
            lr_at(0, 0, TrainConfig())


class TestConfig:
    def test_roundtrip(self):
        cfg = small_cfg(weights=LossWeights(lambda_emb=1.0, lambda_scores=0.5))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"epochs": 1, "learning_rate": 3})

    @pytest.mark.parametrize(
        "kw", [{"epochs": 0}, {"lr_start": 1e-6, "lr_end": 1e-4}, {"batch_size": 0}, {"slice_min_s": 2.0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_cfg(**kw).validate()

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            small_cfg(weights=LossWeights(lambda_emb=-1.0)).validate()


class TestTraining:
    def test_one_epoch_history_and_finite(self, small_corpus):
        logs = []
        res = train(small_corpus[:8], small_corpus[8:], small_cfg(), log_fn=logs.append)
        assert len(res.history) == 1
        assert res.steps == 2 and len(logs) == 2
        for rec in logs:
            for k in ("l_mos", "l_con", "l_emb", "l_scores", "total", "lr"):
                assert math.isfinite(rec[k])
        assert logs[0]["lr"] == pytest.approx(1e-3)
        assert logs[1]["lr"] < logs[0]["lr"]

    def test_deterministic(self, small_corpus):
        cfg = small_cfg(weights=LossWeights(lambda_emb=1.0, lambda_scores=1.0))
        a = train(small_corpus[:8], small_corpus[8:], cfg)
        b = train(small_corpus[:8], small_corpus[8:], cfg)
        for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)
        assert a.history == b.history

    def test_seed_changes_result(self, small_corpus):
        a = train(small_corpus[:8], small_corpus[8:], small_cfg(seed=0))
        b = train(small_corpus[:8], small_corpus[8:], small_cfg(seed=1))
        pa = torch.cat([p.flatten() for p in a.model.parameters()])
        pb = torch.cat([p.flatten() for p in b.model.parameters()])
        assert not torch.equal(pa, pb)

    def test_no_slice_branch_without_consistency(self, small_corpus, monkeypatch):
        calls = []
        orig = losses_mod.slice_branch

        def counting(*a, **k):
            calls.append(1)
            return orig(*a, **k)

        monkeypatch.setattr(losses_mod, "slice_branch", counting)
        train(small_corpus[:8], small_corpus[8:], small_cfg())
        assert calls == []
        train(small_corpus[:8], small_corpus[8:], small_cfg(weights=LossWeights(lambda_emb=1.0)))
        assert len(calls) == 2

    def test_linear_decoder_and_batch_of_one(self, small_corpus):
        res = train(small_corpus[:3], small_corpus[8:], small_cfg(decoder_variant="linear", batch_size=1))
        assert res.steps == 3
        assert all(math.isfinite(v) for v in res.history[0].values())

    def test_empty_split(self, small_corpus):
        with pytest.raises(ValueError):
            train([], small_corpus, small_cfg())


class TestBatchedScoring:
    def test_padding_does_not_change_scores(self, small_corpus):
        model = FrameQualityModel(ModelConfig(**SMALL)).eval()
        bands = prepare_bands(model, small_corpus[:5])
        frames, utt = score_bands(model, bands, batch_size=5)
        for i, b in enumerate(bands):
            alone, u1 = score_bands(model, [b], batch_size=1)
            np.testing.assert_allclose(frames[i], alone[0], atol=1e-5)
            np.testing.assert_allclose(utt[i], u1[0], atol=1e-5)
            assert len(frames[i]) == b.shape[0]

    def test_collate_lengths(self, small_corpus):
        model = FrameQualityModel(ModelConfig(**SMALL))
        bands = prepare_bands(model, small_corpus[:3])
        x, lengths = collate(bands)
        assert x.shape[0] == 3 and x.shape[1] == max(b.shape[0] for b in bands)
        assert lengths.tolist() == [b.shape[0] for b in bands]


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = FrameQualityModel(ModelConfig(**SMALL))
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, model, step=17, extra={"note": "x"})
        back = load_checkpoint(p)
        assert back.cfg == model.cfg
        for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
            assert k == k2 and v.dtype == v2.dtype and torch.equal(v, v2)
        header, _ = read_checkpoint(p)
        assert header["step"] == 17 and header["extra"] == {"note": "x"}

    def test_deterministic_bytes(self, tmp_path):
        model = FrameQualityModel(ModelConfig(**SMALL))
        save_checkpoint(tmp_path / "a", model)
        save_checkpoint(tmp_path / "b", model)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_float64_roundtrip(self, tmp_path):
        model = FrameQualityModel(ModelConfig(**SMALL)).double()
        save_checkpoint(tmp_path / "d", model)
        back = load_checkpoint(tmp_path / "d")
        assert next(back.parameters()).dtype == torch.float64

    def test_corrupted_data(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, FrameQualityModel(ModelConfig(**SMALL)))
        raw = bytearray(p.read_bytes())
        raw[-3] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="corrupted"):
            load_checkpoint(p)

    def test_truncated_and_garbage(self, tmp_path):
        p = tmp_path / "g.ckpt"
        p.write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.ckpt")

    def test_old_version_rejected(self, tmp_path):
        import json
        import struct

        p = tmp_path / "m.ckpt"
        save_checkpoint(p, FrameQualityModel(ModelConfig(**SMALL)))
        raw = p.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
        header["version"] = CHECKPOINT_VERSION - 1
        hb = json.dumps(header).encode()
        p.write_bytes(raw[:8] + struct.pack("<Q", len(hb)) + hb + raw[16 + hlen :])
        with pytest.raises(CheckpointError, match="incompatible checkpoint"):
            load_checkpoint(p)
