import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from framesqa.signal_io import (
    CorpusConfig,
    Waveform,
    generate_corpus,
    generate_utterance,
    load_waveform,
    loudness_equalize,
    mean_std_normalize,
    mos_from_degradations,
    read_split,
    rms_dbfs,
    save_waveform,
    write_split,
)


def _write_pcm(path, pcm, channels=1, width=2, sr=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(sr)
        wf.writeframes(np.asarray(pcm).tobytes())


class TestLoadWaveform:
    def test_one_second(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", np.zeros(16000, dtype="<i2"))
        w = load_waveform(tmp_path / "a.wav")
        assert len(w) == 16000
        assert w.sample_rate == 16000

    def test_int16_scaling(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", np.array([16384, -32768, 0], dtype="<i2"))
        w = load_waveform(tmp_path / "a.wav")
        np.testing.assert_allclose(w.samples, [0.5, -1.0, 0.0], atol=1e-4)

    def test_stereo_rejected(self, tmp_path):
        _write_pcm(tmp_path / "s.wav", np.zeros(200, dtype="<i2"), channels=2)
        with pytest.raises(ValueError, match="non-mono"):
            load_waveform(tmp_path / "s.wav")

    def test_8bit_rejected(self, tmp_path):
        _write_pcm(tmp_path / "u8.wav", np.zeros(100, dtype=np.uint8), width=1)
        with pytest.raises(ValueError, match="unsupported encoding"):
            load_waveform(tmp_path / "u8.wav")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_waveform(tmp_path / "nope.wav")

    def test_round_trip(self, tmp_path, rng):
        x = np.round(rng.uniform(-0.9, 0.9, 500) * 32768) / 32768
        save_waveform(tmp_path / "r.wav", Waveform(x, 8000))
        w = load_waveform(tmp_path / "r.wav")
        assert w.sample_rate == 8000
        np.testing.assert_array_equal(w.samples, x)


class TestLoudness:
    def test_sine_gain(self):
        # 100 full periods: RMS is exactly peak / sqrt(2)
        t = np.arange(16000) / 16000
        w = Waveform(np.sin(2 * np.pi * 100 * t))
        out = loudness_equalize(w)
        expected_peak = 10 ** (-18 / 20) * np.sqrt(2)
        assert np.max(np.abs(out.samples)) == pytest.approx(expected_peak, rel=1e-6)
        assert expected_peak == pytest.approx(0.1780, abs=1e-3)

    def test_target_reached(self, rng):
        out = loudness_equalize(Waveform(rng.standard_normal(4000) * 0.01), -18)
        assert np.sqrt(np.mean(out.samples**2)) == pytest.approx(10 ** (-18 / 20), abs=1e-6)
        assert rms_dbfs(out) == pytest.approx(-18.0, abs=1e-6)

    def test_identity_at_target(self, rng):
        x = rng.standard_normal(1000)
        x *= 10 ** (-18 / 20) / np.sqrt(np.mean(x**2))
        np.testing.assert_allclose(loudness_equalize(Waveform(x)).samples, x, atol=1e-6)

    def test_silent(self):
        with pytest.raises(ValueError, match="silent"):
            loudness_equalize(Waveform(np.zeros(100)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 200), elements=st.floats(-1, 1)))
    def test_idempotent(self, x):
        if np.sqrt(np.mean(x**2)) < 1e-6:
            return
        once = loudness_equalize(Waveform(x))
        twice = loudness_equalize(once)
        np.testing.assert_allclose(twice.samples, once.samples, atol=1e-6)


class TestMeanStd:
    def test_two_samples(self):
        np.testing.assert_allclose(mean_std_normalize(Waveform([0.0, 2.0])).samples, [-1.0, 1.0])

    def test_constant(self):
        with pytest.raises(ValueError, match="zero variance"):
            mean_std_normalize(Waveform(np.full(10, 0.5)))

    def test_moments(self, rng):
        out = mean_std_normalize(Waveform(rng.uniform(-0.3, 0.7, 999)))
        assert abs(out.samples.mean()) < 1e-6
        assert abs(out.samples.std() - 1.0) < 1e-6

    def test_standard_noise_nearly_unchanged(self, rng):
        x = rng.standard_normal(2000)
        x = (x - x.mean()) / x.std()
        np.testing.assert_allclose(mean_std_normalize(Waveform(x)).samples, x, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 200), elements=st.floats(-1, 1)))
    def test_idempotent(self, x):
        if np.std(x) < 1e-3:
            return
        once = mean_std_normalize(Waveform(x))
        np.testing.assert_allclose(mean_std_normalize(once).samples, once.samples, atol=1e-6)


class TestCorpus:
    def test_mos_formula(self):
        assert mos_from_degradations([(1.0, 2.0)], [0.8], 4.0) == pytest.approx(4.2)
        assert mos_from_degradations([], [], 3.0) == 5.0
        assert mos_from_degradations([(0.0, 3.0)], [1.0], 3.0) == 1.0

    def test_clean_utterance_has_top_mos(self):
        cfg = CorpusConfig(n_utterances=5, events_per_utt_range=(0, 0), seed=3)
        for utt in generate_corpus(cfg):
            assert utt.mos == 5.0
            assert len(utt.events) == 0
            assert utt.system_id == "clean"

    def test_full_coverage_saturates(self):
        cfg = CorpusConfig(
            n_utterances=1,
            duration_range=(1.0, 1.0),
            event_duration_range=(1.0, 1.0),
            events_per_utt_range=(1, 1),
            severity_range=(1.0, 1.0),
            seed=0,
        )
        utt = generate_corpus(cfg)[0]
        assert utt.mos == 1.0
        assert utt.events.events == [(0.0, 1.0)]

    def test_labels_match_events(self, small_corpus):
        for utt in small_corpus:
            sev = [s for _, s in utt.degradations]
            assert utt.mos == mos_from_degradations(utt.events, sev, utt.waveform.duration)
            assert 1.0 <= utt.mos <= 5.0

    def test_events_valid(self, small_corpus):
        for utt in small_corpus:
            prev = -1.0
            for a, b in utt.events:
                assert 0.0 <= a < b <= utt.waveform.duration
                assert a > prev
                prev = b
            assert np.all(np.abs(utt.waveform.samples) <= 1.0)

    def test_deterministic(self):
        cfg = CorpusConfig(n_utterances=3, seed=11)
        a, b = generate_corpus(cfg), generate_corpus(cfg)
        for u, v in zip(a, b):
            assert u.waveform.samples.tobytes() == v.waveform.samples.tobytes()
            assert (u.mos, u.system_id, u.events.events) == (v.mos, v.system_id, v.events.events)

    def test_per_utterance_streams(self):
        cfg = CorpusConfig(n_utterances=4, seed=5)
        serial = generate_corpus(cfg)
        alone = generate_utterance(cfg, 2)
        assert alone.waveform.samples.tobytes() == serial[2].waveform.samples.tobytes()

    def test_zero_utterances(self):
        with pytest.raises(ValueError):
            generate_corpus(CorpusConfig(n_utterances=0))

    def test_unordered_range(self):
        with pytest.raises(ValueError):
            generate_corpus(CorpusConfig(duration_range=(5.0, 3.0)))

    def test_split_round_trip(self, tmp_path, small_corpus):
        paths = write_split(tmp_path, "train", small_corpus)
        header = paths["manifest"].read_text().splitlines()[0]
        assert header == "path,mos,system_id"
        assert paths["events"].read_text().splitlines()[0] == "utt_id,onset_s,offset_s,type,severity"
        back = read_split(tmp_path, "train")
        assert [u.utt_id for u in back] == [u.utt_id for u in small_corpus]
        for u, v in zip(small_corpus, back):
            assert u.mos == v.mos and u.system_id == v.system_id
            assert u.events.events == v.events.events
            np.testing.assert_allclose(u.waveform.samples, v.waveform.samples, atol=1 / 32768)
