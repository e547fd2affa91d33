"""
Synthetic degradation corpus and frame grid
===========================================

Generate a few utterances, look at their labels and events, and check how
many 20 ms frames the model produces for each one.
"""

import numpy as np

from framesqa.model import FPS, frame_lengths
from framesqa.signal_io import CorpusConfig, generate_corpus, mos_from_degradations, preprocess, rms_dbfs

corpus = generate_corpus(CorpusConfig(n_utterances=6, seed=1))

# every label is a function of the injected events: 5 - 4 * severity-weighted degraded fraction
for u in corpus:
    dur = len(u.waveform.samples) / u.waveform.sample_rate
    print(f"{u.utt_id} {u.system_id:<16} dur={dur:.2f}s mos={u.mos:.2f} events={[(round(a, 2), round(b, 2)) for a, b in u.events]}")

# a 4 s utterance with one 1 s event at severity 0.8
print("label check:", mos_from_degradations([(1.0, 2.0)], [0.8], 4.0))

# preprocessing: loudness to -18 dBFS, then zero mean / unit variance
w = corpus[0].waveform
print("raw level %.1f dBFS" % rms_dbfs(w))
x = preprocess(w).samples
print("after preprocess: mean %.2e std %.6f" % (x.mean(), x.std()))

# one frame per 320 samples at 16 kHz
print("frames for 1 s:", int(frame_lengths(np.array([16000]))[0]), "at", FPS, "fps")
