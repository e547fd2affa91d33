"""
Training with and without slice consistency
===========================================

Train two small models on the same corpus, one with the consistency terms
switched on, and compare utterance correlation, frame-score volatility and
localization precision. The schedule here is cut to a couple of minutes, so
both models are undertrained and the numbers only illustrate the workflow;
the full-size comparison lives in tests/test_acceptance.py.
"""

import numpy as np

from framesqa.losses import LossWeights
from framesqa.metrics import RHO_1, EvalConfig, evaluate_threshold, spearman, tune_threshold, volatility
from framesqa.signal_io import CorpusConfig, generate_corpus
from framesqa.trainer import TrainConfig, prepare_bands, score_bands, train

corpus = generate_corpus(CorpusConfig(n_utterances=200, seed=2024))
tr, dv, te = corpus[:120], corpus[120:160], corpus[160:]

for lam in (0.0, 1.0):
    cfg = TrainConfig(epochs=8, lr_start=1e-3, lr_end=1e-5, weights=LossWeights(lam, lam), seed=0)
    model = train(tr, dv, cfg).model.eval()

    dev_q, _ = score_bands(model, prepare_bands(model, dv))
    test_q, test_y = score_bands(model, prepare_bands(model, te))

    # threshold tuned on dev, then applied unchanged to test
    rho1 = EvalConfig(*RHO_1)
    theta, _ = tune_threshold({u.utt_id: q for u, q in zip(dv, dev_q)}, {u.utt_id: u.events for u in dv}, rho1)
    rep = evaluate_threshold({u.utt_id: q for u, q in zip(te, test_q)}, {u.utt_id: u.events for u in te}, theta, rho1)

    vol = np.mean([volatility(q) for q in test_q])
    srcc = spearman(test_y, [u.mos for u in te])
    print(f"lambda={lam:g}: srcc={srcc:.3f} volatility={vol:.3f} theta={theta:.2f} P={rep.precision:.3f} R={rep.recall:.3f}")
