"""
From frame scores to segments
=============================

Calibrate a threshold on clean reference scores, binarize, smooth, prune and
score the resulting segments against ground truth.
"""

import numpy as np

from framesqa.localizer import DetectionConfig, detect_scores, select_threshold
from framesqa.metrics import RHO_1, RHO_2, EvalConfig, intersection_eval

rng = np.random.default_rng(0)

# clean reference frames sit near the top of the scale
reference = np.clip(4.6 + 0.2 * rng.standard_normal(20000), 1, 5)
theta = select_threshold(reference, target_far=0.01)
print("threshold %.3f, reference frames below: %.4f" % (theta, np.mean(reference < theta)))

# an utterance with two low-quality stretches, plus one short dip that pruning removes
q = np.clip(4.6 + 0.2 * rng.standard_normal(250), 1, 5)
q[40:90] -= 2.0
q[150:153] -= 2.0
q[180:210] -= 1.5
events = detect_scores(q, theta, DetectionConfig(), utt_id="demo")
print("detections:", [(round(a, 2), round(b, 2)) for a, b in events])

gts = {"demo": [(0.8, 1.8), (3.6, 4.2)]}
for rho in (RHO_1, RHO_2):
    rep = intersection_eval({"demo": events}, gts, EvalConfig(*rho))
    print(rho, rep.to_dict())
