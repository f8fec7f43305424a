"""Dead fingers: where the fluid model and the simulator part ways.

Short-range fingers are repaired mostly by the successor list and agree
with the model. Long-range fingers settle on a plateau well below the
predicted one; the measured level sits near 1/(2 - p_join + R), where R
is the finger-repair rate per failure.
"""
import numpy as np

from chordlab.engine import ChurnConfig, run_trial
from chordlab.fluid import TheoryParams, finger_predictions
from chordlab.observatory import summarize_trial

r, alpha = 500.0, 0.5
params = TheoryParams(r=r, alpha=alpha)
theory = finger_predictions(params)
runs = [summarize_trial(run_trial(ChurnConfig(K=params.K, N0=params.N, r=r, alpha=alpha, seed=s)))
        for s in range(6)]
f_sim = np.mean([s.values["f"] for s in runs], axis=0)

R = r * (1 - alpha) / params.M
print(" k   f_sim    f_theory")
for k in range(4, params.M + 1, 2):
    print(f"{k:2d}  {f_sim[k]:.4f}   {theory.f[k]:.4f}")
q = theory.p_join[-1]
print(f"model plateau {theory.plateau:.4f}; 1/(2-q+R) = {1 / (2 - q + R):.4f}; "
      f"measured f13..f20 mean {f_sim[13:].mean():.4f}")
