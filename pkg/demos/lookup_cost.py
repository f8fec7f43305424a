"""Average lookup cost (hops plus timeouts), with and without churn."""
import math

import numpy as np

from chordlab.engine import ChurnConfig, init_ring, run_trial
from chordlab.fluid import TheoryParams, predict
from chordlab.observatory import Snapshot, probe_batch, summarize_trial

params = TheoryParams(r=500.0, alpha=0.5)
pred = predict(params).lookup

zero = []
for seed in range(5):
    state = init_ring(ChurnConfig(K=params.K, N0=params.N, seed=seed))
    zero.append(probe_batch(Snapshot.of(state.ring), np.random.default_rng(seed), 2000).cost.mean())
print(f"no churn: measured {np.mean(zero):.3f}, model {pred.zero_churn:.3f}, "
      f"half log2 N {0.5 * math.log2(params.N):.3f} (the last hop to the owner is extra)")

churn = [summarize_trial(run_trial(ChurnConfig(K=params.K, N0=params.N, r=params.r,
                                               alpha=params.alpha, seed=s, probes_per_snapshot=50)))
         for s in range(6)]
cost = [s.values["lookup"][0] for s in churn]
print(f"r=500 alpha=0.5: measured {np.mean(cost):.3f}, model {pred.mean:.3f}, "
      f"A(1+f+3f^2) = {pred.fit:.3f}")
