"""How stale do successor pointers get under churn?

Runs a few trials at one churn rate and sets the measured fractions of
wrong and dead successor entries beside the fluid-model values.
"""
import numpy as np

from chordlab.engine import ChurnConfig, run_trial
from chordlab.fluid import TheoryParams, predict
from chordlab.observatory import aggregate, summarize_trial

r, alpha = 200.0, 0.5
summaries = [
    summarize_trial(run_trial(ChurnConfig(K=2**20, N0=1000, S=6, r=r, alpha=alpha, seed=s,
                              probes_per_snapshot=50)))
    for s in range(8)
]
sim = {(rec.quantity, rec.index): rec for rec in aggregate(summaries)}
theory = predict(TheoryParams(r=r, alpha=alpha), with_lookup=False)

print(f"r={r:g} alpha={alpha:g}: {len(summaries)} trials")
print(" k     w_sim        w_theory     d_sim        d_theory")
for k in range(1, 6):
    w, d = sim["w", k], sim["d", k]
    print(f"{k:2d}  {w.mean:.5f}±{w.stderr:.5f}  {theory.w[k]:.5f}      "
          f"{d.mean:.5f}±{d.stderr:.5f}  {theory.d[k]:.5f}")

# a stale first successor is as often dead as it is merely out of date
print("d1/w1 measured:", round(sim["d", 1].mean / sim["w", 1].mean, 3))
inc = sim["inconsistency", 0]
print("lookups returning the wrong node:", f"{inc.mean:.4f}±{inc.stderr:.4f}",
      "vs w1-d1 =", f"{theory.w[1] - theory.d[1]:.4f}")
