"""Dominant vs peripheral one-hop out-influence, then per-hop decay on a uniform ring."""

import time

import numpy as np
from _common import load_obj, train

from dice.analysis import alignment_schedule, cascade_map, hop_profile

t0 = time.perf_counter()
obj = load_obj("cascade.json")
cfg, trace, ev = train(obj)
exp = cfg.experiment
injected = trace.shards[exp.inject_node].batch(np.arange(cfg.train.batch_size))
means = []
for stem in exp.stems:
    vals = [cascade_map(trace, stem, t, ev, injected).out_influence for t in range(exp.iterations)]
    means.append(float(np.mean(vals)))
    print(f"stem {stem:2d}: mean out-influence {means[-1]:+.4e}")
print(f"ratio {abs(means[0]) / abs(means[1]):.2f}")

obj["topology"] = {"builder": "ring", "n": 16}
obj["train"]["lr"] = 0.01
_, ring, ev = train(obj)
queries = [(j, min(t, ring.T - 4)) for j, t in alignment_schedule(ring, exp.decay_queries, 1)]
print("mean |per-hop|, rho = 0..3:", hop_profile(ring, queries, ev, radius=3))
print(f"{time.perf_counter() - t0:.1f}s")
