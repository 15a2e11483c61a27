"""Rank a victim's senders by mean proximal influence, one corrupted sender per seed."""

import argparse
import time

from _common import load_obj, train

from dice.analysis import detect_anomaly
from dice.topology import build_exponential

p = argparse.ArgumentParser()
p.add_argument("--kind", choices=("label-flip", "feature-noise"), default="label-flip")
p.add_argument("--seeds", type=int, default=20)
a = p.parse_args()

obj = load_obj("anomaly_flip.json")
victim = obj["experiment"]["victim"]
senders = build_exponential(obj["topology"]["n"]).in_neighbors(victim, include_self=False)
hits = 0
t0 = time.perf_counter()
for seed in range(a.seeds):
    bad = senders[seed % len(senders)]
    obj["seed"] = seed
    obj["data"]["anomalies"] = [{"node": bad, "kind": a.kind}]
    cfg, trace, ev = train(obj)
    ranking = detect_anomaly(trace, victim, ev, range(*cfg.experiment.window))
    hits += ranking[0][0] == bad
    print(f"seed {seed:2d}: anomalous {bad:2d}, top {ranking[0][0]:2d}  scores {[f'{s:+.2e}' for _, s in ranking]}")
print(f"{a.kind}: {hits}/{a.seeds} detected ({time.perf_counter() - t0:.1f}s)")
