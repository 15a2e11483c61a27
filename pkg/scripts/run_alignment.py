"""One-hop ground truth vs estimate on a 16-node ring; prints Pearson/Spearman."""

import argparse
import time

from _common import load_obj, train

from dice.analysis import run_alignment

p = argparse.ArgumentParser()
p.add_argument("--seed", type=int, default=0)
p.add_argument("--trials", type=int, default=30)
p.add_argument("--out", help="directory for alignment.csv/json")
a = p.parse_args()

obj = load_obj("alignment.json")
obj["seed"] = a.seed
t0 = time.perf_counter()
cfg, trace, ev = train(obj)
res = run_alignment(trace, ev, a.trials, a.seed)
if a.out:
    res.write(a.out)
print(res.summary(), f"{time.perf_counter() - t0:.1f}s")
