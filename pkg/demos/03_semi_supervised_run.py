"""A small semi-supervised run, end to end, in a couple of minutes.

Run: python demos/03_semi_supervised_run.py

1. Generate a benchmark with 200 labeled and 1800 unlabeled images; a quarter
   of the unlabeled ones are distractors (noise and a different wireframe).
2. Phase1: supervised training on the labeled images.
3. Look at teacher entropies: distractors should look less certain.
4. Phase2: Mean-Teacher consistency with the dynamic entropy filter, next to
   the same continuation without the unlabeled term.
"""

import time

import numpy as np

from rotssl import engine, synth
from rotssl.config import ExperimentConfig, FilterPolicy, TrainConfig

data = synth.gen_dataset(200, 1800, 0.25, seed=0, n_val=200, n_test=200)
train = TrainConfig(seed=0, phase1_iters=1500, phase2_iters=600, eval_every=300)
cfg = ExperimentConfig(train=train)

t = time.time()
p1 = engine.run_phase1(cfg, data)
err = engine.evaluate_params(p1.student, data["test"])["mean_geodesic_deg"]
print(f"Phase1 done in {time.time() - t:.0f}s, test geodesic error {err:.1f} deg")

fs = engine.filter_stats(p1.teacher, data["unlabeled"], delta=0.75)
ent, ood = fs["entropies"], data["unlabeled"].is_ood
print(f"\nmean teacher entropy: in-distribution {ent[~ood].mean():.2f}, distractors {ent[ood].mean():.2f}")
print(f"tau at delta = 0.75: {fs['tau']:.2f}; rejected {fs['rejected_ood']} distractors "
      f"and {fs['rejected_id']} real images")
peak = fs["histogram_counts"].max()
for lo, c in zip(fs["histogram_edges"][:-1], fs["histogram_counts"]):
    print(f"{lo:7.2f} | {'#' * int(40 * c / peak)}")

for name, policy in (("lam = 0 continuation", FilterPolicy(lam=0.0)),
                     ("dynamic entropy filter", FilterPolicy())):
    t = time.time()
    log = engine.CsvLog()
    st = engine.run_phase2(ExperimentConfig(train=train, filter=policy), data, p1, log_to=log)
    err = engine.evaluate_params(st.student, data["test"])["mean_geodesic_deg"]
    taus = ", ".join(f"{x:.2f}" for x in st.tau_history)
    print(f"\n{name}: {time.time() - t:.0f}s, test error {err:.1f} deg, stage thresholds [{taus}]")
