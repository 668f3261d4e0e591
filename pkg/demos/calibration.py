"""
Cross-validation and calibration envelopes
==========================================

Leave-one-out refits the model without one replicate and predicts its
whole trajectory.  Envelopes summarize, at each grid point, the spread of
the true responses, of the predictive means, and of the predictive
intervals across test replicates.
"""

import tempfile

import numpy as np

from fmtgp import config
from fmtgp.experiments import run_envelope, run_loo

cfg = config.defaults()
cfg["seed"] = 1
cfg["optimizer"]["n_restart"] = 3

with tempfile.TemporaryDirectory() as out:
    # %%
    # A handful of folds keeps this quick; drop ``loo_folds`` for all of them.
    cfg["evaluation"]["loo_folds"] = 8
    res = run_loo(cfg, out)
    for s in range(2):
        q = np.asarray(res["per_fold"][(s, "q2")])
        ca = np.asarray(res["per_fold"][(s, "ca")])
        print(f"task {s}: median Q2 {np.median(q):.4f}, folds with CA = 1: {np.mean(ca == 1):.2f}")

    # %%
    # Envelopes over thirty held-out replicates.
    cfg["evaluation"]["n_test"] = 30
    env = run_envelope(cfg, out)
    for task, metric, value in env["rows"]:
        print(f"task {task}: {metric} = {value}")
    e = env["envelopes"][0]
    print("first grid points, CI_true / CI_m / CI_v:")
    for j in range(0, 50, 10):
        print(f"  {e.ci_true[j].round(3)}  {e.ci_m[j].round(3)}  {e.ci_v[j].round(3)}")
