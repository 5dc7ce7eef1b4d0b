"""Constant velocity and IDM on synthetic traffic, then IDM tuning.

Run: python3 demos/02_classical_baselines.py
"""
from trajgnn.classical import HIGHD_IDM, NGSIM_IDM, tune_idm
from trajgnn.datapipe import SynthConfig, generate_synthetic, split_dataset, window_extract
from trajgnn.exp import evaluate_displacement

cfg = SynthConfig(seed=1, vehicles=20, duration_s=60, recordings=10, lane_change_rate=1.0)
windows = window_extract(generate_synthetic(cfg))
parts = split_dataset(windows, "highd")
print(f"{len(windows)} windows; train/val/test = "
      f"{len(parts['train'])}/{len(parts['val'])}/{len(parts['test'])}")


def show(label, predictor):
    m = evaluate_displacement(predictor, parts["test"])
    steps = " ".join(f"{v:5.2f}" for v in m.per_step)
    print(f"{label:12s} mean {m.mean_displacement:6.3f} m  final {m.final_displacement:6.3f} m"
          f"  per second: {steps}")


show("CVM", "cvm")
show("IDM (NGSIM)", NGSIM_IDM)
show("IDM (HighD)", HIGHD_IDM)

# A short search; the full protocol uses 20,000 samples.
res = tune_idm(parts["train"], sample_budget=500, seed=0, return_history=True)
print(f"\ntuned on training windows: {res.params}")
print(f"training objective {res.objective:.3f} m")
show("IDM (tuned)", res.params)
