"""Train FF, GCN and GAT models on a small synthetic set and compare them.

Takes under a minute on one CPU core. Run: python3 demos/03_train_models.py
"""
from trajgnn.datapipe import SynthConfig, generate_synthetic, split_dataset, window_extract
from trajgnn.exp import TrainConfig, evaluate_displacement, train
from trajgnn.models import ModelConfig

windows = window_extract(generate_synthetic(
    SynthConfig(seed=2, vehicles=16, duration_s=60, recordings=40, lane_change_rate=1.0)))
parts = split_dataset(windows, "highd")
print(f"{len(windows)} windows")
print(f"CVM  test mean displacement {evaluate_displacement('cvm', parts['test']).mean_displacement:.3f} m")

configs = {
    "FF": ModelConfig(model_kind="ff", hidden_dim=64),
    "GCN": ModelConfig(model_kind="gcn", hidden_dim=64),
    "GAT": ModelConfig(model_kind="gat", hidden_dim=64),
    "GAT self": ModelConfig(model_kind="gat", hidden_dim=64, strategy="self"),
}
for label, mc in configs.items():
    model, hist = train(parts["train"], parts["val"], TrainConfig(model=mc, max_epochs=150, learning_rate=3e-3))
    m = evaluate_displacement(model, parts["test"])
    print(f"{label:9s}best epoch {hist.best_epoch:2d}  test mean {m.mean_displacement:.3f} m  "
          f"final {m.final_displacement:.3f} m")
