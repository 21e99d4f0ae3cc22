"""Do short and long users pull the shared weights in different directions?

Trains the plain backbone with the gradient-conflict probe switched on. After
each epoch the probe takes fixed batches of short-history and long-history
users, computes the gradient of the shared parameters on each, and logs
their cosine. A negative cosine means one cohort's update works against the
other's.

    python demos/gradient_conflict.py
"""
from lain.backbone import ModelConfig
from lain.data import generate_synthetic
from lain.trainer import TrainConfig, history_csv, train

bundle = generate_synthetic(n_users=600, n_items=1500, seed=1)
for variant in ("baseline", "full"):
    cfg = ModelConfig(vocab_size=bundle.vocab_size, L0=bundle.L0, hidden=64).with_variant(variant)
    _, history = train(bundle, cfg, TrainConfig(max_epochs=4, patience=4, conflict_probe=True, probe_size=128))
    print(f"--- {variant}")
    print(history_csv(history), end="")
