"""Train the full model and the plain backbone, then compare them per length bucket.

Uses a reduced synthetic log and a short budget so it finishes in a few
minutes on one core. The numbers move between seeds; run the acceptance
suite for the ten-seed picture.

    python demos/train_and_audit.py [seed]
"""
import sys

from lain.backbone import ModelConfig, count_parameters
from lain.data import cohort_shares, generate_synthetic
from lain.trainer import TrainConfig, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
bundle = generate_synthetic(n_users=800, n_items=2000, seed=seed)
shares = cohort_shares(bundle)
print("users per cohort:", {k: round(v, 3) for k, v in shares["users"].items()})
print("training samples per cohort:", {k: round(v, 3) for k, v in shares["train_samples"].items()})

base_cfg = ModelConfig(vocab_size=bundle.vocab_size, L0=bundle.L0, hidden=128)
budget = TrainConfig(max_epochs=4, patience=1)

reports = {}
for variant in ("baseline", "full"):
    model, history = train(bundle, base_cfg.with_variant(variant), budget, seed=seed)
    reports[variant] = evaluate(model, bundle)
    counts = count_parameters(model)
    print(f"\n{variant}: {len(history)} epochs, {counts['total']} parameters "
          f"({100 * counts['lain_fraction']:.1f}% length-aware)")

print(f"\n{'bucket':8s} {'base AUC':>9s} {'full AUC':>9s} {'base Gini':>10s} {'full Gini':>10s}")
for bucket in ("short", "medium", "long", "overall"):
    b, f = reports["baseline"]["buckets"][bucket], reports["full"]["buckets"][bucket]
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"{bucket:8s} {fmt(b['auc']):>9s} {fmt(f['auc']):>9s} "
          f"{fmt(b.get('mean_gini')):>10s} {fmt(f.get('mean_gini')):>10s}")
print("\nacross-bucket Gini variance: baseline {:.2e}, full {:.2e}".format(
    reports["baseline"]["gini_variance"], reports["full"]["gini_variance"]))
print("temperature range seen at test time:", reports["full"]["attention"])
