"""Image-level vs feature-level simulation, on a reduced corpus.

The three arms are both simulations, image only (sigma = 0) and feature
only (r = 0). ``grain-ad ablate`` runs the same thing from a config file.
"""

from grain_ad import cli, data

cfg = cli.RunConfig(epochs=4, ablation_seeds=(0, 1, 2))
train_set, test_set = data.generate_synthetic_corpus(
    data.CorpusParams(n_train=100, n_test_normal=25, n_test_anomalous=25), seed=0
)
rows, medians = cli.run_ablation(cfg, train_set, test_set)
for arm, seed, sigma, r, auc in rows:
    print(f"{arm:13s} seed {seed}  sigma={sigma:<6} r={r:<4} AUROC {auc:.4f}")
for arm, med in medians.items():
    print(f"{arm:13s} median AUROC {med:.4f}")
