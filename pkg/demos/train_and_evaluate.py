"""Train a discriminator on the synthetic corpus and evaluate it.

A reduced corpus keeps this to a minute or two; pass ``--full`` for the
300/50/50 benchmark at default settings.
"""

import sys
import time

from grain_ad import data, metrics
from grain_ad.discriminator import DiscriminatorModel, TrainConfig, anomaly_score, train

full = "--full" in sys.argv
params = data.CorpusParams() if full else data.CorpusParams(n_train=60, n_test_normal=20, n_test_anomalous=20)
train_set, test_set = data.generate_synthetic_corpus(params, seed=0)
print(train_set, test_set)

config = TrainConfig(seed=0) if full else TrainConfig(seed=0, epochs=4)
start = time.perf_counter()
model = train(train_set, config, on_epoch=lambda e, loss: print(f"epoch {e + 1}: loss {loss:.4f}"))
print("trained in %.0fs" % (time.perf_counter() - start))

report = metrics.evaluate(model, test_set)
print("AUROC %.4f, macro F1 %.4f at threshold %.1f" % (report.auroc, report.macro_f1, report.threshold))

# Scores are the maximum of a 16x16 probability map.
s = anomaly_score(test_set.load(len(test_set) - 1), model, "last")
print("score map", s.score_map.shape, "max", round(s.score, 4))

# Models round-trip through bytes without change.
blob = model.to_bytes()
assert DiscriminatorModel.from_bytes(blob).to_bytes() == blob
print("model file size: %d bytes" % len(blob))
