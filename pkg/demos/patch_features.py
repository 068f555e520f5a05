"""Hierarchical features, neighbourhood aggregation and stage fusion."""

import numpy as np

from grain_ad import data, featext, featsynth
from grain_ad.featext import ExtractorSpec, FeatureExtractor

train, _ = data.generate_synthetic_corpus(data.CorpusParams(n_train=2, n_test_normal=0, n_test_anomalous=0), seed=0)
image = train.load(0)

extractor = FeatureExtractor(ExtractorSpec())  # conv4 widths, seeded weights
for k, f in enumerate(featext.extract_hierarchical(image, extractor), start=1):
    print(f"stage {k}: {f.shape}")

# Each position is averaged with its 3x3 neighbourhood; borders use the
# positions that exist.
toy = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
print("aggregated 2x2 map:", featext.aggregate_patches(toy, 3)[..., 0].tolist())

# Stage 4 is interpolated up to stage 3 and concatenated on channels.
fused = featext.patch_features(image, extractor)
print("fused patch features:", fused.shape)

# Feature-level anomalies are fused features plus small Gaussian noise.
noisy = featsynth.add_feature_noise(fused, featsynth.GaussianNoiseParams(sigma=0.025, seed=1))
print("noise std: %.4f" % (noisy - fused).std())
