"""Anomaly detection for grain kernel images trained from normal samples only.

Anomalies are simulated at image level (noise-masked blending of a foreign
texture) and at feature level (Gaussian perturbation of patch features); a
per-position MLP learns to separate them from the normal features.
"""

__version__ = "0.1.0"

from grain_ad.discriminator import (  # noqa: E402
    AnomalyScore,
    DiscriminatorModel,
    TrainConfig,
    anomaly_score,
    ensemble_score,
    train,
)
from grain_ad.image import Image  # noqa: E402

__all__ = [
    "AnomalyScore",
    "DiscriminatorModel",
    "Image",
    "TrainConfig",
    "anomaly_score",
    "ensemble_score",
    "train",
]
