"""Feature-level anomaly simulation: additive i.i.d. Gaussian noise on patch features.

Noise is drawn per scalar entry (every position and every channel) with
``numpy.random.Generator.normal`` on a PCG64 generator. That generator uses the
ziggurat method, so a given seed gives the same draws on every platform
numpy supports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from grain_ad.errors import InvalidArgumentError

DEFAULT_SIGMA = 0.025


@dataclass(frozen=True)
class GaussianNoiseParams:
    mu: float = 0.0
    sigma: float = DEFAULT_SIGMA
    seed: int | None = None

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise InvalidArgumentError(f"sigma must be >= 0, got {self.sigma}")


def add_feature_noise(
    f_x: np.ndarray,
    params: GaussianNoiseParams = GaussianNoiseParams(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Return ``f_x + eps`` with ``eps ~ N(mu, sigma^2)`` drawn independently per entry.

    Either pass an explicit ``rng`` (used by the training loop, which owns one
    generator for the whole run) or set ``params.seed``.
    """
    if params.sigma == 0.0 and params.mu == 0.0:
        return f_x.copy()
    if rng is None:
        rng = np.random.default_rng(params.seed)
    eps = rng.normal(params.mu, params.sigma, size=f_x.shape)
    return (f_x + eps).astype(f_x.dtype, copy=False)
