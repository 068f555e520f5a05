"""Image-level anomaly simulation.

A normal image ``i_x`` is turned into an anomaly-like image ``i_n`` by blending
a foreign source image ``i_a`` into it under a noise-derived mask::

    i_n = (1 - m) * i_x + beta * (m * i_a) + (1 - beta) * (m * i_x)

where ``m`` is the binary mask after foreground/area constraints and ``beta``
is the opacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from grain_ad import noisegen
from grain_ad.errors import DataError, InvalidArgumentError
from grain_ad.image import Image, read_png, resize_bilinear

BETA_RANGE = (0.15, 1.0)
MAX_RESAMPLES = 5


def blend_anomaly(i_x: Image, i_a: Image, m_b_prime: np.ndarray, beta: float) -> Image:
    """Blend ``i_a`` into ``i_x`` inside the mask with opacity ``beta``.

    Pixels outside the mask are copied from ``i_x`` untouched. Inside, the
    result is clamped to the interval spanned by the two inputs so rounding
    cannot push it outside (at most one ulp away from the plain formula).
    """
    if not 0.0 <= beta <= 1.0:
        raise InvalidArgumentError(f"beta must lie in [0, 1], got {beta}")
    x = i_x.pixels
    a = i_a.pixels
    m = np.asarray(m_b_prime, dtype=bool)
    if a.shape[:2] != x.shape[:2] or m.shape != x.shape[:2]:
        raise InvalidArgumentError(
            f"shape mismatch: i_x {x.shape}, i_a {a.shape}, mask {m.shape}"
        )
    if a.shape[2] != x.shape[2]:
        a = a.mean(axis=2, keepdims=True) if x.shape[2] == 1 else np.repeat(a, 3, axis=2)

    mixed = beta * a + (1.0 - beta) * x
    mixed = np.clip(mixed, np.minimum(x, a), np.maximum(x, a)).astype(x.dtype, copy=False)
    out = np.where(m[:, :, None], mixed, x)
    return Image(out, i_x.foreground)


def sample_beta(rng: np.random.Generator, beta_range: tuple[float, float] = BETA_RANGE) -> float:
    lo, hi = beta_range
    return float(rng.uniform(lo, hi))


class ProceduralSource:
    """Seeded multi-scale coloured noise textures standing in for a natural-image pool.

    One gradient-noise field per scale is mixed into RGB through a random
    colour matrix, on top of a random base colour. With ``pool_size > 0`` a
    fixed pool of textures is rendered once from ``pool_seed`` and samples are
    drawn from it (with a random quarter-turn), which is much cheaper inside a
    training loop.
    """

    periods = (64, 32, 16, 8)

    def __init__(self, pool_size: int = 0, pool_seed: int = 0):
        self.pool_size = pool_size
        self.pool_seed = pool_seed
        self._pools: dict[tuple[int, int], list[np.ndarray]] = {}

    def render(self, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
        base = rng.uniform(0.0, 1.0, size=3)
        scale_weights = 0.5 ** np.arange(len(self.periods))
        mix = rng.uniform(-1.0, 1.0, size=(len(self.periods), 3)) * scale_weights[:, None]
        mix *= rng.uniform(0.2, 0.6) / np.abs(mix).sum(axis=0, keepdims=True)
        fields = np.stack(
            [noisegen.perlin_field(width, height, p, int(rng.integers(0, 2**62))).values for p in self.periods],
            axis=2,
        )
        return np.clip(base + fields @ mix, 0.0, 1.0).astype(np.float32)

    def sample(self, width: int, height: int, rng: np.random.Generator) -> Image:
        if not self.pool_size:
            return Image(self.render(width, height, rng))
        key = (width, height)
        if key not in self._pools:
            pool_rng = np.random.default_rng([self.pool_seed, width, height])
            self._pools[key] = [self.render(width, height, pool_rng) for _ in range(self.pool_size)]
        texture = self._pools[key][int(rng.integers(0, self.pool_size))]
        if width == height:
            texture = np.rot90(texture, int(rng.integers(0, 4)))
        return Image(np.ascontiguousarray(texture))


class DirectorySource:
    """Pool of PNG images read from a directory (non-recursive, sorted by name)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"source pool {self.root} is not a directory")
        self.paths = sorted(p for p in self.root.iterdir() if p.suffix.lower() == ".png")
        if not self.paths:
            raise DataError(f"source pool {self.root} contains no PNG images")
        self._cache: dict[Path, np.ndarray] = {}

    def sample(self, width: int, height: int, rng: np.random.Generator) -> Image:
        path = self.paths[int(rng.integers(0, len(self.paths)))]
        if path not in self._cache:
            self._cache[path] = read_png(path)
        pixels = np.clip(resize_bilinear(self._cache[path], height, width), 0.0, 1.0)
        return Image(pixels.astype(np.float32))


def make_source(spec: str | Path | None, pool_size: int = 0, pool_seed: int = 0):
    """``None`` or ``"procedural"`` gives textures, anything else is a directory."""
    if spec is None or str(spec) == "procedural":
        return ProceduralSource(pool_size, pool_seed)
    return DirectorySource(spec)


def sample_source_image(source, width: int, height: int, rng: np.random.Generator) -> Image:
    return source.sample(width, height, rng)


@dataclass
class SynthConfig:
    max_area_ratio: float = 0.2
    threshold: float = noisegen.DEFAULT_THRESHOLD
    grid_period: int = noisegen.DEFAULT_GRID_PERIOD
    octaves: int = 1
    persistence: float = 0.5
    beta_range: tuple[float, float] = BETA_RANGE
    source: object = field(default_factory=ProceduralSource)

    def __post_init__(self):
        lo, hi = self.beta_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise InvalidArgumentError(f"beta_range must be inside [0, 1], got {self.beta_range}")
        if not 0.0 <= self.max_area_ratio <= 1.0:
            raise InvalidArgumentError(f"max_area_ratio must lie in [0, 1], got {self.max_area_ratio}")


@dataclass(eq=False)
class SynthResult:
    image: Image
    mask: np.ndarray
    source: Image | None
    beta: float
    degenerate: bool

    def __iter__(self):
        # allows ``i_n, m = synthesize_anomaly(...)``
        return iter((self.image, self.mask))


def synthesize_anomaly(i_x: Image, cfg: SynthConfig, rng: np.random.Generator) -> SynthResult:
    """Noise field, threshold, constrain to the kernel, then blend a source image.

    When the constrained mask comes out empty the input image is returned
    with ``degenerate=True`` so the caller can resample.
    """
    h, w = i_x.height, i_x.width
    fg = i_x.foreground_or_full()
    seed = int(rng.integers(0, 2**62))
    noise = noisegen.perlin_field(w, h, cfg.grid_period, seed, cfg.octaves, cfg.persistence)
    m_b = noisegen.binary_mask_from_field(noise, cfg.threshold)
    m_prime = noisegen.constrain_mask(
        m_b, noisegen.MaskConstraint(cfg.max_area_ratio, fg), noise, cfg.threshold
    )
    if not m_prime.any():
        return SynthResult(i_x, m_prime, None, 0.0, True)
    i_a = sample_source_image(cfg.source, w, h, rng)
    beta = sample_beta(rng, cfg.beta_range)
    return SynthResult(blend_anomaly(i_x, i_a, m_prime, beta), m_prime, i_a, beta, False)


def synthesize_with_retries(
    i_x: Image, cfg: SynthConfig, rng: np.random.Generator, retries: int = MAX_RESAMPLES
) -> SynthResult:
    """Call :func:`synthesize_anomaly` until the mask is non-empty or retries run out."""
    result = synthesize_anomaly(i_x, cfg, rng)
    if cfg.max_area_ratio == 0.0:
        return result
    for _ in range(retries):
        if not result.degenerate:
            break
        result = synthesize_anomaly(i_x, cfg, rng)
    return result
