"""Lattice gradient (Perlin) noise and noise-derived binary anomaly masks.

Gradients live on an integer lattice with spacing ``grid_period`` pixels. Each
lattice point picks one of 8 unit directions through a 64-bit integer hash of
``(ix, iy, seed)``, so fields are reproducible on any platform and do not
depend on a global RNG.

Masks are plain ``numpy`` boolean arrays of shape ``(height, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from grain_ad.errors import InvalidArgumentError

DEFAULT_GRID_PERIOD = 16
DEFAULT_THRESHOLD = 0.4
BISECTION_STEPS = 20

_MASK64 = (1 << 64) - 1
_DIRECTIONS = np.array(
    [[np.cos(k * np.pi / 4.0), np.sin(k * np.pi / 4.0)] for k in range(8)]
)
# Peak amplitude of single-octave 2-D gradient noise with unit gradients is
# sqrt(2)/2; rescaling by sqrt(2) maps the attainable range onto [-1, 1].
_AMPLITUDE_SCALE = np.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class NoiseField:
    values: np.ndarray
    seed: int
    grid_period: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MaskConstraint:
    """Upper bound ``max_area_ratio`` on mask area relative to the foreground."""

    max_area_ratio: float
    foreground: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.max_area_ratio <= 1.0:
            raise InvalidArgumentError(
                f"max_area_ratio must lie in [0, 1], got {self.max_area_ratio}"
            )


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def lattice_gradients(nx: int, ny: int, seed: int) -> np.ndarray:
    """Unit gradient vectors for lattice points ``0..nx-1`` x ``0..ny-1``.

    Returns an array of shape ``(ny, nx, 2)``.
    """
    iy, ix = np.meshgrid(
        np.arange(ny, dtype=np.uint64), np.arange(nx, dtype=np.uint64), indexing="ij"
    )
    s = np.uint64(seed & _MASK64)
    with np.errstate(over="ignore"):
        h = _splitmix64(s)
        h = _splitmix64(h ^ ix)
        h = _splitmix64(h ^ (iy * np.uint64(0x632BE59BD9B4E019)))
    return _DIRECTIONS[(h & np.uint64(7)).astype(np.intp)]


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _single_octave(width: int, height: int, period: int, seed: int) -> np.ndarray:
    cx = (width - 1) // period + 1
    cy = (height - 1) // period + 1
    grads = lattice_gradients(cx + 1, cy + 1, seed)

    # Work on a (cell_y, py, cell_x, px) grid so per-cell gradients broadcast
    # over the pixels of their cell without materialising repeats.
    t = np.arange(period) / period
    fx = t[None, None, None, :]
    fy = t[None, :, None, None]

    def corner(dy, dx):
        g = grads[dy : dy + cy, dx : dx + cx]
        gx = g[:, None, :, None, 0]
        gy = g[:, None, :, None, 1]
        return gx * (fx - dx) + gy * (fy - dy)

    u = _fade(fx)
    v = _fade(fy)
    n00 = corner(0, 0)
    n01 = corner(0, 1)
    n10 = corner(1, 0)
    n11 = corner(1, 1)
    top = n00 + u * (n01 - n00)
    bottom = n10 + u * (n11 - n10)
    values = (top + v * (bottom - top)) * _AMPLITUDE_SCALE
    return values.reshape(cy * period, cx * period)[:height, :width]


def perlin_field(
    width: int,
    height: int,
    grid_period: int = DEFAULT_GRID_PERIOD,
    seed: int = 0,
    octaves: int = 1,
    persistence: float = 0.5,
) -> NoiseField:
    """Generate a gradient-noise field with values in ``[-1, 1]``.

    Additional octaves halve the lattice period and scale the amplitude by
    ``persistence``; the sum is renormalised by the total amplitude so the
    range bound still holds. Lattice points of the base period stay exactly 0
    as long as ``grid_period`` is divisible by ``2 ** (octaves - 1)``.
    """
    if width < 1 or height < 1:
        raise InvalidArgumentError(f"field size must be positive, got {width}x{height}")
    if grid_period < 1:
        raise InvalidArgumentError(f"grid_period must be >= 1, got {grid_period}")
    if octaves < 1:
        raise InvalidArgumentError(f"octaves must be >= 1, got {octaves}")

    total = np.zeros((height, width))
    amplitude, norm, period = 1.0, 0.0, grid_period
    for octave in range(octaves):
        total += amplitude * _single_octave(width, height, max(period, 1), seed + octave)
        norm += amplitude
        amplitude *= persistence
        period //= 2
    values = np.clip(total / norm, -1.0, 1.0)
    return NoiseField(values=values, seed=seed, grid_period=grid_period)


def binary_mask_from_field(field: NoiseField, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Pixels strictly above ``threshold`` become 1."""
    if not -1.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must lie in (-1, 1), got {threshold}")
    return field.values > threshold


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def constrain_mask(
    m_b: np.ndarray,
    constraint: MaskConstraint,
    field: NoiseField,
    threshold: float = DEFAULT_THRESHOLD,
) -> np.ndarray:
    """Restrict ``m_b`` to the foreground and cap its area.

    The AND with the foreground is returned as is when its area is at most
    ``r * area(foreground)``. Otherwise the binarisation threshold is raised by
    bisection over ``[threshold, max(field)]``; the upper end always yields an
    empty mask, so the returned mask satisfies the bound.
    """
    fg = np.asarray(constraint.foreground, dtype=bool)
    m_b = np.asarray(m_b, dtype=bool)
    if m_b.shape != fg.shape or m_b.shape != field.values.shape:
        raise InvalidArgumentError(
            f"shape mismatch: mask {m_b.shape}, foreground {fg.shape}, field {field.values.shape}"
        )
    limit = constraint.max_area_ratio * mask_area(fg)
    joint = m_b & fg
    if mask_area(joint) <= limit:
        return joint

    lo = threshold
    hi = float(field.values.max())
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if mask_area(joint & (field.values > mid)) <= limit:
            hi = mid
        else:
            lo = mid
    return joint & (field.values > hi)
