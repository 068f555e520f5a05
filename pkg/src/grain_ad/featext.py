"""Hierarchical convolutional features and patch-aware feature fusion.

The built-in extractor is a frozen four-stage network:

======  ====================  ======  ==============
stage   layer                 stride  default width
======  ====================  ======  ==============
1       4x4 patchify conv     4       32
2       3x3 conv, pad 1       8       64
3       3x3 conv, pad 1       16      128
4       3x3 conv, pad 1       32      256
======  ====================  ======  ==============

Every conv is followed by ReLU and uses edge-replicate padding, so a
constant image produces per-channel constant maps. Weights come either from a
seeded orthogonal initialisation or from a weight file (see
:mod:`grain_ad.container`, magic ``GADW``).

Feature maps are ``(h, w, c)`` arrays, or ``(n, h, w, c)`` for batches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from grain_ad import container
from grain_ad.errors import InvalidArgumentError, ModelLoadError
from grain_ad.image import Image, interpolation_matrix, resize_image, WORKING_SIZE

WEIGHT_MAGIC = b"GADW"

BACKBONES = {
    "conv4-s": (16, 32, 64, 128),
    "conv4": (32, 64, 128, 256),
    "conv4-w": (64, 128, 256, 512),
}

# Input normalisation applied before the stem.
_PIXEL_MEAN = 0.5
_PIXEL_SCALE = 4.0


@dataclass
class ExtractorSpec:
    channels: tuple[int, ...] = BACKBONES["conv4"]
    patch_size: int = 3
    fusion_stages: tuple[int, ...] = (3, 4)
    weight_source: str = "seeded"
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.fusion_stages = tuple(int(s) for s in self.fusion_stages)
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise InvalidArgumentError(f"need four positive stage widths, got {self.channels}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise InvalidArgumentError(f"patch size must be odd and >= 1, got {self.patch_size}")
        if not self.fusion_stages or any(s not in (1, 2, 3, 4) for s in self.fusion_stages):
            raise InvalidArgumentError(f"bad fusion stages {self.fusion_stages}")
        if list(self.fusion_stages) != sorted(set(self.fusion_stages)):
            raise InvalidArgumentError("fusion stages must be strictly increasing")

    @classmethod
    def from_backbone(cls, name: str, **kwargs) -> ExtractorSpec:
        if name not in BACKBONES:
            raise InvalidArgumentError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}")
        return cls(channels=BACKBONES[name], **kwargs)

    @property
    def feature_dim(self) -> int:
        return sum(self.channels[s - 1] for s in self.fusion_stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["fusion_stages"] = list(self.fusion_stages)
        return d


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T * np.sqrt(fan_out / fan_in)
    return gain * q


def layer_shapes(spec: ExtractorSpec) -> list[tuple[int, int]]:
    fan_in = [16 * spec.in_channels] + [9 * c for c in spec.channels[:3]]
    return list(zip(fan_in, spec.channels))


@dataclass(eq=False)
class FeatureExtractor:
    spec: ExtractorSpec = field(default_factory=ExtractorSpec)
    weights: list[np.ndarray] | None = None
    biases: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.weights is None:
            if self.spec.weight_source == "seeded":
                self.weights, self.biases = seeded_weights(self.spec)
            else:
                self.weights, self.biases = read_weight_file(self.spec.weight_source, self.spec)
        if self.biases is None:
            self.biases = [np.zeros(c, dtype=np.float32) for c in self.spec.channels]
        for k, ((fi, fo), w, b) in enumerate(zip(layer_shapes(self.spec), self.weights, self.biases)):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ModelLoadError(
                    f"layer {k + 1}: expected weight {(fi, fo)} / bias {(fo,)}, got {w.shape} / {b.shape}"
                )

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out += [(f"stage{k}.weight", w), (f"stage{k}.bias", b)]
        return out

    def copy(self) -> FeatureExtractor:
        return FeatureExtractor(
            self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )


def seeded_weights(spec: ExtractorSpec):
    rng = np.random.default_rng(spec.seed)
    weights = [
        _orthogonal(rng, fi, fo, np.sqrt(2.0)).astype(np.float32) for fi, fo in layer_shapes(spec)
    ]
    biases = [np.zeros(c, dtype=np.float32) for c in spec.channels]
    return weights, biases


def write_weight_file(path: str | Path, extractor: FeatureExtractor) -> None:
    container.write_file(path, WEIGHT_MAGIC, {"spec": extractor.spec.to_dict()}, extractor.arrays())


def read_weight_file(path: str | Path, spec: ExtractorSpec):
    if not Path(path).is_file():
        raise ModelLoadError(f"weight file {path} does not exist")
    _, arrays = container.read_file(path, WEIGHT_MAGIC)
    try:
        weights = [arrays[f"stage{k}.weight"] for k in range(1, 5)]
        biases = [arrays[f"stage{k}.bias"] for k in range(1, 5)]
    except KeyError as exc:
        raise ModelLoadError(f"{path}: missing array {exc}") from exc
    return weights, biases


def _as_batch(images) -> np.ndarray:
    """Stack an Image, a list of Images or raw pixel arrays into ``(n, h, w, c)``."""
    if isinstance(images, np.ndarray):
        return (images if images.ndim == 4 else images[None]).astype(np.float32, copy=False)
    if isinstance(images, Image):
        images = [images]
    return np.stack([resize_image(im.rgb(), WORKING_SIZE).pixels.astype(np.float32) for im in images])


def _im2col_stem(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    if h % 4 or w % 4:
        raise InvalidArgumentError(f"input size must be divisible by 4, got {h}x{w}")
    cols = x.reshape(n, h // 4, 4, w // 4, 4, c).transpose(0, 1, 3, 2, 4, 5)
    return cols.reshape(n, h // 4, w // 4, 16 * c)


def _im2col_3x3_s2(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::2, ::2]
    # win: (n, h', w', c, 3, 3) -> channel-major (c, ky, kx) flattening
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(n, ho, wo, c * 9)


def _forward(extractor: FeatureExtractor, batch: np.ndarray, keep_cache: bool = False):
    x = (batch - _PIXEL_MEAN) * _PIXEL_SCALE
    feats, cache = [], {}
    for k, (w, b) in enumerate(zip(extractor.weights, extractor.biases), start=1):
        cols = _im2col_stem(x) if k == 1 else _im2col_3x3_s2(x)
        pre = cols @ w + b
        x = np.maximum(pre, 0.0)
        feats.append(x)
        if keep_cache and k == 4:
            cache["cols4"] = cols
            cache["pre4"] = pre
    return feats, cache


def _is_single(images) -> bool:
    return isinstance(images, Image) or (isinstance(images, np.ndarray) and images.ndim == 3)


def extract_hierarchical(images, extractor: FeatureExtractor) -> list[np.ndarray]:
    """Stage 1-4 feature maps: ``(h, w, c)`` for one image, ``(n, h, w, c)`` for a batch."""
    feats, _ = _forward(extractor, _as_batch(images))
    return [f[0] for f in feats] if _is_single(images) else feats


def _shifted_windows(h: int, w: int, p: int):
    r = p // 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            dst = (slice(max(0, -dy), h - max(0, dy)), slice(max(0, -dx), w - max(0, dx)))
            src = (slice(max(0, dy), h - max(0, -dy)), slice(max(0, dx), w - max(0, -dx)))
            yield dst, src


def _box_sum(x: np.ndarray, p: int) -> np.ndarray:
    """Sum over the ``p x p`` window (zero outside) on axes -3, -2."""
    h, w = x.shape[-3], x.shape[-2]
    out = np.zeros_like(x)
    for (dy, dx), (sy, sx) in _shifted_windows(h, w, p):
        out[..., dy, dx, :] += x[..., sy, sx, :]
    return out


def _neighbour_counts(h: int, w: int, p: int) -> np.ndarray:
    r = p // 2
    ys = np.arange(h)
    xs = np.arange(w)
    cy = np.minimum(ys + r, h - 1) - np.maximum(ys - r, 0) + 1
    cx = np.minimum(xs + r, w - 1) - np.maximum(xs - r, 0) + 1
    return (cy[:, None] * cx[None, :])[:, :, None].astype(np.float64)


def aggregate_patches(f_l: np.ndarray, p: int = 3) -> np.ndarray:
    """Mean over the ``p x p`` neighbourhood of every position.

    Neighbourhoods are clipped at the border and averaged over the positions
    that remain, so the output keeps the input resolution.
    """
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd and >= 1, got {p}")
    if p == 1:
        return f_l.copy()
    h, w = f_l.shape[-3], f_l.shape[-2]
    x = f_l.astype(np.float64)
    total = np.zeros_like(x)
    lo = np.full_like(x, np.inf)
    hi = np.full_like(x, -np.inf)
    for (dy, dx), (sy, sx) in _shifted_windows(h, w, p):
        v = x[..., sy, sx, :]
        total[..., dy, dx, :] += v
        np.minimum(lo[..., dy, dx, :], v, out=lo[..., dy, dx, :])
        np.maximum(hi[..., dy, dx, :], v, out=hi[..., dy, dx, :])
    # rounding in the sum must not push a mean outside its neighbourhood range
    mean = np.clip(total / _neighbour_counts(h, w, p), lo, hi)
    return mean.astype(f_l.dtype)


def interpolate_to(f: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize on the spatial axes using align-corners sampling."""
    ry = interpolation_matrix(f.shape[-3], h, align_corners=True)
    rx = interpolation_matrix(f.shape[-2], w, align_corners=True)
    out = np.einsum("ik,...klc,jl->...ijc", ry, f, rx, optimize=True)
    return out.astype(f.dtype)


def fuse_features(f_low: np.ndarray, *higher: np.ndarray) -> np.ndarray:
    """Concatenate ``f_low`` with coarser maps interpolated to its resolution."""
    h, w = f_low.shape[-3], f_low.shape[-2]
    parts = [f_low]
    for f in higher:
        if f.shape[-3] > h or f.shape[-2] > w:
            raise InvalidArgumentError(
                f"higher-stage map {f.shape[-3:-1]} is finer than the base map {(h, w)}"
            )
        parts.append(interpolate_to(f, h, w))
    return np.concatenate(parts, axis=-1)


def fuse_from_stages(stage_maps: list[np.ndarray], spec: ExtractorSpec) -> np.ndarray:
    aggregated = [aggregate_patches(stage_maps[s - 1], spec.patch_size) for s in spec.fusion_stages]
    return fuse_features(*aggregated)


def patch_features(images, extractor: FeatureExtractor) -> np.ndarray:
    """Fused patch-aware features, ``(h3, w3, c3 + c4)`` for the default spec."""
    return fuse_from_stages(extract_hierarchical(images, extractor), extractor.spec)


def patch_features_with_cache(images, extractor: FeatureExtractor):
    """Batch forward that also keeps what :func:`last_stage_grads` needs."""
    batch = _as_batch(images)
    feats, cache = _forward(extractor, batch, keep_cache=True)
    cache["stage_maps"] = feats
    return fuse_from_stages(feats, extractor.spec), cache


def last_stage_grads(grad_fused: np.ndarray, cache: dict, extractor: FeatureExtractor):
    """Gradients of a loss w.r.t. the stage-4 weight and bias.

    ``grad_fused`` is the loss gradient w.r.t. the fused batch features. Only
    valid when stage 4 is the last fusion stage.
    """
    spec = extractor.spec
    if spec.fusion_stages[-1] != 4:
        raise InvalidArgumentError("fine-tuning requires stage 4 among the fusion stages")
    c4 = spec.channels[3]
    g_interp = grad_fused[..., -c4:].astype(np.float64)
    f4 = cache["stage_maps"][3]
    h4, w4 = f4.shape[1], f4.shape[2]
    h, w = grad_fused.shape[1], grad_fused.shape[2]
    ry = interpolation_matrix(h4, h, align_corners=True)
    rx = interpolation_matrix(w4, w, align_corners=True)
    g_agg = np.einsum("ik,nijc,jl->nklc", ry, g_interp, rx, optimize=True)
    p = spec.patch_size
    if p > 1:
        g_f4 = _box_sum(g_agg / _neighbour_counts(h4, w4, p), p)
    else:
        g_f4 = g_agg
    g_pre = g_f4 * (cache["pre4"] > 0)
    cols = cache["cols4"].reshape(-1, cache["cols4"].shape[-1]).astype(np.float64)
    g_pre = g_pre.reshape(-1, c4)
    return cols.T @ g_pre, g_pre.sum(axis=0)
