"""Per-position MLP discriminator: objective, Adam training loop and scoring.

Training follows the usual synthesis-based recipe. For each batch of normal
images ``I_x``:

1. synthesise anomaly-like images ``I_n`` (:mod:`grain_ad.imagesynth`);
2. extract patch features ``F_x`` and ``F_n`` (:mod:`grain_ad.featext`);
3. perturb ``F_x`` with Gaussian noise into ``F_a`` (:mod:`grain_ad.featsynth`);
4. classify every position of the three grids, targets 0 / 1 / 1;
5. mean cross-entropy over all positions, backward, Adam step.

At inference only ``F`` of the test image is computed and the anomaly score is
the maximum positive-class probability over its positions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from grain_ad import container, featext, featsynth, imagesynth
from grain_ad.errors import (
    ConfigError,
    DataError,
    InvalidArgumentError,
    ModelLoadError,
    TrainingDivergenceError,
)
from grain_ad.image import Image

log = logging.getLogger(__name__)

MODEL_MAGIC = b"GADM"
PROB_FLOOR = 1e-12
AUGMENTATIONS = ("none", "flip_rot", "mixup")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.8, 0.999)
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 8
    seed: int = 0
    sigma: float = featsynth.DEFAULT_SIGMA
    r: float = 0.2
    threshold: float = 0.4
    grid_period: int = 16
    hidden: tuple[int, ...] = (128, 128)
    backbone: str = "conv4"
    patch_size: int = 3
    extractor_seed: int = 0
    weights: str = "seeded"
    source: str = "procedural"
    texture_pool: int = 64
    augmentation: str = "none"
    fine_tune_extractor: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lr < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, adam_eps > 0")
        if len(self.betas) != 2 or not all(0.0 < b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must both lie in (0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.sigma < 0 or not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"need sigma >= 0 and r in [0, 1], got sigma={self.sigma}, r={self.r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.backbone not in featext.BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def extractor_spec(self) -> featext.ExtractorSpec:
        return featext.ExtractorSpec.from_backbone(
            self.backbone,
            patch_size=self.patch_size,
            weight_source=self.weights,
            seed=self.extractor_seed,
        )

    def synth_config(self) -> imagesynth.SynthConfig:
        return imagesynth.SynthConfig(
            max_area_ratio=self.r,
            threshold=self.threshold,
            grid_period=self.grid_period,
            source=imagesynth.make_source(self.source, self.texture_pool, self.seed),
        )


# ---------------------------------------------------------------------------
# classifier


class MlpClassifier:
    """Fully connected net ``in -> hidden... -> 2`` with tanh between layers."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise InvalidArgumentError("need matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape[1] != b.shape[0]:
                raise InvalidArgumentError(f"layer {k}: weight {w.shape} vs bias {b.shape}")
            if k and weights[k - 1].shape[1] != w.shape[0]:
                raise InvalidArgumentError(f"layer {k}: input width does not chain")
        if weights[-1].shape[1] != 2:
            raise InvalidArgumentError("final layer must produce 2 logits")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, widths, seed: int = 0, dtype=np.float32) -> MlpClassifier:
        rng = np.random.default_rng([seed, 0x4D4C50])
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, fan_out).astype(dtype))
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> MlpClassifier:
        return MlpClassifier([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> MlpClassifier:
        return MlpClassifier(
            [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for rows of ``x``; with ``keep`` also the layer activations."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], g_logits: np.ndarray):
        """Parameter gradients (same order as :meth:`params`) and input gradient."""
        grads = [None] * (2 * len(self.weights))
        g = g_logits
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return grads, g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(f: np.ndarray, model) -> np.ndarray:
    """Two-class probabilities at every position of a ``(..., h, w, c)`` map."""
    mlp = model.classifier if isinstance(model, DiscriminatorModel) else model
    if f.shape[-1] != mlp.in_features:
        raise InvalidArgumentError(
            f"feature map has {f.shape[-1]} channels, classifier expects {mlp.in_features}"
        )
    flat = f.reshape(-1, f.shape[-1]).astype(mlp.weights[0].dtype, copy=False)
    return softmax(mlp.forward(flat)).reshape(f.shape[:-1] + (2,))


def _cross_entropy(probs: np.ndarray, target: int) -> np.ndarray:
    return -np.log(np.maximum(probs[..., target], PROB_FLOOR))


def batch_loss(preds_x: np.ndarray, preds_n: np.ndarray | None = None, preds_a: np.ndarray | None = None) -> float:
    """Mean per-position cross-entropy; targets are 0 for ``x`` and 1 for ``n`` and ``a``.

    The mean runs over every position of every grid given. ``None`` grids
    (dropped simulation branches) are skipped.
    """
    grids = [(preds_x, 0), (preds_n, 1), (preds_a, 1)]
    grids = [(g, t) for g, t in grids if g is not None]
    shape = preds_x.shape
    for g, _ in grids:
        if g.shape != shape:
            raise InvalidArgumentError(f"prediction grids differ in shape: {g.shape} vs {shape}")
    total = sum(float(_cross_entropy(g, t).sum(dtype=np.float64)) for g, t in grids)
    count = sum(g[..., 0].size for g, _ in grids)
    return total / count


def loss_and_grads(mlp: MlpClassifier, feats: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows of ``feats`` and its analytic gradients.

    Returns ``(loss, param_grads, input_grad)``.
    """
    logits, acts = mlp.forward(feats, keep=True)
    probs = softmax(logits)
    n = feats.shape[0]
    picked = probs[np.arange(n), targets]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).sum(dtype=np.float64)) / n
    g_logits = probs.copy()
    g_logits[np.arange(n), targets] -= 1.0
    g_logits /= n
    grads, g_in = mlp.backward(acts, g_logits)
    return loss, grads, g_in


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with decoupled weight decay (the AdamW update)."""

    def __init__(self, params, lr=1e-3, betas=(0.8, 0.999), weight_decay=1e-4, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= (self.lr * (update + self.weight_decay * p)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class DiscriminatorModel:
    extractor: featext.FeatureExtractor
    classifier: MlpClassifier
    config: TrainConfig = field(default_factory=TrainConfig)
    history: list[float] = field(default_factory=list)

    @classmethod
    def initial(cls, config: TrainConfig) -> DiscriminatorModel:
        extractor = featext.FeatureExtractor(config.extractor_spec())
        widths = [extractor.feature_dim, *config.hidden, 2]
        return cls(extractor, MlpClassifier.init(widths, config.seed), config)

    def to_bytes(self) -> bytes:
        from grain_ad import __version__

        header = {
            "format": "grain-ad-model",
            "package_version": __version__,
            "extractor": self.extractor.spec.to_dict(),
            "classifier": {"widths": self.classifier.widths, "activation": "tanh"},
            "train_config": self.config.to_dict(),
            "seed": self.config.seed,
            "epoch_losses": [float(np.float32(x)) for x in self.history],
        }
        arrays = list(self.extractor.arrays())
        for k, (w, b) in enumerate(zip(self.classifier.weights, self.classifier.biases)):
            arrays += [(f"mlp{k}.weight", w), (f"mlp{k}.bias", b)]
        return container.dump(MODEL_MAGIC, header, arrays)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> DiscriminatorModel:
        header, arrays = container.load(data, MODEL_MAGIC, source)
        try:
            spec = featext.ExtractorSpec(**header["extractor"])
            ex_w = [arrays[f"stage{k}.weight"] for k in range(1, 5)]
            ex_b = [arrays[f"stage{k}.bias"] for k in range(1, 5)]
            n_layers = len(header["classifier"]["widths"]) - 1
            mlp = MlpClassifier(
                [arrays[f"mlp{k}.weight"] for k in range(n_layers)],
                [arrays[f"mlp{k}.bias"] for k in range(n_layers)],
            )
            config = TrainConfig.from_dict(
                {**header["train_config"], "betas": tuple(header["train_config"]["betas"])}
            )
        except (KeyError, TypeError, InvalidArgumentError, ConfigError) as exc:
            raise ModelLoadError(f"{source}: inconsistent model file ({exc})") from exc
        extractor = featext.FeatureExtractor(spec, ex_w, ex_b)
        if extractor.feature_dim != mlp.in_features:
            raise ModelLoadError(f"{source}: extractor/classifier width mismatch")
        return cls(extractor, mlp, config, list(header.get("epoch_losses", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> DiscriminatorModel:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ModelLoadError(f"cannot read model {path}: {exc}") from exc
        return cls.from_bytes(data, str(path))


# ---------------------------------------------------------------------------
# training


def _augment(images: list[Image], kind: str, rng: np.random.Generator) -> list[Image]:
    if kind == "none":
        return images
    out = []
    for im in images:
        px, fg = im.pixels, im.foreground_or_full()
        if kind == "flip_rot":
            k = int(rng.integers(0, 4))
            px, fg = np.rot90(px, k), np.rot90(fg, k)
            if rng.random() < 0.5:
                px, fg = px[:, ::-1], fg[:, ::-1]
            if rng.random() < 0.5:
                px, fg = px[::-1], fg[::-1]
        else:  # mixup between two normal images of the batch
            other = images[int(rng.integers(0, len(images)))]
            lam = float(rng.beta(1.0, 1.0))
            px = lam * px + (1.0 - lam) * other.pixels
            fg = fg | other.foreground_or_full()
        out.append(Image(np.ascontiguousarray(px, dtype=np.float32), np.ascontiguousarray(fg)))
    return out


class TrainState:
    """Mutable training state: model parameters, optimiser moments, RNG, caches."""

    def __init__(self, model: DiscriminatorModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng([config.seed, 0x545241494E])
        self.synth = config.synth_config()
        params = model.classifier.params()
        if config.fine_tune_extractor:
            params = params + [model.extractor.weights[3], model.extractor.biases[3]]
        self.optimizer = Adam(params, config.lr, config.betas, config.weight_decay, config.adam_eps)
        self.feature_cache: dict = {}
        self.step = 0
        self.degenerate_count = 0

    @property
    def caches_normal_features(self) -> bool:
        return not self.config.fine_tune_extractor and self.config.augmentation == "none"


def _normal_features(state: TrainState, images: list[Image], keys) -> np.ndarray:
    ex = state.model.extractor
    if keys is None or not state.caches_normal_features:
        return featext.patch_features(images, ex)
    missing = [i for i, k in enumerate(keys) if k not in state.feature_cache]
    if missing:
        fresh = featext.patch_features([images[i] for i in missing], ex)
        for i, f in zip(missing, fresh):
            state.feature_cache[keys[i]] = f
    return np.stack([state.feature_cache[k] for k in keys])


def train_step(images: list[Image], state: TrainState, keys=None) -> tuple[TrainState, float]:
    """One optimisation step on a batch of normal images.

    ``keys`` optionally identify the images so their (deterministic) normal
    features can be cached across epochs when the extractor is frozen.
    """
    if not images:
        raise InvalidArgumentError("empty batch")
    cfg = state.config
    model = state.model
    rng = state.rng
    images = _augment(images, cfg.augmentation, rng)
    if cfg.augmentation != "none":
        keys = None

    synthesized = []
    if cfg.r > 0.0:
        for im in images:
            result = imagesynth.synthesize_with_retries(im, state.synth, rng)
            if result.degenerate:
                state.degenerate_count += 1
            else:
                synthesized.append(result.image)

    fine_tune = cfg.fine_tune_extractor
    if fine_tune:
        f_x, cache_x = featext.patch_features_with_cache(images, model.extractor)
    else:
        f_x = _normal_features(state, images, keys)
    grids = [(f_x, 0)]
    cache_n = None
    if synthesized:
        if fine_tune:
            f_n, cache_n = featext.patch_features_with_cache(synthesized, model.extractor)
        else:
            f_n = featext.patch_features(synthesized, model.extractor)
        grids.append((f_n, 1))
    if cfg.sigma > 0.0:
        f_a = featsynth.add_feature_noise(f_x, featsynth.GaussianNoiseParams(0.0, cfg.sigma), rng)
        grids.append((f_a, 1))

    c = f_x.shape[-1]
    dtype = model.classifier.weights[0].dtype
    feats = np.concatenate([g.reshape(-1, c) for g, _ in grids]).astype(dtype, copy=False)
    targets = np.concatenate([np.full(g[..., 0].size, t, dtype=np.intp) for g, t in grids])
    loss, grads, g_in = loss_and_grads(model.classifier, feats, targets)
    if not math.isfinite(loss):
        raise TrainingDivergenceError(
            f"non-finite loss {loss} at step {state.step}", step=state.step, loss=loss
        )

    if fine_tune:
        sizes = [g.size for g, _ in grids]
        parts = np.split(g_in, np.cumsum(sizes)[:-1] // c)
        g_x = parts[0].reshape(f_x.shape)
        if cfg.sigma > 0.0:
            g_x = g_x + parts[-1].reshape(f_x.shape)
        gw, gb = featext.last_stage_grads(g_x, cache_x, model.extractor)
        if cache_n is not None:
            gw_n, gb_n = featext.last_stage_grads(parts[1].reshape(f_n.shape), cache_n, model.extractor)
            gw, gb = gw + gw_n, gb + gb_n
        grads = grads + [gw, gb]

    state.optimizer.step(grads)
    state.step += 1
    return state, loss


def train(dataset, config: TrainConfig | None = None, on_epoch=None) -> DiscriminatorModel:
    """Train on the normal images of ``dataset`` for ``config.epochs`` epochs.

    ``dataset`` must expose ``__len__``, ``labels`` and ``load(i)``. Any item
    labelled anomalous is a data error: only normal items may be read here.
    ``on_epoch(epoch, mean_loss)`` is called after every epoch.
    """
    config = config or TrainConfig()
    n = len(dataset)
    if n == 0:
        raise DataError("training set is empty")
    if np.any(np.asarray(dataset.labels) != 0):
        raise DataError("training set contains anomalous items")
    if n < config.batch_size:
        raise DataError(f"training set has {n} items, fewer than batch size {config.batch_size}")

    model = DiscriminatorModel.initial(config)
    if config.epochs == 0:
        return model
    if config.fine_tune_extractor:
        model.extractor = model.extractor.copy()
    state = TrainState(model, config)
    for epoch in range(config.epochs):
        order = state.rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = [int(i) for i in order[start : start + config.batch_size]]
            images = [dataset.load(i) for i in idx]
            _, loss = train_step(images, state, keys=idx)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        model.history.append(mean_loss)
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, config.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return model


# ---------------------------------------------------------------------------
# inference


@dataclass(eq=False)
class AnomalyScore:
    image_id: str
    score: float
    score_map: np.ndarray


def score_maps(images, model: DiscriminatorModel, batch_size: int = 16) -> np.ndarray:
    """Positive-class probability maps ``(n, h, w)`` for a list of images."""
    out = []
    for start in range(0, len(images), batch_size):
        feats = featext.patch_features(images[start : start + batch_size], model.extractor)
        out.append(classify(feats, model.classifier)[..., 1])
    return np.concatenate(out)


def anomaly_score(image: Image, model: DiscriminatorModel, image_id: str = "") -> AnomalyScore:
    smap = score_maps([image], model)[0]
    return AnomalyScore(image_id, float(smap.max()), smap)


def ensemble_score(scores) -> float:
    """Arithmetic mean of member scores (``AnomalyScore`` objects or floats)."""
    values = [s.score if isinstance(s, AnomalyScore) else float(s) for s in scores]
    if not values:
        raise InvalidArgumentError("ensemble needs at least one member score")
    return math.fsum(values) / len(values)
