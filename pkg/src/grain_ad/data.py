"""Datasets: directory loaders, normal/anomalous subset schemes, synthetic corpus.

Two on-disk layouts are understood.

``category-folders``
    ``root/<split>/<category>/<name>.png`` with ``<split>`` in ``train`` / ``test``,
    or ``root/<category>/<name>.png`` without split folders. Categories named
    ``good``, ``healthy``, ``normal`` or ``HY`` are normal (label 0), all
    others anomalous (label 1). An optional foreground mask for ``<name>.png``
    sits next to it as ``<name>_fg.png``.

``manifest``
    ``root/manifest.tsv``, UTF-8, one tab-separated record per line::

        <relative image path> <TAB> <label 0|1> <TAB> <category> [<TAB> <relative mask path>]

    Empty lines and lines starting with ``#`` are ignored.

Images are 8-bit PNG; masks are single-channel PNG with nonzero = foreground.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from grain_ad import noisegen
from grain_ad.errors import ConfigError, DataError
from grain_ad.image import (
    WORKING_SIZE,
    Image,
    from_uint8,
    read_mask_png,
    read_png,
    resize_image,
    write_mask_png,
    write_png,
)

NORMAL_NAMES = frozenset({"good", "healthy", "normal", "HY"})
MASK_SUFFIX = "_fg"
MANIFEST_NAME = "manifest.tsv"
DEFAULT_SPLIT_RATIO = 0.7


@dataclass
class Item:
    id: str
    label: int
    category: str = ""
    path: Path | None = None
    mask_path: Path | None = None
    split: str | None = None
    pixels: np.ndarray | None = None  # in-memory uint8 HxWx3
    mask: np.ndarray | None = None
    clean: np.ndarray | None = None
    defect_mask: np.ndarray | None = None


# Every Dataset.load call is reported to the active logs; tests use this to
# prove the training path never touches anomalous or held-out items.
_ACTIVE_LOGS: list[list] = []


@contextlib.contextmanager
def record_reads():
    """Collect ``(split, item id, label)`` for every image load inside the block."""
    entries: list = []
    _ACTIVE_LOGS.append(entries)
    try:
        yield entries
    finally:
        _ACTIVE_LOGS.remove(entries)


class Dataset:
    """Ordered list of items belonging to one split."""

    def __init__(self, items: list[Item], split: str | None = None, size: int = WORKING_SIZE):
        self.items = list(items)
        self.split = split
        self.size = size
        if split == "train" and any(it.label != 0 for it in self.items):
            raise DataError("train split may only contain normal (label 0) items")

    def __len__(self) -> int:
        return len(self.items)

    def __repr__(self) -> str:
        return f"Dataset(split={self.split!r}, n={len(self)}, positives={self.n_positive})"

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum()) if self.items else 0

    def load(self, i: int) -> Image:
        item = self.items[i]
        for entries in _ACTIVE_LOGS:
            entries.append((self.split, item.id, item.label))
        if item.pixels is not None:
            pixels = from_uint8(item.pixels)
        else:
            pixels = read_png(item.path)
        fg = None
        if item.mask is not None:
            fg = item.mask
        elif item.mask_path is not None:
            fg = read_mask_png(item.mask_path)
            if fg.shape != pixels.shape[:2]:
                raise DataError(f"mask {item.mask_path} does not match image {item.path}")
        image = Image(pixels, fg)
        return resize_image(image, self.size) if self.size else image

    def images(self) -> list[Image]:
        return [self.load(i) for i in range(len(self))]


# ---------------------------------------------------------------------------
# loading


def _check_readable(path: Path) -> None:
    try:
        with PILImage.open(path) as im:
            im.verify()
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def _pngs(folder: Path) -> list[Path]:
    return sorted(
        p for p in folder.iterdir()
        if p.is_file() and p.suffix.lower() == ".png" and not p.stem.endswith(MASK_SUFFIX)
    )


def _category_items(folder: Path, root: Path, split: str | None) -> list[Item]:
    items = []
    for cat_dir in sorted(p for p in folder.iterdir() if p.is_dir()):
        label = 0 if cat_dir.name in NORMAL_NAMES else 1
        for img in _pngs(cat_dir):
            _check_readable(img)
            mask = img.with_name(img.stem + MASK_SUFFIX + ".png")
            items.append(Item(
                id=img.relative_to(root).as_posix(),
                label=label,
                category=cat_dir.name,
                path=img,
                mask_path=mask if mask.is_file() else None,
                split=split,
            ))
    return items


def _manifest_items(root: Path) -> list[Item]:
    items = []
    text = (root / MANIFEST_NAME).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4) or cols[1] not in ("0", "1"):
            raise DataError(f"{root / MANIFEST_NAME}:{lineno}: malformed record {line!r}")
        path = root / cols[0]
        if not path.is_file():
            raise DataError(f"{root / MANIFEST_NAME}:{lineno}: missing image {path}")
        _check_readable(path)
        mask = root / cols[3] if len(cols) == 4 and cols[3] else None
        if mask is not None and not mask.is_file():
            raise DataError(f"{root / MANIFEST_NAME}:{lineno}: missing mask {mask}")
        items.append(Item(id=cols[0], label=int(cols[1]), category=cols[2], path=path, mask_path=mask))
    return items


def load_items(root: str | Path, layout: str = "auto") -> list[Item]:
    """Enumerate items under ``root`` in deterministic (lexicographic) order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if layout == "auto":
        layout = "manifest" if (root / MANIFEST_NAME).is_file() else "category-folders"
    if layout == "manifest":
        if not (root / MANIFEST_NAME).is_file():
            raise DataError(f"{root} has no {MANIFEST_NAME}")
        items = _manifest_items(root)
    elif layout == "category-folders":
        splits = [s for s in ("train", "test") if (root / s).is_dir()]
        if splits:
            items = [it for s in splits for it in _category_items(root / s, root, s)]
        else:
            items = _category_items(root, root, None)
    else:
        raise DataError(f"unknown dataset layout {layout!r}")
    if not items:
        raise DataError(f"no images found under {root}")
    return items


def load_dataset(
    root: str | Path,
    layout: str = "auto",
    split_ratio: float = DEFAULT_SPLIT_RATIO,
    seed: int = 0,
    scheme: SubsetScheme | None = None,
    size: int = WORKING_SIZE,
) -> tuple[Dataset, Dataset]:
    """Load ``(train, test)``.

    Trees with ``train``/``test`` folders keep that split. Otherwise (or when a
    ``scheme`` is given) normal items are split per category at
    ``split_ratio`` and every anomalous item goes to test.
    """
    items = load_items(root, layout)
    if scheme is None and all(it.split is not None for it in items):
        train = [it for it in items if it.split == "train"]
        bad = [it.id for it in train if it.label != 0]
        if bad:
            raise DataError(f"anomalous items under train/: {bad[:3]}")
        return (
            Dataset(train, "train", size),
            Dataset([it for it in items if it.split == "test"], "test", size),
        )
    if scheme is None:
        scheme = SubsetScheme.from_labels(items)
    return apply_subset_scheme(items, scheme, split_ratio, seed, size=size)


# ---------------------------------------------------------------------------
# subset schemes


@dataclass(frozen=True)
class SubsetScheme:
    name: str
    normal: frozenset
    anomalous: frozenset

    def __post_init__(self):
        overlap = set(self.normal) & set(self.anomalous)
        if overlap:
            raise ConfigError(f"categories both normal and anomalous: {sorted(overlap)}")

    def label(self, category: str) -> int:
        if category in self.normal:
            return 0
        if category in self.anomalous:
            return 1
        raise ConfigError(f"category {category!r} is not covered by scheme {self.name!r}")

    @classmethod
    def from_labels(cls, items: list[Item]) -> SubsetScheme:
        normal = {it.category for it in items if it.label == 0}
        anomalous = {it.category for it in items if it.label == 1}
        return cls("labels", frozenset(normal), frozenset(anomalous - normal))


# Grain categories: healthy (HY), broken (BN), attacked by pests (AP),
# black point / heated (BP, HD), sprouted (SD), fusarium & shrivelled (FS),
# mouldy (MY), impurities (IM).
SET1 = SubsetScheme(
    "set1", frozenset({"HY"}), frozenset({"BN", "AP", "BP", "HD", "SD", "FS", "MY", "IM"})
)
SET2 = SubsetScheme(
    "set2", frozenset({"HY", "BN", "AP", "BP", "HD"}), frozenset({"SD", "FS", "MY", "IM"})
)
SCHEMES = {"set1": SET1, "set2": SET2}


def apply_subset_scheme(
    items: list[Item],
    scheme: SubsetScheme,
    split_ratio: float = DEFAULT_SPLIT_RATIO,
    seed: int = 0,
    size: int = WORKING_SIZE,
) -> tuple[Dataset, Dataset]:
    """Relabel by ``scheme`` and split normal items per category.

    Each normal category contributes ``floor(split_ratio * n_cat)`` items to
    train; the shortfall against ``floor(split_ratio * n_normal)`` is handed
    out one item at a time to categories in seeded order. All anomalous items
    go to test.
    """
    if not 0.0 < split_ratio < 1.0:
        raise ConfigError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    rng = np.random.default_rng([seed, 0x53504C4954])
    relabeled = [replace(it, label=scheme.label(it.category)) for it in items]
    by_cat: dict[str, list[int]] = {}
    for i, it in enumerate(relabeled):
        if it.label == 0:
            by_cat.setdefault(it.category, []).append(i)
    cats = sorted(by_cat)
    quota = {c: math.floor(split_ratio * len(by_cat[c])) for c in cats}
    n_normal = sum(len(v) for v in by_cat.values())
    remainder = math.floor(split_ratio * n_normal) - sum(quota.values())
    for k in rng.permutation(len(cats))[: max(remainder, 0)]:
        quota[cats[k]] += 1

    train_idx = set()
    for c in cats:
        members = by_cat[c]
        order = rng.permutation(len(members))
        train_idx.update(members[j] for j in order[: quota[c]])
    train = [replace(it, split="train") for i, it in enumerate(relabeled) if i in train_idx]
    test = [replace(it, split="test") for i, it in enumerate(relabeled) if i not in train_idx]
    return Dataset(train, "train", size), Dataset(test, "test", size)


# ---------------------------------------------------------------------------
# synthetic corpus

DEFECT_TYPES = ("spot", "hole", "discoloration")


@dataclass
class CorpusParams:
    n_train: int = 300
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    size: int = WORKING_SIZE
    defect_types: tuple[str, ...] = DEFECT_TYPES

    def __post_init__(self):
        self.defect_types = tuple(self.defect_types)
        if self.n_train < 1:
            raise ConfigError("synthetic corpus needs at least one training image")
        if min(self.n_test_normal, self.n_test_anomalous) < 0:
            raise ConfigError("negative test counts")
        if self.n_test_anomalous and not self.defect_types:
            raise ConfigError("anomalies requested but no defect types enabled")
        unknown = set(self.defect_types) - set(DEFECT_TYPES)
        if unknown:
            raise ConfigError(f"unknown defect types {sorted(unknown)}")


@dataclass(eq=False)
class Rendering:
    pixels: np.ndarray  # uint8
    foreground: np.ndarray
    clean: np.ndarray | None = None
    defect_mask: np.ndarray | None = None
    defect: str | None = None


_BACKGROUND = np.array([0.06, 0.06, 0.07])


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def render_kernel(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    """Float rendering of one healthy kernel on a dark plate."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-0.04, 0.04) * size
    cy = size / 2 + rng.uniform(-0.04, 0.04) * size
    a = rng.uniform(0.33, 0.40) * size
    b = rng.uniform(0.20, 0.25) * size
    theta = rng.uniform(-0.25, 0.25)
    u = ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / a
    v = (-(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)) / b
    rho = np.sqrt(u * u + v * v)
    fg = rho <= 1.0

    base = np.array([0.80, 0.60, 0.34]) + rng.uniform(-0.03, 0.03, size=3)
    shade = 0.80 + 0.25 * np.sqrt(np.clip(1.0 - rho**2, 0.0, 1.0))
    grain = noisegen.perlin_field(size, size, max(size // 8, 1), int(rng.integers(2**62))).values
    fine = noisegen.perlin_field(size, size, max(size // 32, 1), int(rng.integers(2**62))).values
    crease = 1.0 - 0.18 * np.exp(-(v / 0.06) ** 2) * (np.abs(u) < 0.85)
    lum = shade * crease * (1.0 + 0.05 * grain + 0.025 * fine)
    kernel = np.clip(base[None, None, :] * lum[:, :, None], 0.0, 1.0)
    pixels = np.where(fg[:, :, None], kernel, _BACKGROUND[None, None, :])
    geom = {"cx": cx, "cy": cy, "a": a, "b": b, "theta": theta, "u": u, "v": v, "rho": rho}
    return pixels, fg, geom


def _random_inside(geom, rng, max_rho=0.7):
    r = max_rho * np.sqrt(rng.uniform(0, 1))
    phi = rng.uniform(0, 2 * np.pi)
    u, v = r * np.cos(phi), r * np.sin(phi)
    t = geom["theta"]
    x = geom["cx"] + u * geom["a"] * np.cos(t) - v * geom["b"] * np.sin(t)
    y = geom["cy"] + u * geom["a"] * np.sin(t) + v * geom["b"] * np.cos(t)
    return x, y


def inject_defect(pixels: np.ndarray, fg: np.ndarray, geom: dict, kind: str, rng: np.random.Generator):
    """Return ``(pixels, foreground, defect_mask)`` with one defect painted in.

    Blend weights inside the defect mask never drop below 0.35 and target
    colours are far from the kernel colour, so every masked pixel changes
    after 8-bit quantisation while unmasked pixels are left untouched.
    """
    size = pixels.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = pixels.copy()
    fg_out = fg.copy()
    if kind == "spot":
        mask = np.zeros_like(fg)
        for _ in range(int(rng.integers(1, 3))):
            x, y = _random_inside(geom, rng)
            rad = rng.uniform(0.035, 0.06) * size
            d = np.hypot(xx - x, yy - y) / rad
            spot = (d <= 1.0) & fg
            alpha = 0.35 + 0.55 * (1.0 - _smoothstep(0.4, 1.0, d))
            colour = np.array([0.16, 0.12, 0.08]) * rng.uniform(0.7, 1.3)
            out = np.where(spot[:, :, None], alpha[:, :, None] * colour + (1 - alpha[:, :, None]) * out, out)
            mask |= spot
    elif kind == "hole":
        # a bite out of the rim (broken / pest-eaten kernel) with a dark edge
        phi = rng.uniform(0, 2 * np.pi)
        t = geom["theta"]
        ex = geom["cx"] + 0.95 * geom["a"] * np.cos(phi) * np.cos(t) - 0.95 * geom["b"] * np.sin(phi) * np.sin(t)
        ey = geom["cy"] + 0.95 * geom["a"] * np.cos(phi) * np.sin(t) + 0.95 * geom["b"] * np.sin(phi) * np.cos(t)
        rad = rng.uniform(0.07, 0.10) * size
        d = np.hypot(xx - ex, yy - ey) / rad
        bite = (d <= 1.0) & fg
        rim = (d > 1.0) & (d <= 1.35) & fg
        out = np.where(bite[:, :, None], _BACKGROUND[None, None, :], out)
        out = np.where(rim[:, :, None], 0.45 * out + 0.55 * np.array([0.25, 0.17, 0.10]), out)
        fg_out = fg & ~bite
        mask = bite | rim
    elif kind == "discoloration":
        x, y = _random_inside(geom, rng, 0.5)
        rad = rng.uniform(0.08, 0.12) * size
        d = np.hypot(xx - x, yy - y) / rad
        patch = (d <= 1.0) & fg
        alpha = 0.45 + 0.45 * (1.0 - _smoothstep(0.3, 1.0, d))
        tint = np.array([0.55, 0.22, 0.12])
        out = np.where(patch[:, :, None], alpha[:, :, None] * tint + (1 - alpha[:, :, None]) * out, out)
        mask = patch
    else:
        raise ConfigError(f"unknown defect type {kind!r}")
    return np.clip(out, 0.0, 1.0), fg_out, mask


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_sample(size: int, rng: np.random.Generator, defect: str | None = None) -> Rendering:
    pixels, fg, geom = render_kernel(size, rng)
    clean = _quantize(pixels)
    if defect is None:
        return Rendering(clean, fg)
    defective, fg_d, mask = inject_defect(pixels, fg, geom, defect, rng)
    quant = _quantize(defective)
    # pixels outside the defect keep their exact clean bytes
    quant = np.where(mask[:, :, None], quant, clean)
    return Rendering(quant, fg_d, clean, mask, defect)


def generate_synthetic_corpus(params: CorpusParams | None = None, seed: int = 0, keep_clean: bool = False):
    """Render ``(train, test)`` datasets of synthetic kernels.

    Normals are healthy kernels; each anomaly is a healthy rendering with one
    defect injected, cycling through ``params.defect_types``. With
    ``keep_clean`` the paired clean rendering and the defect mask are kept on
    each anomalous item (``item.clean`` / ``item.defect_mask``).
    """
    params = params or CorpusParams()
    rng = np.random.default_rng([seed, 0x434F52505553])

    def make(prefix, n, split, defect_for=None):
        items = []
        for k in range(n):
            defect = defect_for(k) if defect_for else None
            r = render_sample(params.size, rng, defect)
            cat = defect or "good"
            item = Item(
                id=f"{split}/{cat}/{prefix}{k:04d}", label=int(defect is not None), category=cat,
                split=split, pixels=r.pixels, mask=r.foreground,
            )
            if keep_clean and defect is not None:
                item.clean = r.clean
                item.defect_mask = r.defect_mask
            items.append(item)
        return items

    train = make("n", params.n_train, "train")
    test = make("n", params.n_test_normal, "test")
    kinds = params.defect_types
    test += make("a", params.n_test_anomalous, "test", lambda k: kinds[k % len(kinds)])
    return Dataset(train, "train", params.size), Dataset(test, "test", params.size)


def write_dataset(dataset: Dataset, root: str | Path) -> None:
    """Write in-memory items in the ``category-folders`` layout (ids are relative paths)."""
    root = Path(root)
    for item in dataset.items:
        path = root / (item.id if item.id.endswith(".png") else item.id + ".png")
        path.parent.mkdir(parents=True, exist_ok=True)
        if item.pixels is None:
            raise DataError(f"item {item.id} has no in-memory pixels")
        write_png(path, item.pixels)
        if item.mask is not None:
            write_mask_png(path.with_name(path.stem + MASK_SUFFIX + ".png"), item.mask)
