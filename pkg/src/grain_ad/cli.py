"""``grain-ad`` command line: synth, train, eval, score, ablate.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Precedence is command-line flags > config file > built-in defaults; unknown
keys are rejected. Without ``data_root`` (or the ``GRAIN_AD_DATA``
environment variable) every command works on the seeded synthetic corpus.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from grain_ad import data, imagesynth
from grain_ad.discriminator import DiscriminatorModel, TrainConfig, ensemble_score, score_maps, train
from grain_ad.errors import ConfigError, DataError, GrainADError
from grain_ad.image import Image, read_png, write_mask_png, write_png
from grain_ad.metrics import evaluate

log = logging.getLogger("grain_ad")

DATA_ENV = "GRAIN_AD_DATA"
ABLATION_ARMS = ("both", "image_only", "feature_only")
MIN_ABLATION_SEEDS = 3


@dataclass
class RunConfig:
    out: str = "runs"
    data_root: str = ""
    layout: str = "auto"
    scheme: str = "none"
    split_ratio: float = data.DEFAULT_SPLIT_RATIO
    split_seed: int = 0
    image_size: int = 256
    corpus_seed: int = 0
    n_train: int = 300
    n_test_normal: int = 50
    n_test_anomalous: int = 50
    defect_types: tuple[str, ...] = data.DEFECT_TYPES
    f1_threshold: float = 0.3
    n_samples: int = 8
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    # training keys mirror TrainConfig
    lr: float = 1e-3
    betas: tuple[float, ...] = (0.8, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 8
    seed: int = 0
    sigma: float = 0.025
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

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kwargs = {k: getattr(self, k) for k in names if hasattr(self, k)}
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def lines(self) -> list[str]:
        return [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from exc


def parse_assignments(pairs, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for key, raw in pairs:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(raw, getattr(defaults, key)))
    return cfg


def read_config_file(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    return pairs


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if os.environ.get(DATA_ENV):
        cfg.data_root = os.environ[DATA_ENV]
    if args.config:
        cfg = parse_assignments(read_config_file(args.config), cfg)
    flag_pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        flag_pairs.append(tuple(item.split("=", 1)))
    for name in ("seed", "out", "data_root", "epochs", "sigma", "r"):
        value = getattr(args, name, None)
        if value is not None:
            flag_pairs.append((name, str(value)))
    return parse_assignments(flag_pairs, cfg)


def load_splits(cfg: RunConfig):
    if cfg.data_root:
        scheme = None
        if cfg.scheme != "none":
            if cfg.scheme not in data.SCHEMES:
                raise ConfigError(f"unknown subset scheme {cfg.scheme!r}")
            scheme = data.SCHEMES[cfg.scheme]
        return data.load_dataset(
            cfg.data_root, cfg.layout, cfg.split_ratio, cfg.split_seed, scheme, cfg.image_size
        )
    params = data.CorpusParams(
        cfg.n_train, cfg.n_test_normal, cfg.n_test_anomalous, cfg.image_size, cfg.defect_types
    )
    return data.generate_synthetic_corpus(params, cfg.corpus_seed)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise GrainADError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise GrainADError(f"output directory {out} is not writable")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> Path:
    """Write ``(I_x, I_a, M'_b, I_n)`` previews for the first training images."""
    out = _out_dir(cfg) / "synth"
    out.mkdir(exist_ok=True)
    train_set, _ = load_splits(cfg)
    tcfg = cfg.train_config()
    synth = tcfg.synth_config()
    rng = np.random.default_rng([cfg.seed, 0x53594E5448])
    rows = ["index\tmask_area\tforeground_area\tratio\tbeta\tdegenerate"]
    for k in range(min(cfg.n_samples, len(train_set))):
        i_x = train_set.load(k)
        result = imagesynth.synthesize_with_retries(i_x, synth, rng)
        i_a = result.source or synth.source.sample(i_x.width, i_x.height, rng)
        write_png(out / f"{k:03d}_x.png", i_x.pixels)
        write_png(out / f"{k:03d}_a.png", i_a.pixels)
        write_mask_png(out / f"{k:03d}_mask.png", result.mask)
        write_png(out / f"{k:03d}_n.png", result.image.pixels)
        area = int(result.mask.sum())
        fg = int(i_x.foreground_or_full().sum())
        rows.append(f"{k}\t{area}\t{fg}\t{area / max(fg, 1):.6f}\t{result.beta:.6f}\t{int(result.degenerate)}")
    (out / "summary.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def loss_trend(losses: list[float]) -> str:
    """``decreasing`` when the least-squares slope is negative and the last epoch beats the first."""
    if len(losses) < 2:
        return "undefined"
    slope = np.polyfit(np.arange(len(losses)), np.asarray(losses), 1)[0]
    return "decreasing" if slope < 0 and losses[-1] < losses[0] else "not_decreasing"


def cmd_train(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    train_set, _ = load_splits(cfg)
    model = train(train_set, cfg.train_config())
    model_path = out / "model.bin"
    model.save(model_path)
    lines = ["# effective configuration", *cfg.lines(), "# per-epoch mean loss"]
    lines += [f"epoch {k + 1}\t{loss!r}" for k, loss in enumerate(model.history)]
    lines.append(f"loss_trend = {loss_trend(model.history)}")
    (out / "train_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return model_path


def _load_models(paths) -> list[DiscriminatorModel]:
    if not paths:
        raise ConfigError("at least one --model is required")
    return [DiscriminatorModel.load(p) for p in paths]


def cmd_eval(cfg: RunConfig, model_paths) -> Path:
    models = _load_models(model_paths)
    _, test_set = load_splits(cfg)
    if len(test_set) == 0:
        raise DataError("test split is empty")
    report = evaluate(models, test_set, cfg.f1_threshold)
    out = _out_dir(cfg)
    report.write(out)
    return out / "report.json"


def cmd_score(cfg: RunConfig, model_paths, images) -> str:
    models = _load_models(model_paths)
    rows = ["path\tscore"]
    for path in images:
        image = Image(read_png(path))
        member = [float(score_maps([image], m)[0].max()) for m in models]
        rows.append(f"{path}\t{ensemble_score(member)!r}")
    return "\n".join(rows) + "\n"


def arm_settings(arm: str, sigma: float, r: float) -> tuple[float, float]:
    if arm == "both":
        return sigma, r
    if arm == "image_only":
        return 0.0, r
    if arm == "feature_only":
        return sigma, 0.0
    raise ConfigError(f"unknown ablation arm {arm!r}")


def run_ablation(cfg: RunConfig, train_set, test_set, arms=ABLATION_ARMS):
    """AUROC for each (arm, seed); returns ``(rows, medians)``."""
    if cfg.sigma == 0.0 and cfg.r == 0.0:
        raise ConfigError("sigma = 0 and r = 0 leaves no anomaly supervision at all")
    if len(cfg.ablation_seeds) < MIN_ABLATION_SEEDS:
        raise ConfigError(f"ablation needs at least {MIN_ABLATION_SEEDS} seeds, got {len(cfg.ablation_seeds)}")
    rows = []
    for arm in arms:
        sigma, r = arm_settings(arm, cfg.sigma, cfg.r)
        if sigma == 0.0 and r == 0.0:
            raise ConfigError(f"arm {arm!r} would train without any simulated anomalies")
        for seed in cfg.ablation_seeds:
            model = train(train_set, cfg.train_config(sigma=sigma, r=r, seed=seed))
            report = evaluate(model, test_set, cfg.f1_threshold)
            rows.append((arm, seed, sigma, r, report.auroc))
            log.info("ablation %s seed %d auroc %.4f", arm, seed, report.auroc)
    medians = {arm: statistics.median(a for name, _, _, _, a in rows if name == arm) for arm in arms}
    return rows, medians


def cmd_ablate(cfg: RunConfig) -> Path:
    train_set, test_set = load_splits(cfg)
    rows, medians = run_ablation(cfg, train_set, test_set)
    lines = ["arm\tseed\tsigma\tr\tauroc"]
    lines += [f"{arm}\t{seed}\t{sigma!r}\t{r!r}\t{auc!r}" for arm, seed, sigma, r, auc in rows]
    for arm, med in medians.items():
        sigma, r = arm_settings(arm, cfg.sigma, cfg.r)
        lines.append(f"{arm}\tmedian\t{sigma!r}\t{r!r}\t{med!r}")
    path = _out_dir(cfg) / "ablation.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", dest="data_root", help=f"dataset root (default ${DATA_ENV} or synthetic)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="grain-ad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write anomaly-synthesis previews")
    p = sub.add_parser("train", parents=[common], help="train a discriminator")
    p.add_argument("--epochs", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--r", type=float)
    p = sub.add_parser("eval", parents=[common], help="evaluate model(s) on the test split")
    p.add_argument("--model", action="append", required=True, help="model file; repeat to ensemble")
    p = sub.add_parser("score", parents=[common], help="score individual PNG images")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("images", nargs="+")
    p = sub.add_parser("ablate", parents=[common], help="sigma / r ablation over several seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--r", type=float)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = build_config(args)
        if args.command == "synth":
            print(cmd_synth(cfg))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "eval":
            print(cmd_eval(cfg, args.model))
        elif args.command == "score":
            sys.stdout.write(cmd_score(cfg, args.model, args.images))
        elif args.command == "ablate":
            print(cmd_ablate(cfg))
    except GrainADError as exc:
        print(f"grain-ad: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
