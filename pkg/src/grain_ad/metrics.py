"""Image-level AUROC, macro F1 and the evaluation report."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from grain_ad.errors import InvalidArgumentError, UndefinedMetricError

F1_THRESHOLD = 0.3


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidArgumentError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidArgumentError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from average ranks; ties earn half credit."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both normal and anomalous items")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce(scores, labels) -> float:
    """O(n^2) pair count; the tally is kept in integers and divided exactly."""
    scores, labels = _check(scores, labels)
    pos = scores[labels == 1].tolist()
    neg = scores[labels == 0].tolist()
    if not pos or not neg:
        raise UndefinedMetricError("AUROC needs both normal and anomalous items")
    twice_credit = 0
    for p in pos:
        for q in neg:
            if p > q:
                twice_credit += 2
            elif p == q:
                twice_credit += 1
    return float(Fraction(twice_credit, 2 * len(pos) * len(neg)))


def confusion(scores, labels, threshold: float = F1_THRESHOLD) -> dict[str, int]:
    scores, labels = _check(scores, labels)
    pred = scores > threshold
    return {
        "tp": int(np.sum(pred & (labels == 1))),
        "fp": int(np.sum(pred & (labels == 0))),
        "tn": int(np.sum(~pred & (labels == 0))),
        "fn": int(np.sum(~pred & (labels == 1))),
    }


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def macro_f1(scores, labels, threshold: float = F1_THRESHOLD) -> float:
    """Unweighted mean of the F1 of class 0 and class 1; positive iff ``score > threshold``."""
    c = confusion(scores, labels, threshold)
    f1_pos = _f1(c["tp"], c["fp"], c["fn"])
    f1_neg = _f1(c["tn"], c["fn"], c["fp"])
    return (f1_pos + f1_neg) / 2.0


@dataclass
class EvalReport:
    ids: list[str]
    scores: list[float]
    labels: list[int]
    auroc: float | None
    macro_f1: float
    threshold: float
    confusion: dict[str, int]
    n_models: int = 1
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "n_items": len(self.ids),
            "n_anomalous": int(sum(self.labels)),
            "n_models": self.n_models,
            "auroc": self.auroc,
            "macro_f1": self.macro_f1,
            "threshold": self.threshold,
            "confusion": self.confusion,
            **self.extra,
        }

    def to_text(self) -> str:
        """Deterministic JSON summary; wall-clock time is kept out so re-runs match byte for byte."""
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def score_table(self) -> str:
        lines = ["id\tscore\tlabel"]
        lines += [f"{i}\t{s!r}\t{y}" for i, s, y in zip(self.ids, self.scores, self.labels)]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_text(), encoding="utf-8")
        (out / f"{stem}_scores.tsv").write_text(self.score_table(), encoding="utf-8")
        (out / f"{stem}_timing.txt").write_text(f"seconds\t{self.seconds:.3f}\n", encoding="utf-8")


def read_score_table(path: str | Path) -> tuple[list[str], list[float], list[int]]:
    ids, scores, labels = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        i, s, y = line.split("\t")
        ids.append(i)
        scores.append(float(s))
        labels.append(int(y))
    return ids, scores, labels


def report_from_scores(ids, scores, labels, threshold: float = F1_THRESHOLD, **kwargs) -> EvalReport:
    labels = [int(y) for y in labels]
    scores = [float(s) for s in scores]
    both = 0 < sum(labels) < len(labels)
    return EvalReport(
        ids=list(ids),
        scores=scores,
        labels=labels,
        auroc=auroc(scores, labels) if both else None,
        macro_f1=macro_f1(scores, labels, threshold),
        threshold=threshold,
        confusion=confusion(scores, labels, threshold),
        **kwargs,
    )


def evaluate(models, dataset, threshold: float = F1_THRESHOLD, batch_size: int = 16) -> EvalReport:
    """Score every test item with one model, or the mean score of several."""
    from grain_ad.discriminator import DiscriminatorModel, ensemble_score, score_maps

    if isinstance(models, DiscriminatorModel):
        models = [models]
    if not models:
        raise InvalidArgumentError("evaluate needs at least one model")
    if len(dataset) == 0:
        raise InvalidArgumentError("test set is empty")
    start = time.perf_counter()
    per_model = [[] for _ in models]
    for lo in range(0, len(dataset), batch_size):
        images = [dataset.load(i) for i in range(lo, min(lo + batch_size, len(dataset)))]
        for k, model in enumerate(models):
            maps = score_maps(images, model, batch_size)
            per_model[k].extend(float(m.max()) for m in maps)
    scores = [ensemble_score(member) for member in zip(*per_model)]
    seconds = time.perf_counter() - start
    return report_from_scores(
        dataset.ids, scores, dataset.labels.tolist(), threshold, n_models=len(models), seconds=seconds
    )
