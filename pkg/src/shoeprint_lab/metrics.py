"""Age-estimation metrics, regression losses and the gender classification report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class EvaluationBatch:
    actual: np.ndarray
    predicted: np.ndarray

    def __init__(self, actual, predicted):
        a = np.asarray(actual, dtype=np.float64).ravel()
        p = np.asarray(predicted, dtype=np.float64).ravel()
        if a.shape != p.shape:
            raise ValueError(f"actual has {a.size} values, predicted has {p.size}")
        if a.size < 1:
            raise ValueError("an evaluation batch needs at least one sample")
        object.__setattr__(self, "actual", a)
        object.__setattr__(self, "predicted", p)

    @property
    def deltas(self) -> np.ndarray:
        return np.abs(self.actual - self.predicted)

    def __len__(self) -> int:
        return self.actual.size

    def rounded(self) -> "EvaluationBatch":
        """Predictions rounded half-to-even to whole years (sensitivity checks only)."""
        return EvaluationBatch(self.actual, np.round(self.predicted))


@dataclass(frozen=True)
class ClfConfig:
    J: int = 2
    epsilon: float = 0.1
    strict_band: bool = True

    def __post_init__(self):
        if self.J < 0 or int(self.J) != self.J:
            raise ValueError("J must be a non-negative integer")
        if self.strict_band and not 0.0001 <= self.epsilon <= 0.3:
            raise ValueError(f"epsilon {self.epsilon} outside [0.0001, 0.3]; pass strict_band=False to override")


# --------------------------------------------------------------------------
# cumulative scores
# --------------------------------------------------------------------------

def cs_score(batch: EvaluationBatch, j: float) -> float:
    """Percentage of samples whose absolute error is at most ``j`` years."""
    return 100.0 * np.count_nonzero(batch.deltas <= j) / len(batch)


def cs_curve(batch: EvaluationBatch, j_max: int = 10) -> list[float]:
    return [cs_score(batch, j) for j in range(j_max + 1)]


def mcs_score(batch_or_cs, J: int) -> float:
    """Mean of CS_0..CS_J, from a batch or from precomputed CS values."""
    if isinstance(batch_or_cs, EvaluationBatch):
        cs = cs_curve(batch_or_cs, J)
    else:
        cs = list(batch_or_cs)
        if len(cs) < J + 1:
            raise ValueError(f"MCS-{J} needs {J + 1} CS values, got {len(cs)}")
    return float(sum(cs[: J + 1]) / (J + 1))


def mae(batch: EvaluationBatch) -> float:
    return float(batch.deltas.mean())


def percent_accuracy(batch: EvaluationBatch, age_range: tuple[float, float]) -> float:
    """``100 * (1 - MAE / range width)``, clamped to [0, 100].

    A surrogate score; it is not comparable to any published "% accuracy".
    """
    lo, hi = age_range
    if not hi > lo:
        raise ValueError(f"degenerate age range {age_range}")
    return float(np.clip(100.0 * (1.0 - mae(batch) / (hi - lo)), 0.0, 100.0))


# --------------------------------------------------------------------------
# losses: each returns (loss, gradient w.r.t. predictions)
# --------------------------------------------------------------------------

def clf_loss(batch: EvaluationBatch, cfg: ClfConfig) -> tuple[float, np.ndarray]:
    """Linear-in-epsilon inside ``J`` years, cubic outside.

    ``E_i = d_i * eps`` for ``d_i <= J`` and ``d_i**3 + eps`` otherwise;
    the loss is the mean of ``E_i``.
    """
    diff = batch.predicted - batch.actual
    d = np.abs(diff)
    inside = d <= cfg.J
    e = np.where(inside, d * cfg.epsilon, d ** 3 + cfg.epsilon)
    n = d.size
    # np.sign gives 0 at d == 0, the chosen subgradient
    slope = np.where(inside, cfg.epsilon, 3.0 * d ** 2)
    grad = np.sign(diff) * slope / n
    return float(e.mean()), grad


def clf_branches(batch: EvaluationBatch, cfg: ClfConfig) -> bytes:
    """Fingerprint of which piece of the loss each sample sits on."""
    diff = batch.predicted - batch.actual
    return (np.sign(diff).astype(np.int8) * (1 + (np.abs(diff) > cfg.J))).tobytes()


def mse_loss(batch: EvaluationBatch) -> tuple[float, np.ndarray]:
    diff = batch.predicted - batch.actual
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Categorical cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.intp).ravel()
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"{labels.size} labels for {n} logit rows")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# --------------------------------------------------------------------------
# random baseline
# --------------------------------------------------------------------------

def random_baseline(n: int, age_range: tuple[int, int], seed: int) -> np.ndarray:
    """Uniform integer ages in ``[min, max]`` (inclusive), reproducible per seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = int(age_range[0]), int(age_range[1])
    if hi < lo:
        raise ValueError(f"invalid age range {age_range}")
    return np.random.default_rng(seed).integers(lo, hi + 1, size=n).astype(np.float64)


# --------------------------------------------------------------------------
# classification report
# --------------------------------------------------------------------------

GENDERS = ("male", "female")


@dataclass(frozen=True)
class ClassificationCounts:
    """Binary confusion counts with ``male`` as class 0 and ``female`` as class 1."""

    male_as_male: int
    male_as_female: int
    female_as_male: int
    female_as_female: int

    @classmethod
    def from_labels(cls, actual, predicted) -> "ClassificationCounts":
        a = np.asarray(actual).ravel()
        p = np.asarray(predicted).ravel()
        if a.shape != p.shape:
            raise ValueError("label arrays differ in length")
        return cls(
            int(np.sum((a == 0) & (p == 0))),
            int(np.sum((a == 0) & (p == 1))),
            int(np.sum((a == 1) & (p == 0))),
            int(np.sum((a == 1) & (p == 1))),
        )

    @property
    def total(self) -> int:
        return self.male_as_male + self.male_as_female + self.female_as_male + self.female_as_female

    def tp_fp_fn(self, cls_name: str) -> tuple[int, int, int]:
        if cls_name == "male":
            return self.male_as_male, self.female_as_male, self.male_as_female
        if cls_name == "female":
            return self.female_as_female, self.male_as_female, self.female_as_male
        raise KeyError(cls_name)


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    zero_division: bool = False


def f1_from(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (0.0, True) if den == 0 else (num / den, False)


def classification_report(counts: ClassificationCounts) -> dict:
    if counts.total < 1:
        raise ValueError("classification report needs at least one sample")
    report: dict = {}
    for name in GENDERS:
        tp, fp, fn = counts.tp_fp_fn(name)
        p, zp = _ratio(tp, tp + fp)
        r, zr = _ratio(tp, tp + fn)
        report[name] = ClassScores(p, r, f1_from(p, r), zp or zr or (p + r == 0))
    report["accuracy"] = (counts.male_as_male + counts.female_as_female) / counts.total
    return report


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def metrics_to_csv(rows: Iterable[tuple[str, float]] | Mapping[str, float]) -> str:
    items = rows.items() if isinstance(rows, Mapping) else rows
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for name, value in items:
        w.writerow([name, f"{value:.4f}"])
    return buf.getvalue()


def parse_metric_names(spec: str) -> list[str]:
    """Expand ``mae,mcs2,cs0..cs10`` into individual metric names."""
    names: list[str] = []
    for part in (p.strip() for p in spec.split(",")):
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            prefix = lo.rstrip("0123456789")
            if not hi.startswith(prefix):
                raise ValueError(f"bad metric range {part!r}")
            a, b = int(lo[len(prefix):]), int(hi[len(prefix):])
            names.extend(f"{prefix}{j}" for j in range(a, b + 1))
        else:
            names.append(part)
    return names


def compute_metrics(batch: EvaluationBatch, names: Sequence[str],
                    age_range: tuple[float, float] = (7, 80)) -> list[tuple[str, float]]:
    out = []
    for name in names:
        if name == "mae":
            out.append((name, mae(batch)))
        elif name == "pct_acc":
            out.append((name, percent_accuracy(batch, age_range)))
        elif name.startswith("mcs"):
            out.append((name, mcs_score(batch, int(name[3:]))))
        elif name.startswith("cs"):
            out.append((name, cs_score(batch, int(name[2:]))))
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
