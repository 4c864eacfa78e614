"""Label-free reward allocation and the reward-fairness metric."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AllZeroAccuracy, DimensionMismatch, InvalidDistribution, NoAgreementAnywhere
from .nn import entropy

REWARD_SCHEMES = ("uniform", "confidence", "agreement")


def _simplex(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what} must be a non-negative vector summing to 1")
    return v


@dataclass
class MeritVector:
    m: np.ndarray

    def __post_init__(self):
        self.m = _simplex(self.m, "merit")


@dataclass
class RewardVector:
    r: np.ndarray
    scheme: str

    def __post_init__(self):
        self.r = _simplex(self.r, "reward")


@dataclass
class EvaluationBatch:
    """Per-model probabilities (K, S, C) with optional ensemble predictions and accuracies."""

    probs: np.ndarray
    ensemble_predictions: np.ndarray | None = None
    accuracies: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise DimensionMismatch("probs must be (models, samples, classes)")
        if self.ensemble_predictions is not None:
            self.ensemble_predictions = np.asarray(self.ensemble_predictions, dtype=np.int64)
            if self.ensemble_predictions.shape != (self.probs.shape[1],):
                raise DimensionMismatch("one ensemble prediction per sample is required")
        if self.accuracies is not None:
            self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
            if self.accuracies.shape != (self.probs.shape[0],):
                raise DimensionMismatch("one accuracy per model is required")
            if np.any((self.accuracies < 0) | (self.accuracies > 1)):
                raise ValueError("accuracies must lie in [0, 1]")

    @property
    def models(self) -> int:
        return self.probs.shape[0]


def ideal_merit(accuracies) -> MeritVector:
    a = np.asarray(accuracies, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("accuracies must be non-negative")
    total = a.sum()
    if total <= 0:
        raise AllZeroAccuracy("merit is undefined when every accuracy is zero")
    return MeritVector(a / total)


def reward_uniform(k: int) -> RewardVector:
    if k < 1:
        raise ValueError("need at least one client")
    return RewardVector(np.full(k, 1.0 / k), "uniform")


def reward_confidence(batch: EvaluationBatch) -> RewardVector:
    """r_k proportional to sum_n exp(-H_{k,n})."""
    p = batch.probs
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidDistribution("probability vectors must be non-negative and sum to 1")
    score = np.exp(-entropy(p)).sum(axis=1)
    return RewardVector(score / score.sum(), "confidence")


def agreement_counts(batch: EvaluationBatch) -> np.ndarray:
    if batch.ensemble_predictions is None:
        raise ValueError("agreement rewards need ensemble predictions")
    return (batch.probs.argmax(axis=-1) == batch.ensemble_predictions[None]).sum(axis=1)


def reward_agreement(batch: EvaluationBatch) -> RewardVector:
    """r_k proportional to how often model k's argmax matches the ensemble."""
    counts = agreement_counts(batch).astype(np.float64)
    if counts.sum() == 0:
        warnings.warn("no model agrees with the ensemble on any sample; using uniform rewards",
                      NoAgreementAnywhere, stacklevel=2)
        return RewardVector(np.full(batch.models, 1.0 / batch.models), "agreement")
    return RewardVector(counts / counts.sum(), "agreement")


def fairness(r, m) -> float:
    """1 - 0.5 * ||r - m||_1, in [0, 1]."""
    rv = r.r if isinstance(r, RewardVector) else np.asarray(r, dtype=np.float64)
    mv = m.m if isinstance(m, MeritVector) else np.asarray(m, dtype=np.float64)
    if rv.shape != mv.shape:
        raise DimensionMismatch(f"reward length {rv.shape} != merit length {mv.shape}")
    return float(min(1.0, max(0.0, 1.0 - 0.5 * np.abs(rv - mv).sum())))


def compute_rewards(batch: EvaluationBatch) -> dict[str, RewardVector]:
    return {
        "uniform": reward_uniform(batch.models),
        "confidence": reward_confidence(batch),
        "agreement": reward_agreement(batch),
    }


def fairness_rows(seed: int, alpha: float, batch: EvaluationBatch) -> list[dict]:
    """CSV-ready rows {seed, alpha, K, scheme, fairness, r_1..r_K, m_1..m_K}."""
    m = ideal_merit(batch.accuracies)
    rows = []
    for scheme, r in compute_rewards(batch).items():
        row = {"seed": seed, "alpha": alpha, "K": batch.models, "scheme": scheme, "fairness": fairness(r, m)}
        row.update({f"r_{k + 1}": float(v) for k, v in enumerate(r.r)})
        row.update({f"m_{k + 1}": float(v) for k, v in enumerate(m.m)})
        rows.append(row)
    return rows
