"""Outcome-based archetype capability scores and the transition weights derived from them."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

TTC_BONUS = 5.0
# 1% HbA1c counts as 10 mmHg-equivalent units
UNIT_SCALE = {"HTN": 1.0, "T2D": 10.0}


class DegenerateCapabilityError(ValueError):
    """Group means cannot be z-normalized (fewer than two groups, or zero spread)."""


@dataclass
class CapabilityEstimate:
    archetypes: tuple
    scores: dict
    kappa: dict
    beta: float = 0.0
    n_patients: dict = field(default_factory=dict)

    @property
    def weights(self) -> dict:
        return transition_weights(self, self.beta)

    def ordering(self) -> tuple:
        return tuple(sorted(self.kappa, key=lambda a: -self.kappa[a]))

    def to_rows(self) -> list:
        w = self.weights
        return [
            {"archetype": a, "n_patients": self.n_patients.get(a, 0), "score": self.scores[a],
             "kappa": self.kappa[a], "beta": self.beta, "weight": w[a]}
            for a in self.archetypes
        ]

    def write_csv(self, path) -> None:
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    @classmethod
    def read_csv(cls, path) -> "CapabilityEstimate":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            archetypes=tuple(r["archetype"] for r in rows),
            scores={r["archetype"]: float(r["score"]) for r in rows},
            kappa={r["archetype"]: float(r["kappa"]) for r in rows},
            beta=float(rows[0]["beta"]) if rows else 0.0,
            n_patients={r["archetype"]: int(r["n_patients"]) for r in rows},
        )


def outcome_score(trajectory: Sequence, unit_scale: float = 1.0, ttc_bonus: float = TTC_BONUS) -> float:
    """Mean reduction from baseline over the trajectory's observations plus a TTC bonus.

    ``trajectory`` is one patient's records in week order.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    baseline = trajectory[0].baseline
    mean_red = sum(baseline - r.next_obs for r in trajectory) / len(trajectory)
    hit_ttc = any(r.hit_ttc for r in trajectory)
    return unit_scale * mean_red + ttc_bonus * hit_ttc


def zscore(values: Sequence[float]) -> np.ndarray:
    """Population z-score; raises on fewer than two values or zero spread."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise DegenerateCapabilityError("need at least two groups to normalize")
    sd = v.std()
    if not sd > 1e-12 * max(1.0, np.abs(v).max()):
        raise DegenerateCapabilityError("all group means are equal; capability is undefined")
    return (v - v.mean()) / sd


def kappa_from_scores(scores: dict, beta: float = 0.0, n_patients: Optional[dict] = None) -> CapabilityEstimate:
    names = tuple(sorted(scores))
    z = zscore([scores[a] for a in names])
    return CapabilityEstimate(names, dict(scores), dict(zip(names, map(float, z))), beta, dict(n_patients or {}))


def infer_kappa(dataset, beta: float = 0.0, unit_scale: Optional[float] = None,
                ttc_bonus: float = TTC_BONUS) -> CapabilityEstimate:
    if unit_scale is None:
        unit_scale = UNIT_SCALE.get(dataset.condition, 1.0)
    per_arch: dict = {}
    for traj in dataset.patients().values():
        per_arch.setdefault(traj[0].archetype_id, []).append(outcome_score(traj, unit_scale, ttc_bonus))
    if len(per_arch) < 2:
        raise DegenerateCapabilityError(f"dataset holds {len(per_arch)} archetype(s); need at least two")
    means = {a: float(np.mean(v)) for a, v in per_arch.items()}
    return kappa_from_scores(means, beta, {a: len(v) for a, v in per_arch.items()})


def transition_weights(estimate: CapabilityEstimate, beta: float) -> dict:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return {a: math.exp(beta * k) for a, k in estimate.kappa.items()}


class CapabilityEstimator(BaseEstimator):
    """Fit archetype capability from a transition dataset.

    After ``fit``: ``scores_``, ``kappa_`` and ``weights_`` are dicts keyed by
    archetype, and ``estimate_`` holds the full :class:`CapabilityEstimate`.
    """

    def __init__(self, beta=2.5, unit_scale=None, ttc_bonus=TTC_BONUS):
        self.beta = beta
        self.unit_scale = unit_scale
        self.ttc_bonus = ttc_bonus

    def fit(self, dataset, y=None):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        self.estimate_ = infer_kappa(dataset, self.beta, self.unit_scale, self.ttc_bonus)
        self.scores_ = self.estimate_.scores
        self.kappa_ = self.estimate_.kappa
        self.weights_ = self.estimate_.weights
        return self

    def transform(self, dataset):
        """Per-record sampling weight for ``dataset``."""
        check_is_fitted(self, "estimate_")
        w = self.weights_
        return np.array([w[r.archetype_id] for r in dataset.records], dtype=float)
