"""Tabular offline Q-learning with capability-weighted sampling and eps-gated action availability."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .capability import CapabilityEstimate, transition_weights
from .dataset import DiscretizationSpec, default_discretization
from .env import N_ACTIONS
from .reward import RewardConfig, compute_rewards

QTABLE_TAG = "#chronicrl-qtable"
QTABLE_VERSION = 1
ACTION_SOURCES = ("executed", "proposed")


class QTableFormatError(Exception):
    pass


@dataclass
class TrainConfig:
    eta: float = 0.05
    gamma: float = 0.97
    iterations: int = 600
    batch_size: int = 512
    beta: float = 0.0
    eps_aware: bool = False
    eps_min: float = 0.0
    seed: int = 0
    # which logged action a transition is credited to: what ran, or what was recommended
    action_source: str = "executed"

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        _eps_min_vector(self.eps_min)
        if self.action_source not in ACTION_SOURCES:
            raise ValueError(f"action_source must be one of {ACTION_SOURCES}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if not isinstance(d["eps_min"], (int, float)):
            d["eps_min"] = list(d["eps_min"])
        return d


def _eps_min_vector(eps_min) -> np.ndarray:
    v = np.broadcast_to(np.asarray(eps_min, dtype=float), (N_ACTIONS,)).copy()
    if np.any((v < 0) | (v > 1)):
        raise ValueError("eps_min thresholds must lie in [0, 1]")
    return v


def available_actions(state_index: Sequence[int], eps_hat: float, eps_min=0.0) -> tuple:
    """Actions executable at ``state_index`` given estimated execution intensity.

    Thresholds gate only medication *changes*; both actions that keep the current
    level are always available, so the result is never empty.
    """
    current = int(state_index[1])
    thresholds = _eps_min_vector(eps_min)
    out = []
    for a in range(N_ACTIONS):
        if a // 2 == current or eps_hat >= thresholds[a]:
            out.append(a)
    return tuple(out)


def greedy_action(q_row: Sequence[float], current_med: int, available: Optional[Sequence[int]] = None) -> int:
    """Argmax over ``available``; ties go to (current med, no op), then the lowest index."""
    avail = range(N_ACTIONS) if available is None else available
    best = max(q_row[a] for a in avail)
    keep = 2 * int(current_med)
    if keep in avail and q_row[keep] == best:
        return keep
    for a in sorted(avail):
        if q_row[a] == best:
            return a
    raise ValueError("empty availability set")


@dataclass
class QTable:
    discretization: DiscretizationSpec
    q: np.ndarray
    counts: np.ndarray
    data_counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __getitem__(self, state_index) -> np.ndarray:
        return self.q[self.discretization.flat_index(state_index)]

    def seen(self, state_index) -> bool:
        return bool(self.data_counts[self.discretization.flat_index(state_index)].sum() > 0)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.q).tobytes())
        h.update(np.ascontiguousarray(self.counts).tobytes())
        return h.hexdigest()

    def save(self, path) -> str:
        disc = json.dumps(self.discretization.to_dict(), sort_keys=True, separators=(",", ":"))
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":"), default=str)
        lines = []
        for s in range(self.q.shape[0]):
            vals = " ".join(repr(float(v)) for v in self.q[s])
            cnt = " ".join(str(int(c)) for c in self.counts[s])
            dcnt = " ".join(str(int(c)) for c in self.data_counts[s])
            lines.append(f"{s},{vals},{cnt},{dcnt}")
        body = "\n".join(lines) + "\n"
        digest = hashlib.sha256(body.encode()).hexdigest()
        with open(os.fspath(path), "w", encoding="utf-8") as fh:
            fh.write(f"{QTABLE_TAG} version={QTABLE_VERSION} n_states={self.q.shape[0]} sha256={digest}\n")
            fh.write(disc + "\n")
            fh.write(meta + "\n")
            fh.write(body)
        return digest

    @classmethod
    def load(cls, path) -> "QTable":
        with open(os.fspath(path), encoding="utf-8") as fh:
            head = fh.readline().split()
            if not head or head[0] != QTABLE_TAG:
                raise QTableFormatError(f"{path}: not a chronicrl q-table")
            fields_ = dict(t.split("=", 1) for t in head[1:])
            if fields_.get("version") != str(QTABLE_VERSION):
                raise QTableFormatError(f"{path}: q-table version {fields_.get('version')!r}")
            d = json.loads(fh.readline())
            meta = json.loads(fh.readline())
            body = fh.read()
        if hashlib.sha256(body.encode()).hexdigest() != fields_.get("sha256"):
            raise QTableFormatError(f"{path}: q-table digest mismatch")
        disc = DiscretizationSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})
        n = int(fields_["n_states"])
        q = np.zeros((n, N_ACTIONS))
        counts = np.zeros((n, N_ACTIONS), dtype=np.int64)
        dcounts = np.zeros((n, N_ACTIONS), dtype=np.int64)
        rows = body.strip("\n").split("\n") if body.strip() else []
        if len(rows) != n:
            raise QTableFormatError(f"{path}: expected {n} rows, found {len(rows)}")
        for line in rows:
            s, vals, cnt, dcnt = line.split(",")
            s = int(s)
            q[s] = [float(v) for v in vals.split()]
            counts[s] = [int(v) for v in cnt.split()]
            dcounts[s] = [int(v) for v in dcnt.split()]
        return cls(disc, q, counts, dcounts, meta)


def sample_batch(weights: np.ndarray, batch_size: int, rng: np.random.Generator, cdf: Optional[np.ndarray] = None) -> np.ndarray:
    """Record indices drawn i.i.d. with replacement, probability proportional to ``weights``."""
    if cdf is None:
        weights = np.asarray(weights, dtype=float)
        if weights.size == 0:
            raise ValueError("cannot sample from an empty dataset")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)) or weights.sum() <= 0:
            raise ValueError("sampling weights must be finite, non-negative and not all zero")
        cdf = np.cumsum(weights)
        cdf = cdf / cdf[-1]
    idx = np.searchsorted(cdf, rng.random(batch_size), side="right")
    return np.minimum(idx, cdf.size - 1)


def record_weights(dataset, estimate: Optional[CapabilityEstimate], beta: float) -> np.ndarray:
    if beta > 0 and estimate is None:
        raise ValueError("beta > 0 requires a capability estimate")
    if estimate is None:
        return np.ones(len(dataset.records))
    w = transition_weights(estimate, beta)
    missing = {r.archetype_id for r in dataset.records} - set(w)
    if missing:
        raise ValueError(f"capability estimate lacks archetypes {sorted(missing)}")
    return np.array([w[r.archetype_id] for r in dataset.records], dtype=float)


def q_update(q, s: int, a: int, r: float, s2: int, terminal: bool, eta: float, gamma: float,
             available: Optional[Sequence[int]] = None) -> float:
    """One in-place update of ``q[s][a]``; returns the TD error."""
    if terminal:
        target = r
    else:
        row = q[s2]
        target = r + gamma * (max(row) if available is None else max(row[k] for k in available))
    td = target - q[s][a]
    q[s][a] += eta * td
    return td


def _q_learning_loop(q, s, a, r, s2, term, avail, batches, eta, gamma, counts):
    """Sequential per-record updates on the live table.  Returns the mean |TD error| per batch."""
    trace = []
    for batch in batches:
        tot = 0.0
        for j in batch:
            sj = s[j]
            aj = a[j]
            if term[j]:
                target = r[j]
            else:
                row = q[s2[j]]
                av = avail[j]
                if av is None:
                    target = r[j] + gamma * max(row)
                else:
                    target = r[j] + gamma * max([row[k] for k in av])
            qs = q[sj]
            td = target - qs[aj]
            qs[aj] += eta * td
            counts[sj][aj] += 1
            tot += abs(td)
        trace.append(tot / len(batch))
    return trace


class OfflineQLearner(BaseEstimator):
    """Tabular offline Q-learning over a recorded transition dataset.

    Transitions are drawn in proportion to ``exp(beta * kappa)`` of the archetype
    that generated them; the update itself carries no extra weight.  With
    ``eps_aware`` the state carries the data-generation eps bucket and the
    bootstrap max runs over the actions available under ``eps_min``.
    """

    def __init__(self, reward="tiered", eta=0.05, gamma=0.97, n_iterations=600, batch_size=512,
                 beta=0.0, eps_aware=False, eps_min=0.0, action_source="executed", discretization=None,
                 random_state=0):
        self.reward = reward
        self.eta = eta
        self.gamma = gamma
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.beta = beta
        self.eps_aware = eps_aware
        self.eps_min = eps_min
        self.action_source = action_source
        self.discretization = discretization
        self.random_state = random_state

    @classmethod
    def from_config(cls, train: TrainConfig, reward: RewardConfig, discretization=None) -> "OfflineQLearner":
        return cls(reward=reward, eta=train.eta, gamma=train.gamma, n_iterations=train.iterations,
                   batch_size=train.batch_size, beta=train.beta, eps_aware=train.eps_aware,
                   eps_min=train.eps_min, action_source=train.action_source, discretization=discretization,
                   random_state=train.seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.eta, self.gamma, self.n_iterations, self.batch_size, self.beta,
                           self.eps_aware, self.eps_min, int(self.random_state), self.action_source)

    def _reward_config(self) -> RewardConfig:
        return self.reward if isinstance(self.reward, RewardConfig) else RewardConfig(kind=self.reward)

    def fit(self, dataset, capability: Optional[CapabilityEstimate] = None):
        cfg = self._train_config()
        rcfg = self._reward_config()
        if len(dataset.records) == 0:
            raise ValueError("cannot train on an empty dataset")
        disc = self.discretization or default_discretization(dataset.condition, cfg.eps_aware)
        if cfg.eps_aware and not disc.eps_aware:
            disc = disc.with_eps()
        if not cfg.eps_aware and disc.eps_aware:
            raise ValueError("eps-naive learner given an eps-aware discretization")

        s_idx, s2_idx = dataset.reencode(disc)
        s = [disc.flat_index(x) for x in s_idx]
        s2 = [disc.flat_index(x) for x in s2_idx]
        col = "action_index" if cfg.action_source == "executed" else "proposed_index"
        acts = [getattr(rec, col) for rec in dataset.records]
        term = [bool(rec.terminal) for rec in dataset.records]
        rewards = compute_rewards(dataset, rcfg).tolist()

        eps_min = _eps_min_vector(cfg.eps_min)
        if cfg.eps_aware and np.any(eps_min > 0):
            avail = [available_actions(x, rec.eps, eps_min) for x, rec in zip(s2_idx, dataset.records)]
            avail = [None if len(av) == N_ACTIONS else av for av in avail]
        else:
            avail = [None] * len(s)

        weights = record_weights(dataset, capability, cfg.beta)
        cdf = np.cumsum(weights)
        cdf = cdf / cdf[-1]
        rng = np.random.default_rng(cfg.seed)
        batches = [sample_batch(None, cfg.batch_size, rng, cdf).tolist() for _ in range(cfg.iterations)]

        n = disc.n_states
        q = [[0.0] * N_ACTIONS for _ in range(n)]
        counts = [[0] * N_ACTIONS for _ in range(n)]
        trace = _q_learning_loop(q, s, acts, rewards, s2, term, avail, batches, cfg.eta, cfg.gamma, counts)

        data_counts = np.zeros((n, N_ACTIONS), dtype=np.int64)
        np.add.at(data_counts, (np.asarray(s), np.asarray(acts)), 1)
        self.discretization_ = disc
        self.q_table_ = QTable(
            disc, np.asarray(q, dtype=float), np.asarray(counts, dtype=np.int64), data_counts,
            meta={
                "condition": dataset.condition,
                "reward": rcfg.to_dict(),
                "train": cfg.to_dict(),
                "capability": None if capability is None else capability.kappa,
                "dataset_records": len(dataset.records),
                "dataset_sha256": dataset.header.get("records_sha256"),
            },
        )
        self.td_trace_ = np.asarray(trace)
        self.eps_min_ = eps_min
        return self

    def action_for(self, state_index: tuple, eps_hat: float = 1.0) -> int:
        check_is_fitted(self, "q_table_")
        avail = available_actions(state_index, eps_hat, self.eps_min_)
        return greedy_action(self.q_table_[state_index], state_index[1], avail)

    def predict(self, X, eps_hat=1.0):
        """Greedy action index per row of bucket tuples."""
        check_is_fitted(self, "q_table_")
        X = np.atleast_2d(np.asarray(X, dtype=np.int64))
        return np.array([self.action_for(tuple(row), eps_hat) for row in X], dtype=np.int64)


def train(dataset, reward_config: RewardConfig, train_config: TrainConfig,
          capability_estimate: Optional[CapabilityEstimate] = None, discretization=None) -> OfflineQLearner:
    learner = OfflineQLearner.from_config(train_config, reward_config, discretization)
    return learner.fit(dataset, capability_estimate)
