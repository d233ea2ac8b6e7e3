"""Seed-stream plumbing.

Every patient gets its own pair of generators derived from
``(seed, namespace, patient_id)``: one for the patient's physiology and one
for whoever is choosing actions.  Keeping the two apart means the same patient
sees the same adherence/noise draws no matter which policy treats them.
"""
from __future__ import annotations

import zlib

import numpy as np


def _tag(namespace: str) -> int:
    return zlib.crc32(namespace.encode("utf-8"))


def seed_sequence(seed: int, namespace: str, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag(namespace), *map(int, key)))


def patient_streams(seed: int, namespace: str, patient_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Return ``(env_rng, policy_rng)`` for one patient."""
    env_ss, policy_ss = seed_sequence(seed, namespace, patient_id).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(policy_ss)


def generator(seed: int, namespace: str, *key: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, namespace, *key))
