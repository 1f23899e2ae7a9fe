"""Seed plumbing shared by every module."""

import numpy as np


def child_seed(seed, *keys):
    """Derive an independent integer seed from ``seed`` and a path of keys."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def child_rng(seed, *keys):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)
