"""Shared fixtures: random SPD generators and a workload sampler."""

import numpy as np


def random_spd(n: int, cond: float, rng) -> np.ndarray:
    """Random SPD matrix with log-spaced eigenvalues in [1/cond, 1]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.logspace(-np.log10(cond), 0, n) if n > 1 else np.ones(1)
    a = (q * eig) @ q.T
    return (a + a.T) / 2
