"""High-precision solve by iterative refinement around the analog solver.

Each cycle forms the residual ``r = b - A x`` digitally with the exact copy of
``A``, asks the crossbar for a low-precision correction ``z ~ A^-1 r`` and
accumulates ``x += z`` in double precision. Because the circuit input is
renormalized every cycle, converter resolution limits the contraction rate,
not the attainable accuracy.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .circuit import ConverterConfig, amc_solve
from .device import CrossbarState, DeviceConfig
from .errors import ContractError, DivergenceError, NonConvergenceError
from .numeric import DTYPE, FixedPointSpec, as_matrix

DEFAULT_MAX_ITERS = 200
DIVERGENCE_RISES = 5
DIVERGENCE_FACTOR = 10.0
SATURATION_BACKOFF = 0.25
MAX_BACKOFFS = 8


@dataclass
class RefinementReport:
    iterations: int
    final_residual: float
    residual_history: list[float]
    converged: bool
    tolerance: float
    total_bits: int
    saturations: int = 0


@dataclass
class SolveStats:
    """Thread-safe counters for analog solver activity."""

    leaf_solves: int = 0
    lp_vector_outputs: int = 0
    refinement_iterations_total: int = 0
    crossbar_programs: int = 0
    digital_scalar_solves: int = 0
    saturations: int = 0
    bits_used: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_lp(self, n: int):
        with self._lock:
            self.lp_vector_outputs += int(n)

    def add_program(self):
        with self._lock:
            self.crossbar_programs += 1

    def add_scalar(self, n: int = 1):
        with self._lock:
            self.digital_scalar_solves += int(n)

    def add_report(self, report: RefinementReport):
        with self._lock:
            self.leaf_solves += 1
            self.refinement_iterations_total += report.iterations
            self.saturations += report.saturations
            self.bits_used[report.total_bits] += 1

    @property
    def mean_iterations(self) -> float:
        return self.refinement_iterations_total / self.leaf_solves if self.leaf_solves else 0.0

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "leaf_solves": self.leaf_solves,
                "lp_vector_outputs": self.lp_vector_outputs,
                "refinement_iterations_total": self.refinement_iterations_total,
                "mean_iterations": self.mean_iterations,
                "crossbar_programs": self.crossbar_programs,
                "digital_scalar_solves": self.digital_scalar_solves,
                "saturations": self.saturations,
            }


def contraction_estimate(a, state: CrossbarState, dev: DeviceConfig) -> float:
    """Spectral radius of ``I - A_tilde^-1 A`` for the static crossbar matrix."""
    a_tilde = state.scale * state.normalized_matrix(dev)
    try:
        t = np.eye(a.shape[0]) - np.linalg.solve(a_tilde, a)
    except np.linalg.LinAlgError:
        return float("inf")
    return float(np.max(np.abs(np.linalg.eigvals(t))))


def hp_solve(a, b, state: CrossbarState, spec: FixedPointSpec, max_iters: int = DEFAULT_MAX_ITERS,
             dev: DeviceConfig | None = None, conv: ConverterConfig | None = None, rng=None,
             stats: SolveStats | None = None):
    """Refine ``A x = b`` to ``spec.tolerance()`` relative inf-norm residual.

    ``b`` may be a vector or an ``m x k`` block; columns refine independently
    (each is one leaf solve with its own report) but share circuit calls.
    Returns ``(x, report)`` for a vector and ``(X, [reports])`` for a block.

    Raises DivergenceError when a column's residual rises for
    ``DIVERGENCE_RISES`` consecutive cycles and exceeds ``DIVERGENCE_FACTOR``
    times its best value, and NonConvergenceError when ``max_iters`` cycles
    are spent.
    """
    dev = dev or DeviceConfig()
    conv = conv or ConverterConfig()
    a = as_matrix(a, square=True)
    b = np.asarray(b, dtype=DTYPE)
    single = b.ndim == 1
    rhs = b[:, None] if single else b
    if rhs.ndim != 2 or rhs.shape[0] != a.shape[0]:
        raise ContractError(f"right-hand side shape {b.shape} does not match {a.shape}")
    m, k = rhs.shape
    if m != state.size:
        raise ContractError("crossbar state size differs from the matrix")
    if max_iters < 1:
        raise ContractError("max_iters must be >= 1")
    bnorm = np.max(np.abs(rhs), axis=0)
    if np.any(bnorm == 0):
        raise ContractError("right-hand side must be non-zero")

    tol = spec.tolerance()
    x = np.zeros_like(rhs)
    r = rhs.copy()
    histories = [[] for _ in range(k)]
    best = np.full(k, np.inf)
    rises = np.zeros(k, dtype=int)
    gain = np.ones(k)
    sats = np.zeros(k, dtype=int)
    active = np.ones(k, dtype=bool)
    prev = np.ones(k)

    for it in range(1, max_iters + 1):
        idx = np.flatnonzero(active)
        z, saturated = amc_solve(state, r[:, idx], dev, conv, rng, gain=gain[idx])
        lp = idx.size
        backoffs = 0
        while np.any(saturated) and backoffs < MAX_BACKOFFS:
            bad = idx[saturated]
            sats[bad] += 1
            gain[bad] *= SATURATION_BACKOFF
            z_bad, sat_bad = amc_solve(state, r[:, bad], dev, conv, rng, gain=gain[bad])
            z[:, saturated] = z_bad
            lp += bad.size
            saturated = saturated.copy()
            saturated[saturated] = sat_bad
            backoffs += 1
        if stats is not None:
            stats.add_lp(lp)

        x[:, idx] += z
        r[:, idx] = rhs[:, idx] - a @ x[:, idx]
        res = np.max(np.abs(r[:, idx]), axis=0) / bnorm[idx]
        for j, col in enumerate(idx):
            histories[col].append(float(res[j]))
        rises[idx] = np.where(res > prev[idx], rises[idx] + 1, 0)
        prev[idx] = res
        best[idx] = np.minimum(best[idx], res)

        done = res <= tol
        diverging = (rises[idx] >= DIVERGENCE_RISES) & (res > DIVERGENCE_FACTOR * best[idx])
        if np.any(diverging):
            col = int(idx[np.argmax(diverging)])
            rep = _report(histories[col], False, tol, spec, sats[col])
            rho = contraction_estimate(a, state, dev)
            cond = float(np.linalg.cond(a))
            raise DivergenceError(
                f"refinement diverged after {it} cycles (cond(A) ~ {cond:.3g}, "
                f"contraction estimate ~ {rho:.3g})",
                report=rep, condition=cond, contraction=rho)
        active[idx[done]] = False
        if not np.any(active):
            break

    reports = [_report(h, h[-1] <= tol, tol, spec, s) for h, s in zip(histories, sats)]
    if np.any(active):
        col = int(np.flatnonzero(active)[0])
        raise NonConvergenceError(
            f"no convergence to {tol:.3g} within {max_iters} cycles "
            f"(residual {reports[col].final_residual:.3g})", report=reports[col])
    if stats is not None:
        for rep in reports:
            stats.add_report(rep)
    if single:
        return x[:, 0], reports[0]
    return x, reports


def _report(history, converged, tol, spec, saturations) -> RefinementReport:
    return RefinementReport(
        iterations=len(history),
        final_residual=history[-1],
        residual_history=list(history),
        converged=bool(converged),
        tolerance=tol,
        total_bits=spec.total_bits,
        saturations=int(saturations),
    )
