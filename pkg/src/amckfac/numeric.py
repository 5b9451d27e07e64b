"""Dense numeric helpers: validation, MVM, fixed-point quantization, vec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError

# host "digital" precision; float64 has a 52-bit mantissa
DTYPE = np.float64


def as_matrix(a, *, square: bool = False, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise ContractError."""
    arr = np.asarray(a, dtype=DTYPE)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if square and arr.shape[0] != arr.shape[1]:
        raise ContractError(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def as_vector(v, *, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=DTYPE)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ContractError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def mvm(a, x) -> np.ndarray:
    """Matrix-vector (or matrix-matrix) product in host double precision."""
    a = as_matrix(a)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim not in (1, 2) or x.shape[0] != a.shape[1]:
        raise ContractError(f"mvm dimension mismatch: {a.shape} @ {x.shape}")
    return a @ x


def relative_error(v, v_star) -> float:
    """``||v - v*||_2 / ||v*||_2``; matrices are compared in Frobenius norm."""
    v = np.asarray(v, dtype=DTYPE)
    v_star = np.asarray(v_star, dtype=DTYPE)
    if v.shape != v_star.shape:
        raise ContractError(f"shape mismatch: {v.shape} vs {v_star.shape}")
    ref = np.linalg.norm(v_star)
    if ref == 0.0:
        raise UndefinedMetricError("relative error undefined for a zero reference")
    return float(np.linalg.norm(v - v_star) / ref)


@dataclass(frozen=True)
class FixedPointSpec:
    """Two's-complement fixed point over [-1, 1) with ``total_bits`` bits."""

    total_bits: int

    def __post_init__(self):
        if int(self.total_bits) != self.total_bits or self.total_bits < 2:
            raise ContractError(f"total_bits must be an integer >= 2, got {self.total_bits}")

    @property
    def step(self) -> float:
        return 2.0 ** -(self.total_bits - 1)

    def tolerance(self) -> float:
        return self.step


def quantize(x, bits: int, full_scale: float = 1.0):
    """Round ``x`` onto a ``bits``-bit signed grid spanning [-full_scale, full_scale).

    Returns ``(q, saturated)``; ties go to even, out-of-range values clip to
    the nearest representable extreme and set ``saturated``.
    """
    levels = 2.0 ** (bits - 1)
    idx = np.round(np.asarray(x, dtype=DTYPE) / full_scale * levels)
    clipped = np.clip(idx, -levels, levels - 1)
    saturated = bool(np.any(clipped != idx))
    q = clipped * (full_scale / levels)
    if np.ndim(q) == 0:
        q = float(q)
    return q, saturated


def quantize_fixed(x, spec: FixedPointSpec, *, return_flag: bool = False):
    """Nearest value of the ``spec`` grid; optionally also the saturation flag."""
    q, saturated = quantize(x, spec.total_bits)
    return (q, saturated) if return_flag else q


def vectorize(m) -> np.ndarray:
    """Column-stacking vec operator."""
    m = as_matrix(m)
    return m.reshape(-1, order="F").copy()


def unvectorize(v, rows: int, cols: int) -> np.ndarray:
    v = as_vector(v)
    if v.shape[0] != rows * cols:
        raise ContractError(f"cannot unvectorize length {v.shape[0]} into {rows}x{cols}")
    return v.reshape(rows, cols, order="F").copy()
