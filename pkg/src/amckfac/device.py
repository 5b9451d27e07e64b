"""1T1R RRAM crossbar model: signed mapping, write-verify programming, readout.

Conductances are in microsiemens throughout. A signed matrix is stored as a
pair of arrays, ``A = scale * (G_pos - G_neg) / g_unit``, where each entry
lives in exactly one of the two arrays and the complementary cell is left in
the off (high-resistance) state.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import ContractError, DegenerateMappingError
from .numeric import as_matrix


@dataclass(frozen=True)
class DeviceConfig:
    g_min: float = 20.0
    g_max: float = 220.0
    g_unit: float = 100.0
    write_tolerance: float = 10.0
    off_leak_max: float = 2.0
    read_noise_sigma: float = 0.0
    leaf_max: int = 4

    def __post_init__(self):
        if not 0 < self.g_min < self.g_max:
            raise ContractError("need 0 < g_min < g_max")
        # zero tolerance / zero leak are allowed: they give the noise-free limit
        if not 0 <= self.write_tolerance < self.g_min:
            raise ContractError("need 0 <= write_tolerance < g_min")
        if not 0 <= self.off_leak_max < self.g_min:
            raise ContractError("need 0 <= off_leak_max < g_min")
        if not self.g_min <= self.g_unit <= self.g_max:
            raise ContractError("g_unit must lie in [g_min, g_max]")
        if self.read_noise_sigma < 0:
            raise ContractError("read_noise_sigma must be >= 0")
        if int(self.leaf_max) != self.leaf_max or self.leaf_max < 1:
            raise ContractError("leaf_max must be a positive integer")

    @classmethod
    def ideal(cls, leaf_max: int = 4) -> "DeviceConfig":
        """Noise-free device whose dynamic range is wide enough to never clamp."""
        return cls(g_min=1e-9, write_tolerance=0.0, off_leak_max=0.0,
                   read_noise_sigma=0.0, leaf_max=leaf_max)

    @property
    def is_noise_free(self) -> bool:
        return self.write_tolerance == 0 and self.off_leak_max == 0 and self.read_noise_sigma == 0


@dataclass(frozen=True)
class ConductanceTargets:
    pos: np.ndarray
    neg: np.ndarray
    scale: float

    @property
    def size(self) -> int:
        return self.pos.shape[0]

    def mapped_matrix(self, cfg: DeviceConfig) -> np.ndarray:
        """The (clamped) matrix the targets encode, in matrix units."""
        return self.scale * (self.pos - self.neg) / cfg.g_unit


@dataclass(frozen=True)
class CrossbarState:
    programmed_pos: np.ndarray
    programmed_neg: np.ndarray
    targets: ConductanceTargets
    rng_seed_used: int | None = None

    @property
    def size(self) -> int:
        return self.programmed_pos.shape[0]

    @property
    def scale(self) -> float:
        return self.targets.scale

    def normalized_matrix(self, cfg: DeviceConfig) -> np.ndarray:
        """Static crossbar matrix divided by G_0 (no read noise)."""
        return (self.programmed_pos - self.programmed_neg) / cfg.g_unit

    @cached_property
    def _lu_cache(self):
        return {}

    def static_lu(self, cfg: DeviceConfig):
        """LU factors and condition number of the static crossbar matrix."""
        key = cfg.g_unit
        if key not in self._lu_cache:
            mat = self.normalized_matrix(cfg)
            cond = float(np.linalg.cond(mat))
            lu = None
            if np.isfinite(cond):
                with warnings.catch_warnings():
                    # singular crossbars are reported by the caller via ``cond``
                    warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                    lu = scipy.linalg.lu_factor(mat, check_finite=False)
            self._lu_cache[key] = (lu, cond)
        return self._lu_cache[key]


def split_and_scale(a, cfg: DeviceConfig) -> ConductanceTargets:
    """Map a signed matrix onto positive/negative conductance targets.

    The largest magnitude maps to ``g_max``. Non-zero entries that would land
    below ``g_min`` are clamped up to ``g_min``; exact zeros stay off.
    """
    a = as_matrix(a, square=True)
    m = a.shape[0]
    if m > cfg.leaf_max:
        raise ContractError(f"{m}x{m} matrix exceeds crossbar size {cfg.leaf_max}")
    peak = float(np.max(np.abs(a)))
    if peak == 0.0:
        raise DegenerateMappingError("cannot map an all-zero matrix")
    scale = peak * cfg.g_unit / cfg.g_max
    g = np.abs(a) * (cfg.g_unit / scale)
    g = np.where(a != 0.0, np.clip(g, cfg.g_min, cfg.g_max), 0.0)
    pos = np.where(a > 0, g, 0.0)
    neg = np.where(a < 0, g, 0.0)
    return ConductanceTargets(pos=pos, neg=neg, scale=scale)


def program_crossbar(targets: ConductanceTargets, cfg: DeviceConfig, rng) -> CrossbarState:
    """Write-verify programming: on-cells land uniformly within +-write_tolerance,
    off-cells leak uniformly in [0, off_leak_max]."""
    seed = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)

    def _program(target):
        on = target > 0
        err = rng.uniform(-cfg.write_tolerance, cfg.write_tolerance, size=target.shape)
        leak = rng.uniform(0.0, cfg.off_leak_max, size=target.shape)
        return np.where(on, target + err, leak)

    pos = _program(targets.pos)
    neg = _program(targets.neg)
    return CrossbarState(programmed_pos=pos, programmed_neg=neg, targets=targets, rng_seed_used=seed)


def read_conductance_difference(state: CrossbarState, cfg: DeviceConfig, rng, count: int | None = None):
    """``G_pos - G_neg`` as sensed in one read (or ``count`` independent reads)."""
    diff = state.programmed_pos - state.programmed_neg
    if cfg.read_noise_sigma == 0:
        return diff if count is None else np.broadcast_to(diff, (count,) + diff.shape)
    shape = diff.shape if count is None else (count,) + diff.shape
    return diff + rng.normal(0.0, cfg.read_noise_sigma, size=shape)


def effective_matrix(state: CrossbarState, cfg: DeviceConfig, rng=None) -> np.ndarray:
    """Matrix actually embodied by the crossbar in matrix units, with fresh read noise."""
    if cfg.read_noise_sigma > 0 and rng is None:
        raise ContractError("a random source is required when read noise is enabled")
    return state.scale * read_conductance_difference(state, cfg, rng) / cfg.g_unit


def program_matrix(a, cfg: DeviceConfig, rng) -> CrossbarState:
    """Convenience: map then program."""
    return program_crossbar(split_and_scale(a, cfg), cfg, rng)
