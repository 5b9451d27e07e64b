"""Behavioral model of the closed-loop analog inversion circuit.

The feedback loop is treated as settling exactly to the solution of the
*programmed* (noisy) crossbar matrix; the only other error sources are DAC
quantization of the input and clipping plus ADC quantization of the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .device import CrossbarState, DeviceConfig, read_conductance_difference
from .errors import CircuitUnstableError, ContractError
from .numeric import DTYPE, quantize

# output rails relative to the input full scale
OUTPUT_HEADROOM = 10.0
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class ConverterConfig:
    dac_bits: int = 8
    adc_bits: int = 6
    full_scale: float = 1.0

    def __post_init__(self):
        if self.dac_bits < 2 or self.adc_bits < 2:
            raise ContractError("converter resolutions must be >= 2 bits")
        if self.full_scale <= 0:
            raise ContractError("full_scale must be positive")

    @classmethod
    def ideal(cls) -> "ConverterConfig":
        """Converters fine enough that quantization sits at double round-off."""
        return cls(dac_bits=52, adc_bits=52)


def amc_solve(state: CrossbarState, b, dev: DeviceConfig, conv: ConverterConfig, rng=None,
              gain: float = 1.0):
    """One-shot low-precision solve of ``A x = b`` on a programmed crossbar.

    ``b`` may be a vector or an ``m x k`` block of right-hand sides (each
    column is an independent circuit operation with its own input scaling and
    read-noise draw). ``gain`` in (0, 1], scalar or per column, lowers the
    input drive; callers use it to back off from output saturation.

    Returns ``(x, saturated)``; ``saturated`` is a bool for a vector input and
    a per-column bool array for a block input.
    """
    b = np.asarray(b, dtype=DTYPE)
    single = b.ndim == 1
    cols = b[:, None] if single else b
    m = state.size
    if m > dev.leaf_max:
        raise ContractError(f"{m}x{m} crossbar exceeds leaf_max={dev.leaf_max}")
    if cols.ndim != 2 or cols.shape[0] != m:
        raise ContractError(f"right-hand side shape {b.shape} does not match {m}x{m} crossbar")
    gain = np.asarray(gain, dtype=DTYPE)
    if np.any(gain <= 0) or np.any(gain > 1):
        raise ContractError("gain must lie in (0, 1]")
    bnorm = np.max(np.abs(cols), axis=0)
    if np.any(bnorm == 0):
        raise ContractError("right-hand side must be non-zero")

    fs = conv.full_scale
    b_in, _ = quantize(gain * fs * cols / bnorm, conv.dac_bits, fs)

    if dev.read_noise_sigma == 0:
        lu, cond = state.static_lu(dev)
        if lu is None or cond > MAX_CONDITION:
            raise CircuitUnstableError(f"crossbar matrix is singular (cond ~ {cond:.3g})", cond)
        v = scipy.linalg.lu_solve(lu, b_in, check_finite=False)
    else:
        k = cols.shape[1]
        mats = read_conductance_difference(state, dev, rng, count=k) / dev.g_unit
        conds = np.linalg.cond(mats)
        worst = float(np.max(conds))
        if not np.isfinite(worst) or worst > MAX_CONDITION:
            raise CircuitUnstableError(f"crossbar matrix is singular (cond ~ {worst:.3g})", worst)
        v = np.linalg.solve(mats, b_in.T[:, :, None])[:, :, 0].T

    rail = OUTPUT_HEADROOM * fs
    saturated = np.any(np.abs(v) > rail, axis=0)
    v = np.clip(v, -rail, rail)
    v, _ = quantize(v, conv.adc_bits, rail)
    x = v * (bnorm / (gain * fs * state.scale))
    if single:
        return x[:, 0], bool(saturated[0])
    return x, saturated
