import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amckfac.circuit import ConverterConfig
from amckfac.device import CrossbarState, DeviceConfig, program_crossbar, program_matrix, split_and_scale
from amckfac.errors import ContractError, DivergenceError, NonConvergenceError
from amckfac.hpinv import SolveStats, contraction_estimate, hp_solve
from amckfac.numeric import FixedPointSpec, relative_error

from .helpers import random_spd

IDEAL_DEV = DeviceConfig.ideal()
IDEAL_CONV = ConverterConfig.ideal()
SPEC24 = FixedPointSpec(24)


def test_noise_free_single_iteration():
    rng = np.random.default_rng(0)
    a = random_spd(4, 20.0, rng)
    b = rng.standard_normal(4)
    s = program_matrix(a, IDEAL_DEV, 0)
    x, rep = hp_solve(a, b, s, SPEC24, dev=IDEAL_DEV, conv=IDEAL_CONV)
    assert rep.converged and rep.iterations == 1
    assert len(rep.residual_history) == rep.iterations
    assert rep.final_residual <= SPEC24.tolerance()


def test_identity_default_noise_geometric_decay():
    dev, conv = DeviceConfig(), ConverterConfig()
    rng = np.random.default_rng(1)
    a = np.eye(4)
    s = program_matrix(a, dev, rng)
    b = rng.standard_normal(4)
    x, rep = hp_solve(a, b, s, SPEC24, dev=dev, conv=conv, rng=rng)
    assert rep.converged
    h = np.array(rep.residual_history)
    # mean per-cycle contraction sits near the device error (write tolerance at
    # g_max over 220 uS) plus the converter floor, well below one
    rate = (h[-1] / h[0]) ** (1 / max(len(h) - 1, 1))
    rho = contraction_estimate(a, s, dev)
    assert rho < 0.2
    assert rate < 0.6
    assert relative_error(x, b) <= 4 * SPEC24.tolerance()


def test_mismatched_state_diverges():
    rng = np.random.default_rng(2)
    a = random_spd(4, 5.0, rng)
    s = program_matrix(-a, IDEAL_DEV, 0)
    assert contraction_estimate(a, s, IDEAL_DEV) == pytest.approx(2.0)
    with pytest.raises(DivergenceError) as info:
        hp_solve(a, rng.standard_normal(4), s, SPEC24, dev=IDEAL_DEV, conv=IDEAL_CONV)
    assert info.value.contraction == pytest.approx(2.0)
    assert info.value.report is not None and not info.value.report.converged


def test_max_iters_exhaustion():
    dev, conv = DeviceConfig(), ConverterConfig()
    rng = np.random.default_rng(3)
    a = random_spd(4, 10.0, rng)
    s = program_matrix(a, dev, rng)
    with pytest.raises(NonConvergenceError) as info:
        hp_solve(a, rng.standard_normal(4), s, SPEC24, max_iters=2, dev=dev, conv=conv, rng=rng)
    assert info.value.report.iterations == 2


def test_precision_below_double_floor_reports_nonconvergence():
    # 60-bit target sits below float64 round-off: the floor is reported, not hidden
    dev, conv = DeviceConfig(), ConverterConfig()
    rng = np.random.default_rng(4)
    a = random_spd(4, 10.0, rng)
    s = program_matrix(a, dev, rng)
    with pytest.raises(NonConvergenceError) as info:
        hp_solve(a, rng.standard_normal(4), s, FixedPointSpec(60), dev=dev, conv=conv, rng=rng)
    rep = info.value.report
    assert not rep.converged
    assert min(rep.residual_history) >= 2.0 ** -59


def test_contract_violations():
    s = program_matrix(np.eye(4), IDEAL_DEV, 0)
    with pytest.raises(ContractError):
        hp_solve(np.eye(4), np.zeros(4), s, SPEC24)
    with pytest.raises(ContractError):
        hp_solve(np.eye(4), np.ones(4), s, SPEC24, max_iters=0)
    with pytest.raises(ContractError):
        hp_solve(np.eye(3), np.ones(3), s, SPEC24)


def _write_noise_only_state(a, dev, rng):
    return program_crossbar(split_and_scale(a, dev), dev, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.sampled_from([12, 16, 24, 26]))
def test_convergence_guarantee(seed, m, bits):
    dev = DeviceConfig()
    rng = np.random.default_rng(seed)
    a = random_spd(m, 10.0, rng)
    s = _write_noise_only_state(a, dev, rng)
    rho = contraction_estimate(a, s, dev)
    if not rho < 0.9:
        return
    spec = FixedPointSpec(bits)
    b = rng.standard_normal(m)
    x, rep = hp_solve(a, b, s, spec, dev=dev, conv=IDEAL_CONV, rng=rng)
    assert rep.converged
    assert rep.iterations <= math.ceil(math.log(spec.tolerance()) / math.log(max(rho, 1e-300))) + 2
    # condition-number bound on the solution error
    assert relative_error(x, np.linalg.solve(a, b)) <= np.linalg.cond(a) * spec.tolerance()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_monotone_tail(seed, m):
    dev = DeviceConfig()
    rng = np.random.default_rng(seed)
    a = random_spd(m, 5.0, rng)
    s = _write_noise_only_state(a, dev, rng)
    if contraction_estimate(a, s, dev) >= 0.5:
        return
    _, rep = hp_solve(a, rng.standard_normal(m), s, SPEC24, dev=dev, conv=IDEAL_CONV, rng=rng)
    h = rep.residual_history
    assert all(later <= earlier * (1 + 1e-9) for earlier, later in zip(h[1:], h[2:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solution_correctness_default_converters(seed):
    dev, conv = DeviceConfig(), ConverterConfig()
    rng = np.random.default_rng(seed)
    a = random_spd(4, 10.0, rng)
    b = rng.standard_normal(4)
    s = program_matrix(a, dev, rng)
    try:
        x, rep = hp_solve(a, b, s, SPEC24, dev=dev, conv=conv, rng=rng)
    except (NonConvergenceError, DivergenceError):
        return
    assert np.max(np.abs(b - a @ x)) / np.max(np.abs(b)) <= SPEC24.tolerance()
    assert relative_error(x, np.linalg.solve(a, b)) <= np.linalg.cond(a) * SPEC24.tolerance()


def test_block_rhs_and_stats():
    dev, conv = DeviceConfig(), ConverterConfig()
    rng = np.random.default_rng(7)
    a = random_spd(4, 4.0, rng)
    s = program_matrix(a, dev, rng)
    b = rng.standard_normal((4, 3))
    stats = SolveStats()
    x, reps = hp_solve(a, b, s, SPEC24, dev=dev, conv=conv, rng=rng, stats=stats)
    assert len(reps) == 3 and all(r.converged for r in reps)
    assert stats.leaf_solves == 3
    assert stats.refinement_iterations_total == sum(r.iterations for r in reps)
    assert stats.lp_vector_outputs == sum(r.iterations for r in reps) + sum(r.saturations for r in reps)
    assert stats.bits_used[24] == 3
    assert np.allclose(a @ x, b, atol=1e-5)


def test_single_column_counter_definition():
    rng = np.random.default_rng(8)
    a = random_spd(4, 4.0, rng)
    dev, conv = DeviceConfig(), ConverterConfig()
    s = program_matrix(a, dev, rng)
    stats = SolveStats()
    _, rep = hp_solve(a, rng.standard_normal(4), s, SPEC24, dev=dev, conv=conv, rng=rng, stats=stats)
    assert stats.leaf_solves == 1
    assert stats.lp_vector_outputs == rep.iterations + rep.saturations


def test_saturating_system_still_converges():
    # near-singular pair: first drive saturates the rails, backoff recovers
    a = np.array([[1.0, 0.98], [0.98, 1.0]])
    s = program_matrix(a, IDEAL_DEV, 0)
    stats = SolveStats()
    b = np.array([1.0, -1.0])
    x, rep = hp_solve(a, b, s, SPEC24, dev=IDEAL_DEV, conv=ConverterConfig(), stats=stats)
    assert rep.converged and rep.saturations >= 1
    assert relative_error(x, np.linalg.solve(a, b)) <= np.linalg.cond(a) * SPEC24.tolerance()


def test_state_is_not_mutated():
    dev = DeviceConfig()
    s = program_matrix(np.eye(4) * 2, dev, 0)
    before = (s.programmed_pos.copy(), s.programmed_neg.copy())
    hp_solve(np.eye(4) * 2, np.ones(4), s, SPEC24, dev=dev, rng=np.random.default_rng(0))
    assert isinstance(s, CrossbarState)
    assert np.array_equal(before[0], s.programmed_pos) and np.array_equal(before[1], s.programmed_neg)
