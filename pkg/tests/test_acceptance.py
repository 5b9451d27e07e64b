"""End-to-end acceptance criteria, each printed as one PASS/FAIL line.

Training runs are shared through module-scoped fixtures so every criterion
reads the same records. EMNIST criteria run only when the IDX files are
provided through AMCKFAC_EMNIST_IMAGES / AMCKFAC_EMNIST_LABELS.
"""

import os
import time
import warnings

import numpy as np
import pytest

from amckfac.blockamc import SolveContext, block_solve
from amckfac.circuit import ConverterConfig
from amckfac.config import ExperimentConfig, PrecisionPhase
from amckfac.device import DeviceConfig
from amckfac.experiment import TrainingAborted, run_calibrate, run_training
from amckfac.numeric import FixedPointSpec, relative_error

from . import test_kfac, test_nn, test_numeric
from .helpers import random_spd

SEEDS = range(5)
BASELINE_EPOCHS = 120
REPORTED_LP_OUTPUTS = 283_606
REPORTED_HP_SOLVES = 13_900


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def _train(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            return run_training(cfg)
        except TrainingAborted as err:
            return err.record


@pytest.fixture(scope="module")
def amc_runs():
    """Default kfac-amc runs (50 epochs) on the default dataset, one per seed."""
    t0 = time.perf_counter()
    runs = [_train(ExperimentConfig().replace(train__optimizer="kfac-amc", train__seed=s)) for s in SEEDS]
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def baseline_runs():
    out, t0 = {}, time.perf_counter()
    for opt in ("sgdm", "adam"):
        cfg = ExperimentConfig().replace(train__optimizer=opt, train__epochs=BASELINE_EPOCHS,
                                         train__stop_at_full_accuracy=True)
        out[opt] = [_train(cfg.replace(train__seed=s)) for s in SEEDS]
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def calibration():
    t0 = time.perf_counter()
    # workload drawn from a full-length training run so late-training factors are included
    rep = run_calibrate(ExperimentConfig(), trials=1000, epochs=50)
    return rep, time.perf_counter() - t0


def _epochs_or_miss(rec, cap):
    e = rec.epochs_to_full_accuracy
    return e if e is not None else cap + 1


def test_c1_oracle_equivalence_noise_free(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for i, n in enumerate((2, 4, 5, 8, 9, 16, 36, 64)):
        rng = np.random.default_rng(100 + i)
        for cond in (1.0, 10.0, 1e3):
            a = random_spd(n, cond, rng)
            ctx = SolveContext(dev=DeviceConfig.ideal(), conv=ConverterConfig.ideal(),
                               spec=FixedPointSpec(24), rng=np.random.default_rng(i))
            worst = max(worst, relative_error(block_solve(a, np.eye(n), ctx), np.linalg.inv(a)))
    elapsed = time.perf_counter() - t0
    verdict("C1 oracle equivalence", worst <= 1e-6 and elapsed < 10,
            f"worst rel err {worst:.2e} (<=1e-6), {elapsed:.1f}s (<10s)")


def test_c2_hpinv_convergence_band(calibration, verdict):
    rep, elapsed = calibration
    frac = rep["converged_fraction"]
    iters = rep["hp_iterations"]["mean"] if rep["hp_iterations"] else float("nan")
    err = rep["hp_relative_error"]["mean"] if rep["hp_relative_error"] else float("nan")
    ok = frac >= 0.99 and 8 <= iters <= 45 and err <= 1e-3 and elapsed < 120
    verdict("C2 HP-INV convergence", ok,
            f"converged {frac:.3f} (>=0.99), mean iters {iters:.1f} ([8,45]), "
            f"mean rel err {err:.2e} (<=1e-3), {elapsed:.0f}s (<120s), failures {rep['failures']}")


def test_c3_one_shot_error_band(calibration, verdict):
    rep, _ = calibration
    lp = rep["lp_relative_error"]["mean"]
    verdict("C3 one-shot LP error", 0.2 <= lp <= 1.0, f"mean rel err {lp:.3f} ([0.2, 1.0])")


def test_c4_convergence_ordering(amc_runs, baseline_runs, verdict):
    runs, t_amc = amc_runs
    baselines, t_base = baseline_runs
    amc = [_epochs_or_miss(r, 50) for r in runs]
    sgdm = [_epochs_or_miss(r, BASELINE_EPOCHS) for r in baselines["sgdm"]]
    adam = [_epochs_or_miss(r, BASELINE_EPOCHS) for r in baselines["adam"]]
    m_amc, m_sgdm, m_adam = (float(np.median(v)) for v in (amc, sgdm, adam))
    aborted = sum(r.aborted is not None for r in runs)
    elapsed = t_amc + t_base
    ok = m_amc < m_sgdm < m_adam and m_amc <= 50 and elapsed < 900
    verdict("C4 convergence ordering", ok,
            f"median epochs kfac-amc {m_amc:g} {amc} ({aborted} aborted), sgdm {m_sgdm:g} {sgdm}, "
            f"adam {m_adam:g} {adam}; need kfac-amc < sgdm < adam and kfac-amc <= 50; {elapsed:.0f}s")


def _per_seed(runs):
    return "; ".join(f"seed {r.config.train.seed}: " + (r.aborted or "complete") for r in runs)


def test_c5_update_vector_fidelity(amc_runs, verdict):
    # judged on the default-seed run; the other seeds are listed for context
    runs, _ = amc_runs
    rec = runs[0]
    errs = rec.update_rel_errors
    mean = float(np.mean(errs)) if errs else float("nan")
    verdict("C5 update-vector fidelity", len(errs) == 400 and mean <= 0.10,
            f"{len(errs)} vectors (400), mean rel err {mean:.2e} (<=0.10) [{_per_seed(runs)}]")


def test_c6_synthetic_test_accuracy(verdict):
    cfg = ExperimentConfig().replace(train__optimizer="kfac-amc", data__synthetic="blobs")
    runs = [_train(cfg.replace(train__seed=s)) for s in SEEDS]
    accs = [r.final_test_acc for r in runs]
    med = float(np.median(accs))
    aborted = sum(r.aborted is not None for r in runs)
    verdict("C6 synthetic test accuracy", med >= 0.95 and aborted == 0,
            f"median {med:.3f} (>=0.95) over {accs}, {aborted} aborted")


@pytest.mark.skipif(not (os.environ.get("AMCKFAC_EMNIST_IMAGES") and os.environ.get("AMCKFAC_EMNIST_LABELS")),
                    reason="EMNIST letters IDX files not provided")
def test_c6_emnist_test_accuracy(verdict):
    cfg = ExperimentConfig().replace(train__optimizer="kfac-amc",
                                     data__images=os.environ["AMCKFAC_EMNIST_IMAGES"],
                                     data__labels=os.environ["AMCKFAC_EMNIST_LABELS"])
    runs = [_train(cfg.replace(train__seed=s)) for s in SEEDS]
    accs = [r.final_test_acc for r in runs]
    med = float(np.median(accs))
    verdict("C6 EMNIST test accuracy", med >= 0.78, f"median {med:.3f} (>=0.78) over {accs}")


def test_c7_exact_limit(verdict):
    base = ExperimentConfig().replace(device=DeviceConfig.ideal(), converters=ConverterConfig.ideal(),
                                      train__precision_schedule=(PrecisionPhase(1, None, 26),))
    amc = _train(base.replace(train__optimizer="kfac-amc"))
    exact = _train(base.replace(train__optimizer="kfac-exact"))
    n = min(len(amc.rows), len(exact.rows))
    gap = float(np.max(np.abs(np.array(amc.losses[:n]) - np.array(exact.losses[:n]))))
    verdict("C7 exact limit", n == 50 and gap <= 1e-4, f"{n} epochs compared (50), max loss gap {gap:.2e} (<=1e-4)")


def test_c8_numerical_hygiene(verdict):
    checks = [
        ("finite differences", lambda: [test_nn.test_gradients_match_finite_differences(s) for s in range(5)]),
        ("kronecker vec identity", test_numeric.test_kronecker_vec_identity),
        ("quantizer idempotence", test_numeric.test_quantize_idempotent),
        ("quantizer monotonicity", test_numeric.test_quantize_monotone),
        ("kfac kronecker consistency", test_kfac.test_kronecker_consistency),
    ]
    failed = []
    for name, fn in checks:
        try:
            fn()
        except AssertionError:
            failed.append(name)
    verdict("C8 numerical hygiene", not failed, f"{len(checks) - len(failed)}/{len(checks)} suites pass"
            + (f", failed: {failed}" if failed else ""))


def test_c9_counter_sanity(amc_runs, verdict):
    runs, _ = amc_runs
    rec = runs[0]
    lp = rec.solver_totals.get("lp_vector_outputs", 0)
    hp = rec.solver_totals.get("leaf_solves", 0)
    ok = (REPORTED_LP_OUTPUTS / 10 <= lp <= REPORTED_LP_OUTPUTS * 10
          and REPORTED_HP_SOLVES / 10 <= hp <= REPORTED_HP_SOLVES * 10 and rec.aborted is None)
    verdict("C9 counter sanity", ok, f"LP outputs {lp} (within 10x of {REPORTED_LP_OUTPUTS}), "
            f"HP solves {hp} (within 10x of {REPORTED_HP_SOLVES}), full run required [{_per_seed(runs)}]")
