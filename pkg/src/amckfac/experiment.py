"""Training runs, solver calibration, file-based solves and metric output."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, kfac, nn
from .blockamc import SolveContext, block_solve, partition_plan, render_tree, solve_statistics
from .circuit import ConverterConfig, amc_solve
from .config import ExperimentConfig
from .device import DeviceConfig, program_matrix
from .errors import AmcError, ContractError, ParseError, SolverError
from .hpinv import hp_solve
from .numeric import FixedPointSpec, relative_error

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "mean_update_rel_err",
                  "lp_vector_outputs", "hp_solves", "mean_refinement_iters")

# fixed offsets into the master seed's SeedSequence; see derive_rngs
_STREAM_INIT, _STREAM_SHUFFLE, _STREAM_DEVICE, _STREAM_DATA = range(4)


def derive_rngs(seed: int):
    """Independent generators for init, shuffling, device noise and data sampling."""
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.default_rng(c) for c in children]


def trial_seed(master: int, index: int) -> np.random.SeedSequence:
    """Seed for the ``index``-th trial or sweep cell under ``master``."""
    return np.random.SeedSequence([master, index])


class TrainingAborted(AmcError):
    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    mean_update_rel_err: float
    lp_vector_outputs: int
    hp_solves: int
    mean_refinement_iters: float

    def as_tuple(self):
        return tuple(getattr(self, k) for k in METRICS_HEADER)


@dataclass
class TrainRecord:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    update_rel_errors: list = field(default_factory=list)
    bits_by_epoch: dict = field(default_factory=dict)
    features: np.ndarray | None = None
    feature_labels: np.ndarray | None = None
    final_test_acc: float | None = None
    aborted: str | None = None
    solver_totals: dict = field(default_factory=dict)

    @property
    def header(self) -> dict:
        return {"config_hash": self.config.digest(), "seed": self.config.train.seed,
                "version": f"amckfac-{__version__}", "optimizer": self.config.train.optimizer}

    @property
    def epochs_to_full_accuracy(self) -> int | None:
        return epochs_to_full_accuracy(self.rows)

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.rows]

    def summary(self) -> dict:
        errs = self.update_rel_errors
        return {
            **self.header,
            "config": self.config.to_dict(),
            "epochs_completed": len(self.rows),
            "epochs_to_full_train_accuracy": self.epochs_to_full_accuracy,
            "final_train_loss": self.rows[-1].train_loss if self.rows else None,
            "final_train_acc": self.rows[-1].train_acc if self.rows else None,
            "final_test_acc": self.final_test_acc,
            "update_vectors": len(errs),
            "mean_update_rel_err": float(np.mean(errs)) if errs else None,
            "solver": self.solver_totals,
            "bits_by_epoch": {str(k): v for k, v in self.bits_by_epoch.items()},
            "aborted": self.aborted,
        }


def epochs_to_full_accuracy(rows) -> int | None:
    """First epoch whose post-epoch full-train-set accuracy is exactly 1."""
    for row in rows:
        if row.train_acc == 1.0:
            return row.epoch
    return None


def load_datasets(cfg: ExperimentConfig):
    d = cfg.data
    seed = cfg.train.seed if d.split_seed is None else d.split_seed
    if d.uses_emnist:
        images, labels = data.load_idx(d.images, d.labels)
        return data.build_split(images, labels, per_class_train=d.per_class_train,
                                per_class_test=d.per_class_test, seed=seed)
    if d.synthetic == "letters":
        return data.synthetic_letter_split(d.per_class_train, d.per_class_test, seed,
                                           d.synthetic_noise, d.synthetic_distortion)
    if d.synthetic == "blobs":
        return data.synthetic_split(d.per_class_train, d.per_class_test, seed, d.synthetic_noise)
    raise ContractError(f"unknown synthetic dataset {d.synthetic!r}")


def run_training(cfg: ExperimentConfig, out_dir=None, datasets=None) -> TrainRecord:
    """Train the fixed CNN with the configured optimizer.

    Every inversion of the ``kfac-amc`` optimizer runs through BlockAMC at the
    precision the schedule assigns to the current epoch. On solver failure
    the partial record is written (when ``out_dir`` is set) before raising
    TrainingAborted.
    """
    tc = cfg.train
    train, test = datasets if datasets is not None else load_datasets(cfg)
    cfg.check_batching(len(train))
    init_rng, shuffle_rng, device_rng, _ = derive_rngs(tc.seed)
    model = nn.Model.init(init_rng)
    record = TrainRecord(config=cfg)
    ctx = None
    if tc.optimizer == "kfac-amc":
        ctx = SolveContext(dev=cfg.device, conv=cfg.converters, max_iters=tc.max_iters, rng=device_rng)
    momentum_state, adam_state = nn.MomentumState(), nn.AdamState()

    for epoch in range(1, tc.epochs + 1):
        if ctx is not None:
            ctx.spec = FixedPointSpec(tc.bits_for_epoch(epoch))
            record.bits_by_epoch[epoch] = ctx.spec.total_bits
        perm = shuffle_rng.permutation(len(train))
        epoch_errs = []
        for step, start in enumerate(range(0, len(train), tc.batch_size)):
            idx = perm[start:start + tc.batch_size]
            x, y = train.images[idx], train.labels[idx]
            try:
                epoch_errs += _train_step(cfg, model, x, y, ctx, momentum_state, adam_state)
            except SolverError as err:
                record.aborted = f"epoch {epoch} step {step + 1}: {err}"
                _finish(record, model, test, ctx)
                if out_dir is not None:
                    emit_metrics(record, out_dir)
                raise TrainingAborted(record.aborted, record) from err
        record.update_rel_errors += epoch_errs

        train_loss, train_acc, _ = nn.evaluate(model, train.images, train.labels)
        _, test_acc, _ = nn.evaluate(model, test.images, test.labels)
        snap = ctx.stats.snapshot() if ctx is not None else None
        record.rows.append(EpochRow(
            epoch=epoch,
            train_loss=train_loss,
            train_acc=train_acc,
            test_acc=test_acc,
            mean_update_rel_err=float(np.mean(epoch_errs)) if epoch_errs else (0.0 if tc.optimizer.startswith("kfac") else math.nan),
            lp_vector_outputs=snap["lp_vector_outputs"] if snap else 0,
            hp_solves=snap["leaf_solves"] if snap else 0,
            mean_refinement_iters=snap["mean_iterations"] if snap else 0.0,
        ))
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, train_loss, train_acc, test_acc)
        if tc.stop_at_full_accuracy and train_acc == 1.0:
            break

    _finish(record, model, test, ctx)
    if out_dir is not None:
        emit_metrics(record, out_dir)
    return record


def _train_step(cfg, model, x, y, ctx, momentum_state, adam_state) -> list[float]:
    tc = cfg.train
    if tc.optimizer in ("kfac-amc", "kfac-exact"):
        report = kfac.kfac_step(model, x, y, cfg.kfac, ctx)
        return list(report.update_rel_errors.values())
    _, grads, _ = nn.loss_and_grads(model, x, y)
    if tc.optimizer == "sgdm":
        nn.sgd_m_step(model, grads.params, tc.sgdm_lr, tc.sgdm_momentum, momentum_state)
    else:
        nn.adam_step(model, grads.params, tc.adam_lr, adam_state)
    return []


def _finish(record, model, test, ctx):
    _, acc, feats = nn.evaluate(model, test.images, test.labels)
    record.final_test_acc = acc
    record.features = feats
    record.feature_labels = test.labels
    if ctx is not None:
        record.solver_totals = {**ctx.stats.snapshot(),
                                "bits_used": {str(k): v for k, v in sorted(ctx.stats.bits_used.items())}}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(record: TrainRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in record.rows:
        w.writerow([_fmt(v) for v in row.as_tuple()])
    return buf.getvalue()


def emit_metrics(record: TrainRecord, out_dir) -> dict:
    """Write metrics.csv, summary.json and features.csv; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "summary": out / "summary.json", "features": out / "features.csv"}
    paths["metrics"].write_text(metrics_csv(record))
    paths["summary"].write_text(json.dumps(record.summary(), indent=2, sort_keys=True, default=_json_default))
    if record.features is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"f{i}" for i in range(record.features.shape[1])])
        for i, (lab, feat) in enumerate(zip(record.feature_labels, record.features)):
            w.writerow([i, int(lab)] + [repr(float(v)) for v in feat])
        paths["features"].write_text(buf.getvalue())
    return paths


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------- sweeps

def sweep(cfg: ExperimentConfig, optimizer: str, seeds, epochs: int | None = None, datasets_for=None):
    """Grid-search one optimizer's hyperparameters by median epochs-to-100%.

    Runs that never reach full training accuracy count as ``epochs + 1``.
    Returns ``(best_overrides, table)`` where ``table`` lists every cell.
    """
    tc = cfg.train
    if optimizer in ("kfac-exact", "kfac-amc"):
        grid = [{"kfac__learning_rate": lr, "kfac__global_damping": lam}
                for lr in tc.sweep_kfac_lr for lam in tc.sweep_kfac_damping]
    elif optimizer == "sgdm":
        grid = [{"train__sgdm_lr": lr, "train__sgdm_momentum": m}
                for lr in tc.sweep_sgdm_lr for m in tc.sweep_sgdm_momentum]
    elif optimizer == "adam":
        grid = [{"train__adam_lr": lr} for lr in tc.sweep_adam_lr]
    else:
        raise ContractError(f"cannot sweep optimizer {optimizer!r}")
    epochs = epochs or tc.default_epochs(optimizer)
    table = []
    for overrides in grid:
        results = []
        for seed in seeds:
            run_cfg = cfg.replace(train__optimizer=optimizer, train__seed=seed, train__epochs=epochs,
                                  train__stop_at_full_accuracy=True, **overrides)
            ds = datasets_for(seed) if datasets_for else None
            try:
                rec = run_training(run_cfg, datasets=ds)
                hit = rec.epochs_to_full_accuracy
            except TrainingAborted:
                hit = None
            results.append(epochs + 1 if hit is None else hit)
        table.append({"overrides": overrides, "epochs_to_full": results,
                      "median": float(np.median(results))})
    best = min(table, key=lambda r: (r["median"], max(r["epochs_to_full"])))
    return best["overrides"], table


# ---------------------------------------------------------------- solve

def read_matrix_file(path) -> np.ndarray:
    """Plain-text matrix: first line ``rows cols`` then row-major values."""
    text = Path(path).read_text().split()
    if len(text) < 2:
        raise ParseError(f"{path}: missing 'rows cols' header", offset=0)
    try:
        rows, cols = int(text[0]), int(text[1])
        values = [float(v) for v in text[2:]]
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric content ({exc})") from exc
    if rows < 1 or cols < 1:
        raise ParseError(f"{path}: bad dimensions {rows}x{cols}", offset=0)
    if len(values) != rows * cols:
        raise ParseError(f"{path}: expected {rows * cols} values, found {len(values)}")
    return np.asarray(values).reshape(rows, cols)


def write_matrix_file(path, m):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    lines = [f"{m.shape[0]} {m.shape[1]}"] + [" ".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def run_solve(matrix_file, rhs_file, cfg: ExperimentConfig, bits: int = 24, out_dir=None, seed: int | None = None):
    """Solve ``A X = B`` from files through BlockAMC; returns ``(X, report)``."""
    a = read_matrix_file(matrix_file)
    if a.shape[0] != a.shape[1]:
        raise ParseError(f"{matrix_file}: matrix must be square, got {a.shape[0]}x{a.shape[1]}")
    b = read_matrix_file(rhs_file)
    if b.shape[0] != a.shape[0]:
        if b.shape[0] == 1 and b.shape[1] == a.shape[0]:
            b = b.T
        else:
            raise ContractError(f"rhs has {b.shape[0]} rows, matrix has {a.shape[0]}")
    seed = cfg.train.seed if seed is None else seed
    ctx = SolveContext(dev=cfg.device, conv=cfg.converters, spec=FixedPointSpec(bits),
                       max_iters=cfg.train.max_iters, rng=derive_rngs(seed)[_STREAM_DEVICE])
    x = block_solve(a, b, ctx)
    resid = relative_error(a @ x, b) if np.any(b) else 0.0
    cond = float(np.linalg.cond(a))
    report = {
        "n": int(a.shape[0]),
        "rhs_columns": int(b.shape[1]),
        "total_bits": bits,
        "tolerance": FixedPointSpec(bits).tolerance(),
        "relative_residual_fro": resid,
        "condition_number": cond,
        "residual_bound": cond * FixedPointSpec(bits).tolerance(),
        "partition_tree": render_tree(partition_plan(a.shape[0], cfg.device.leaf_max)),
        "counters": solve_statistics(ctx),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_matrix_file(out / "solution.txt", x)
        (out / "solve_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return x, report


# ---------------------------------------------------------------- calibration

def collect_workload(cfg: ExperimentConfig, epochs: int = 5, datasets=None, seed: int | None = None):
    """Leaf systems BlockAMC hands to the crossbar during a short digital KFAC run.

    Training runs with exact inversions; at every step the four KFAC
    preconditioning solves are replayed through BlockAMC on an ideal device
    with a hook capturing each leaf matrix and its right-hand sides.
    """
    seed = cfg.train.seed if seed is None else seed
    run_cfg = cfg.replace(train__optimizer="kfac-exact", train__seed=seed)
    train, _ = datasets if datasets is not None else load_datasets(run_cfg)
    init_rng, shuffle_rng, _, _ = derive_rngs(seed)
    model = nn.Model.init(init_rng)
    leaves = []
    ctx = SolveContext(dev=DeviceConfig.ideal(cfg.device.leaf_max), conv=ConverterConfig.ideal(),
                       spec=FixedPointSpec(24), rng=np.random.default_rng(0),
                       leaf_hook=lambda a, b: leaves.append((a.copy(), b.copy())))
    bs = run_cfg.train.batch_size
    for _ in range(epochs):
        perm = shuffle_rng.permutation(len(train))
        for start in range(0, len(train), bs):
            idx = perm[start:start + bs]
            x, y = train.images[idx], train.labels[idx]
            _, grads, tape = nn.loss_and_grads(model, x, y)
            kfac.natural_updates(grads, tape, run_cfg.kfac.global_damping, ctx)
            kfac.kfac_step(model, x, y, run_cfg.kfac, None)
    return leaves


def run_calibrate(cfg: ExperimentConfig, trials: int = 1000, bits: int = 24, seed: int | None = None,
                  workload=None, out_dir=None, epochs: int = 5) -> dict:
    """One-shot and refined error statistics of the analog solver on KFAC leaves."""
    if trials < 100:
        raise ContractError("calibration needs at least 100 trials")
    seed = cfg.train.seed if seed is None else seed
    if workload is None:
        workload = collect_workload(cfg, epochs=epochs, seed=seed)
    if not workload:
        raise ContractError("empty calibration workload")
    spec = FixedPointSpec(bits)
    pick_rng = np.random.default_rng(trial_seed(seed, 0))
    lp_err, iters, hp_err, converged = [], [], [], 0
    failures = {}
    for t in range(trials):
        a, rhs = workload[pick_rng.integers(len(workload))]
        b = rhs[:, pick_rng.integers(rhs.shape[1])]
        rng = np.random.default_rng(trial_seed(seed, t + 1))
        exact = np.linalg.solve(a, b)
        state = program_matrix(a, cfg.device, rng)
        try:
            x_lp, _ = amc_solve(state, b, cfg.device, cfg.converters, rng)
            lp_err.append(relative_error(x_lp, exact))
            x_hp, rep = hp_solve(a, b, state, spec, cfg.train.max_iters, cfg.device, cfg.converters, rng)
        except AmcError as err:
            failures[type(err).__name__] = failures.get(type(err).__name__, 0) + 1
            continue
        converged += 1
        iters.append(rep.iterations)
        hp_err.append(relative_error(x_hp, exact))

    def _stats(v):
        if not v:
            return None
        v = np.asarray(v, dtype=float)
        return {"mean": float(v.mean()), "median": float(np.median(v)),
                "p5": float(np.percentile(v, 5)), "p95": float(np.percentile(v, 95)),
                "max": float(v.max())}

    report = {
        "trials": trials,
        "total_bits": bits,
        "workload_leaf_systems": len(workload),
        "converged_fraction": converged / trials,
        "failures": failures,
        "lp_relative_error": _stats(lp_err),
        "hp_iterations": _stats(iters),
        "hp_relative_error": _stats(hp_err),
        "device": cfg.to_dict()["device"],
        "converters": cfg.to_dict()["converters"],
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "calibration.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
