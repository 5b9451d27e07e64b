"""Kronecker-factored curvature optimizer whose inversions run on BlockAMC.

Per layer the Fisher block is approximated as ``A (x) G`` with ``A`` the
second moment of layer inputs and ``G`` that of per-sample pre-activation
gradients. The weight update is ``(G + beta I)^-1 dW (A + alpha I)^-1``; the
bias sees a scalar input factor of 1, so its update is
``(G + beta I)^-1 db / (1 + alpha)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .blockamc import SolveContext, block_solve, precondition_update
from .errors import ContractError, SolverError
from .numeric import as_matrix, relative_error, vectorize

PI_CLAMP = (1e-3, 1e3)

LAYERS = (("conv", "conv_w", "conv_b"), ("fc", "fc_w", "fc_b"))


@dataclass(frozen=True)
class KroneckerFactors:
    a_factor: np.ndarray
    g_factor: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("a_factor", "g_factor"):
            m = as_matrix(getattr(self, name), square=True, name=name)
            if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                raise ContractError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(m).min() < -1e-10:
                raise ContractError(f"{name} is not positive semidefinite")
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError("damping factors must be positive")

    @property
    def fisher_dim(self) -> int:
        return self.a_factor.shape[0] * self.g_factor.shape[0]


@dataclass(frozen=True)
class KfacConfig:
    global_damping: float = 3e-2
    learning_rate: float = 0.05

    def __post_init__(self):
        if self.global_damping <= 0 or self.learning_rate <= 0:
            raise ContractError("global_damping and learning_rate must be positive")


def fc_factors(activations, preact_grads):
    """Batch second moments ``A = a^T a / B`` and ``G = g^T g / B``."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(preact_grads, dtype=np.float64)
    if a.ndim != 2 or g.ndim != 2:
        raise ContractError("activations and gradients must be 2-D")
    if a.shape[0] == 0 or g.shape[0] == 0:
        raise ContractError("empty batch")
    if a.shape[0] != g.shape[0]:
        raise ContractError(f"row count mismatch: {a.shape[0]} vs {g.shape[0]}")
    n = a.shape[0]
    return a.T @ a / n, g.T @ g / n


def conv_factors(patches, out_grads):
    """Same moments taken over all ``B*T`` (sample, position) rows."""
    return fc_factors(patches, out_grads)


def compute_damping(a_factor, g_factor, damping: float):
    """Factored Tikhonov split with trace-ratio rebalancing; ``alpha*beta = damping``."""
    if damping <= 0:
        raise ContractError("damping must be positive")
    a_mean = np.trace(a_factor) / a_factor.shape[0]
    g_mean = np.trace(g_factor) / g_factor.shape[0]
    if g_mean <= 0:
        warnings.warn("G factor has zero trace; using an even damping split", RuntimeWarning)
        pi = 1.0
    else:
        pi = float(np.clip(np.sqrt(max(a_mean, 0.0) / g_mean), *PI_CLAMP))
    root = np.sqrt(damping)
    return pi * root, root / pi


def layer_factors(grads: nn.Gradients, tape: nn.LayerTape, layer: str):
    if layer == "conv":
        patches = tape.patches.reshape(-1, nn.PATCH)
        return conv_factors(patches, grads.conv_preact)
    if layer == "fc":
        return fc_factors(tape.features, grads.fc_preact)
    raise ContractError(f"unknown layer {layer!r}")


def natural_updates(grads: nn.Gradients, tape: nn.LayerTape, damping: float, ctx: SolveContext | None):
    """Preconditioned directions for every parameter.

    With ``ctx=None`` the inversions are exact digital solves; otherwise they
    go through BlockAMC. Returns ``(updates, factors)`` keyed by parameter
    and layer name respectively.
    """
    updates, factors = {}, {}
    for layer, w_name, b_name in LAYERS:
        a_fac, g_fac = layer_factors(grads, tape, layer)
        alpha, beta = compute_damping(a_fac, g_fac, damping)
        factors[layer] = KroneckerFactors(a_fac, g_fac, alpha, beta)
        grad_w = grads.params[w_name]
        grad_b = grads.params[b_name]
        g_damped = g_fac + beta * np.eye(g_fac.shape[0])
        if ctx is None:
            a_damped = a_fac + alpha * np.eye(a_fac.shape[0])
            updates[w_name] = np.linalg.solve(a_damped, np.linalg.solve(g_damped, grad_w).T).T
            updates[b_name] = np.linalg.solve(g_damped, grad_b) / (1.0 + alpha)
        else:
            try:
                updates[w_name] = precondition_update(grad_w, a_fac, g_fac, alpha, beta, ctx)
                updates[b_name] = block_solve(g_damped, grad_b, ctx, "bias") / (1.0 + alpha)
            except SolverError as err:
                raise err.annotate(f"layer {layer}")
    return updates, factors


@dataclass
class StepReport:
    loss: float
    update_rel_errors: dict = field(default_factory=dict)
    damping: dict = field(default_factory=dict)


def kfac_step(model: nn.Model, images, labels, cfg: KfacConfig, ctx: SolveContext | None = None,
              oracle: bool = True) -> StepReport:
    """One optimizer step in place on ``model``.

    When ``ctx`` is given and ``oracle`` is set, every analog update vector is
    compared to the exact digital KFAC direction and the relative error is
    recorded per parameter.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("empty batch")
    loss, grads, tape = nn.loss_and_grads(model, images, labels)
    updates, factors = natural_updates(grads, tape, cfg.global_damping, ctx)
    report = StepReport(loss=loss, damping={k: (f.alpha, f.beta) for k, f in factors.items()})
    if ctx is not None and oracle:
        exact, _ = natural_updates(grads, tape, cfg.global_damping, None)
        for name in nn.PARAM_NAMES:
            ref = np.atleast_2d(exact[name])
            if np.any(ref != 0):
                report.update_rel_errors[name] = relative_error(
                    vectorize(np.atleast_2d(updates[name])), vectorize(ref))
    model.apply({k: -cfg.learning_rate * u for k, u in updates.items()})
    return report
