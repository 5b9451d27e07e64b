"""Recursive block inversion on crossbar-sized leaves (BlockAMC).

A matrix larger than the crossbar is split into a 2x2 block system and solved
by block elimination: the leading block and the Schur complement are solved
recursively, every product and subtraction is done digitally, and only leaves
that fit the crossbar are handed to the refined analog solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .circuit import ConverterConfig
from .device import DeviceConfig, program_matrix
from .errors import ContractError, SingularSchurError, SolverError
from .hpinv import DEFAULT_MAX_ITERS, SolveStats, hp_solve
from .numeric import DTYPE, FixedPointSpec, as_matrix

SCHUR_MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Leaf:
    size: int


@dataclass(frozen=True)
class Node:
    size: int
    left: "PartitionTree"
    right: "PartitionTree"


PartitionTree = Union[Leaf, Node]


def partition_plan(n: int, leaf_max: int) -> PartitionTree:
    """Balanced halving: ceil(n/2) leading block, floor(n/2) trailing block."""
    if n < 1 or leaf_max < 1:
        raise ContractError("partition_plan needs n >= 1 and leaf_max >= 1")
    if n <= leaf_max:
        return Leaf(n)
    n1 = (n + 1) // 2
    return Node(n, partition_plan(n1, leaf_max), partition_plan(n - n1, leaf_max))


def leaf_sizes(tree: PartitionTree) -> list[int]:
    if isinstance(tree, Leaf):
        return [tree.size]
    return leaf_sizes(tree.left) + leaf_sizes(tree.right)


def render_tree(tree: PartitionTree) -> str:
    """Compact text form, e.g. ``9[5[3,2],4]``."""
    if isinstance(tree, Leaf):
        return str(tree.size)
    return f"{tree.size}[{render_tree(tree.left)},{render_tree(tree.right)}]"


@dataclass
class SolveContext:
    dev: DeviceConfig = field(default_factory=DeviceConfig)
    conv: ConverterConfig = field(default_factory=ConverterConfig)
    spec: FixedPointSpec = field(default_factory=lambda: FixedPointSpec(24))
    max_iters: int = DEFAULT_MAX_ITERS
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    stats: SolveStats = field(default_factory=SolveStats)
    # called with (matrix, rhs_block) for every analog leaf; used for calibration sampling
    leaf_hook: Optional[Callable[[np.ndarray, np.ndarray], None]] = None


def block_solve(a, b, ctx: SolveContext, _path: str = "root") -> np.ndarray:
    """Solve ``A X = B`` for an ``n x n`` matrix and ``n x k`` (or length-n) ``B``."""
    a = as_matrix(a, square=True)
    b = np.asarray(b, dtype=DTYPE)
    single = b.ndim == 1
    rhs = b[:, None] if single else b
    if rhs.ndim != 2 or rhs.shape[0] != a.shape[0]:
        raise ContractError(f"right-hand side shape {b.shape} does not match {a.shape}")
    x = _solve(a, rhs, ctx, _path)
    return x[:, 0] if single else x


def _solve(a, b, ctx: SolveContext, path: str) -> np.ndarray:
    n = a.shape[0]
    if n <= ctx.dev.leaf_max:
        return _leaf_solve(a, b, ctx, path)

    n1 = (n + 1) // 2
    a11, a12 = a[:n1, :n1], a[:n1, n1:]
    a21, a22 = a[n1:, :n1], a[n1:, n1:]
    b1, b2 = b[:n1], b[n1:]
    k = b.shape[1]

    w = _solve(a11, np.hstack([b1, a12]), ctx, f"{path}/A11")
    w_left, w_right = w[:, :k], w[:, k:]
    schur = a22 - a21 @ w_right
    cond = np.linalg.cond(schur)
    # a complement that is round-off relative to A is singular even if its cond looks tame
    vanished = np.linalg.norm(schur) <= np.finfo(DTYPE).eps * n * np.linalg.norm(a)
    if vanished or not np.isfinite(cond) or cond > SCHUR_MAX_CONDITION:
        raise SingularSchurError(f"Schur complement at {path} is singular (cond ~ {cond:.3g})")
    x2 = _solve(schur, b2 - a21 @ w_left, ctx, f"{path}/S")
    x1 = w_left - w_right @ x2
    return np.vstack([x1, x2])


def _leaf_solve(a, b, ctx: SolveContext, path: str) -> np.ndarray:
    x = np.zeros_like(b)
    nonzero = np.any(b != 0, axis=0)
    if not np.any(nonzero):
        return x
    if a.shape[0] == 1:
        # scalars are divided digitally; no crossbar is spent on them
        if a[0, 0] == 0:
            raise SingularSchurError(f"zero pivot at {path}")
        ctx.stats.add_scalar(int(np.count_nonzero(nonzero)))
        return b / a[0, 0]
    if ctx.leaf_hook is not None:
        ctx.leaf_hook(a, b[:, nonzero])
    state = program_matrix(a, ctx.dev, ctx.rng)
    ctx.stats.add_program()
    try:
        x[:, nonzero], _ = hp_solve(a, b[:, nonzero], state, ctx.spec, ctx.max_iters,
                                    ctx.dev, ctx.conv, ctx.rng, ctx.stats)
    except SolverError as err:
        raise err.annotate(path)
    return x


def precondition_update(grad_w, a_factor, g_factor, alpha: float, beta: float,
                        ctx: SolveContext) -> np.ndarray:
    """``(G + beta I)^-1 grad_w (A + alpha I)^-1`` via two serial block solves.

    The right multiplication is done by solving against the transposed
    intermediate, which is valid because the damped factors are symmetric.
    """
    grad_w = as_matrix(grad_w, name="grad_w")
    a_factor = as_matrix(a_factor, square=True, name="A factor")
    g_factor = as_matrix(g_factor, square=True, name="G factor")
    g_rows, a_cols = grad_w.shape
    if g_factor.shape[0] != g_rows or a_factor.shape[0] != a_cols:
        raise ContractError(
            f"factor sizes {g_factor.shape}, {a_factor.shape} do not fit gradient {grad_w.shape}")
    if alpha < 0 or beta < 0:
        raise ContractError("damping must be non-negative")
    u = block_solve(g_factor + beta * np.eye(g_rows), grad_w, ctx, "G-stage")
    return block_solve(a_factor + alpha * np.eye(a_cols), u.T, ctx, "A-stage").T


def solve_statistics(ctx: SolveContext) -> dict:
    snap = ctx.stats.snapshot()
    return {
        "leaf_solves": snap["leaf_solves"],
        "lp_vector_outputs": snap["lp_vector_outputs"],
        "refinement_iterations_total": snap["refinement_iterations_total"],
        "mean_iterations": snap["mean_iterations"],
        "crossbar_programs": snap["crossbar_programs"],
    }
