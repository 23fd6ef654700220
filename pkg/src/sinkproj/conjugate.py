"""Support-function maximization over a transport-cost ball.

Duality-based robustness certificates need the value max -z'y over the
ball of histograms within transport cost eps of x.  The entropy-regularized
version reuses the projection solver wholesale: the column potential is
frozen at beta = lam * y (its closed-form optimum for a linear objective),
leaving only the alpha and psi blocks to iterate.  The alpha and psi
updates below are the same functions the projection solver calls; they are
imported, not reimplemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LocalCostKernel, MassVector
from .projection import (
    DualState,
    SinkhornConfig,
    TransportPlan,
    alpha_step,
    initial_state,
    psi_newton_step,
    _max_change,
)

__all__ = ["ConjugateResult", "conjugate_solve"]


@dataclass(frozen=True)
class ConjugateResult:
    """Support-function solve outcome: the maximizing point and its value."""

    z: MassVector
    objective: float
    transport_cost: float
    iterations: int
    converged: bool
    final_residual: float
    plan: TransportPlan


def _as_field(y: np.ndarray, like: MassVector) -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != like.values.shape:
        raise ValueError(f"objective field shape {arr.shape} does not match grid {like.values.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("objective field must be finite")
    return arr


def conjugate_solve(
    y: np.ndarray,
    x: MassVector,
    eps: float,
    kernel: LocalCostKernel,
    cfg: SinkhornConfig,
) -> ConjugateResult:
    """Maximize -z'y over the eps transport ball around x, entropy-regularized.

    Runs the projection sweep with beta pinned at lam * y, so only alpha and
    psi move.  Returns the plan's target marginal as the maximizing point z
    and the primal value -z'y (the maximized orientation).
    """
    if not eps > 0:
        raise ValueError(f"ball radius must be positive, got {eps!r}")
    if not np.allclose(x.total_mass, 1.0, atol=1e-6):
        raise ValueError("source histogram must be normalized to unit mass per channel")
    yv = _as_field(y, like=x)

    base = initial_state(x.values.shape, cfg.lam)
    state = DualState(alpha=base.alpha, beta=cfg.lam * yv, psi=1.0, lam=cfg.lam)
    converged = False
    residual = np.inf
    psi_delta = np.inf
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        prev_alpha = state.alpha
        state = alpha_step(state, x, kernel)
        residual = max(_max_change(prev_alpha, state.alpha), psi_delta)
        if residual < cfg.convergence_tol:
            converged = True
            break
        previous_psi = state.psi
        state = psi_newton_step(state, eps, x, None, kernel, shrink=cfg.newton_shrink)
        psi_delta = abs(state.psi - previous_psi)

    plan = TransportPlan(alpha=state.alpha, beta=state.beta, psi=state.psi, kernel=kernel)
    z = MassVector(np.maximum(plan.col_sums(), 0.0))
    objective = -float(z.values.ravel() @ yv.ravel())
    return ConjugateResult(
        z=z,
        objective=objective,
        transport_cost=plan.transport_cost(),
        iterations=iterations,
        converged=converged,
        final_residual=residual,
        plan=plan,
    )
