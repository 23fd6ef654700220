"""Approximate projection onto a transport-cost ball by dual block-coordinate ascent.

The entropy-regularized projection of a point w onto the set of histograms
within transport cost eps of a source x has a smooth dual in per-pixel
potentials (alpha, beta) and a scalar multiplier psi >= 0 on the cost
constraint.  One sweep maximizes the dual over alpha in closed form, over
beta in closed form via the Lambert W function, and takes a damped Newton
step on psi.  All reductions run in the log domain over local windows, so
the iteration is linear in the number of pixels.

Multi-channel inputs keep per-channel potentials but share a single psi:
the cost budget eps constrains the total transport cost summed over
channels, while marginals are enforced per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    LocalCostKernel,
    MassVector,
    NumericalFailure,
    local_log_matvec,
    local_log_matvec_t,
    shifted_stack,
)
from .lambertw import lambert_w_log

__all__ = [
    "SinkhornConfig",
    "DualState",
    "TransportPlan",
    "ProjectionResult",
    "initial_state",
    "alpha_step",
    "beta_step",
    "psi_newton_step",
    "recover_primal",
    "dual_objective",
    "project",
]


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver knobs: regularization strength, iteration cap, stopping rule.

    ``lam`` scales the entropy penalty (1/lam) * sum(plan * log(plan)); larger
    values give a sharper projection.  A sweep counts as converged when the
    max-abs change of (alpha, beta, psi) drops below ``convergence_tol``.
    """

    lam: float
    max_iterations: int = 500
    convergence_tol: float = 1e-4
    newton_shrink: float = 0.5

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if not 0.0 < self.newton_shrink < 1.0:
            raise ValueError("newton_shrink must lie in (0, 1)")


@dataclass
class DualState:
    """Dual iterate: row/column potentials per pixel, cost multiplier, regularization.

    ``alpha`` entries are -inf exactly where the source pixel carries no
    mass (its plan row is identically zero); +inf and NaN are never valid.
    """

    alpha: np.ndarray
    beta: np.ndarray
    psi: float
    lam: float

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must share a shape")
        # alpha < inf is False for NaN and +inf, True for the -inf sentinel.
        if not np.all(self.alpha < np.inf):
            raise ValueError("alpha entries must be finite or -inf")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta entries must be finite")
        if not np.isfinite(self.psi) or self.psi < 0:
            raise ValueError(f"psi must be finite and non-negative, got {self.psi!r}")
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam!r}")


def initial_state(shape: tuple[int, int, int], lam: float) -> DualState:
    """Uniform starting point: alpha = beta = log(1/n) per channel, psi = 1."""
    channels, height, width = shape
    level = np.full((channels, height, width), np.log(1.0 / (height * width)))
    return DualState(alpha=level, beta=level.copy(), psi=1.0, lam=lam)


def _log_window(kernel: LocalCostKernel, psi: float, transposed: bool = False) -> np.ndarray:
    costs = kernel.flipped() if transposed else kernel.costs
    return -psi * costs - 1.0


@dataclass(frozen=True)
class TransportPlan:
    """Window-supported plan entries exp(alpha_i - psi*C_ij - 1 + beta_j), lazily reduced.

    ``window_entries`` is oriented by source pixel: entry (d, c, i) is the
    mass channel c moves from pixel i to pixel i + offset(d).
    """

    alpha: np.ndarray
    beta: np.ndarray
    psi: float
    kernel: LocalCostKernel
    _entries: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        size = self.kernel.size
        stack = shifted_stack(self.beta, size, -np.inf)
        logk = _log_window(self.kernel, self.psi).ravel()
        logs = stack + self.alpha[None] + logk.reshape((-1,) + (1,) * self.alpha.ndim)
        entries = np.exp(logs)
        entries.flags.writeable = False
        object.__setattr__(self, "_entries", entries)

    def window_entries(self) -> np.ndarray:
        """Plan entries as a (size*size, channels, height, width) array."""
        return self._entries

    def row_sums(self) -> np.ndarray:
        """Source marginal of the plan, per pixel."""
        return self._entries.sum(axis=0)

    def col_sums(self) -> np.ndarray:
        """Target marginal of the plan, per pixel."""
        size = self.kernel.size
        stack = shifted_stack(self.alpha, size, -np.inf)
        logk = _log_window(self.kernel, self.psi, transposed=True).ravel()
        logs = stack + logk.reshape((-1,) + (1,) * self.alpha.ndim)
        return np.exp(logs).sum(axis=0) * np.exp(self.beta)

    def total_mass(self) -> float:
        return float(self._entries.sum())

    def transport_cost(self) -> float:
        """Total moving cost of the plan, summed over channels."""
        per_offset = self._entries.reshape(self._entries.shape[0], -1).sum(axis=1)
        return float(per_offset @ self.kernel.costs.ravel())

    def squared_cost_mass(self) -> float:
        """Plan mass weighted by squared offset costs (Newton curvature term)."""
        per_offset = self._entries.reshape(self._entries.shape[0], -1).sum(axis=1)
        return float(per_offset @ (self.kernel.costs.ravel() ** 2))

    def dense(self, channel: int = 0) -> np.ndarray:
        """Materialized n-by-n plan for one channel (small grids only)."""
        _, height, width = self.alpha.shape
        n = height * width
        radius = self.kernel.radius
        out = np.zeros((n, n))
        entries = self._entries
        d = 0
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                for i in range(height):
                    ii = i + di
                    if not 0 <= ii < height:
                        continue
                    for j in range(width):
                        jj = j + dj
                        if 0 <= jj < width:
                            out[i * width + j, ii * width + jj] = entries[d, channel, i, j]
                d += 1
        return out


@dataclass(frozen=True)
class ProjectionResult:
    """Outcome of a projection: the projected point plus solver diagnostics.

    At convergence the plan's transport cost respects the ball radius up to
    the documented slack eps * (1 + 1e-3) + 1e-6; ``clamped_mass`` reports
    how much (floating-point dust) was clipped to keep the output
    non-negative.
    """

    z: MassVector
    transport_cost: float
    iterations: int
    converged: bool
    final_residual: float
    clamped_mass: float
    plan: TransportPlan
    dual_state: DualState


def alpha_step(state: DualState, x: MassVector, kernel: LocalCostKernel) -> DualState:
    """Closed-form row-potential update; rescales plan rows to the source marginal.

    Pixels with zero source mass get the -inf sentinel, so their plan rows
    vanish exactly instead of perturbing the problem with floored mass.
    """
    xv = x.values
    if xv.shape != state.alpha.shape:
        raise ValueError(f"source shape {xv.shape} does not match state {state.alpha.shape}")
    window = local_log_matvec(_log_window(kernel, state.psi), state.beta)
    if np.any((xv > 0) & np.isneginf(window)):
        raise NumericalFailure("alpha_step", "empty transport window for a pixel with positive mass")
    with np.errstate(divide="ignore", invalid="ignore"):
        new_alpha = np.where(xv > 0, np.log(xv) - window, -np.inf)
    try:
        return replace(state, alpha=new_alpha)
    except ValueError as exc:
        raise NumericalFailure("alpha_step", str(exc)) from exc


def beta_step(state: DualState, w: MassVector, kernel: LocalCostKernel) -> DualState:
    """Closed-form column-potential update via the Lambert W function.

    Computed entirely in log-argument form,
    beta = lam*w - W(exp(log(lam) + lam*w + log-window-sum)), which stays
    finite at regularization strengths where exp(lam*w) overflows.  After
    this step the plan's column sums equal w - beta/lam exactly.
    """
    wv = w.values
    if wv.shape != state.beta.shape:
        raise ValueError(f"target shape {wv.shape} does not match state {state.beta.shape}")
    window = local_log_matvec_t(_log_window(kernel, state.psi), state.alpha)
    log_argument = np.log(state.lam) + state.lam * wv + window
    new_beta = state.lam * wv - lambert_w_log(log_argument)
    try:
        return replace(state, beta=new_beta)
    except ValueError as exc:
        raise NumericalFailure("beta_step", str(exc)) from exc


def psi_newton_step(
    state: DualState,
    eps: float,
    x: MassVector | None,
    w: MassVector | None,
    kernel: LocalCostKernel,
    shrink: float = 0.5,
) -> DualState:
    """Damped Newton update of the cost multiplier, kept non-negative by halving.

    The dual gradient in psi is the plan's cost overshoot (transport cost
    minus eps) and the curvature is minus the squared-cost mass.  The step
    length starts at one and shrinks until psi stays non-negative; when psi
    sits at zero with an inactive constraint no positive length works, so
    the update clamps there (the halving loop in the plain formulation
    would never terminate).
    """
    plan = TransportPlan(alpha=state.alpha, beta=state.beta, psi=state.psi, kernel=kernel)
    gradient = plan.transport_cost() - eps
    curvature = -plan.squared_cost_mass()
    if not np.isfinite(gradient) or not np.isfinite(curvature):
        raise NumericalFailure("psi_newton_step", "non-finite Newton quantities")
    if curvature == 0.0:
        raise NumericalFailure("psi_newton_step", "flat curvature: plan carries no moving cost")
    ratio = gradient / curvature
    if ratio <= 0:
        new_psi = state.psi - ratio
    else:
        t = 1.0
        while state.psi - t * ratio < 0 and t > 1e-30:
            t *= shrink
        new_psi = max(state.psi - t * ratio, 0.0)
    return replace(state, psi=new_psi)


def recover_primal(
    state: DualState, w: MassVector, kernel: LocalCostKernel
) -> tuple[MassVector, TransportPlan]:
    """Primal point z = w - beta/lam and the implied plan accessor.

    Negative entries of z (cancellation dust of order machine epsilon; the
    analytic value is a Lambert W over lam, hence non-negative) are clamped
    to zero.
    """
    raw = w.values - state.beta / state.lam
    z = MassVector(np.maximum(raw, 0.0))
    plan = TransportPlan(alpha=state.alpha, beta=state.beta, psi=state.psi, kernel=kernel)
    return z, plan


def dual_objective(
    state: DualState,
    x: MassVector,
    w: MassVector,
    eps: float,
    kernel: LocalCostKernel,
) -> float:
    """Value of the dual function g(alpha, beta, psi) being ascended."""
    plan = TransportPlan(alpha=state.alpha, beta=state.beta, psi=state.psi, kernel=kernel)
    xv = x.values
    inner_x = float(np.sum(state.alpha[xv > 0] * xv[xv > 0]))
    return (
        -float(state.beta.ravel() @ state.beta.ravel()) / (2.0 * state.lam)
        - state.psi * eps
        + inner_x
        + float(state.beta.ravel() @ w.values.ravel())
        - plan.total_mass()
    )


def _max_change(old: np.ndarray, new: np.ndarray) -> float:
    with np.errstate(invalid="ignore"):
        diff = np.abs(new - old)
    diff[np.isneginf(old) & np.isneginf(new)] = 0.0
    return float(diff.max()) if diff.size else 0.0


def project(
    w: MassVector,
    x: MassVector,
    eps: float,
    kernel: LocalCostKernel,
    cfg: SinkhornConfig,
) -> ProjectionResult:
    """Project w onto the ball of histograms within transport cost eps of x.

    Sweeps alpha, beta, psi until the max-abs change over a full cycle
    drops below the configured tolerance.  A converged run ends immediately
    after a beta update, so the reported plan's column sums match the
    returned point to solver precision; its row sums match x up to the
    stopping tolerance.  Non-convergence returns the last iterate flagged
    ``converged=False`` rather than raising.
    """
    if w.values.shape != x.values.shape:
        raise ValueError(f"shapes differ: w {w.values.shape} vs x {x.values.shape}")
    if not eps > 0:
        raise ValueError(f"ball radius must be positive, got {eps!r}")
    if not np.allclose(x.total_mass, 1.0, atol=1e-6):
        raise ValueError("source histogram must be normalized to unit mass per channel")

    state = initial_state(x.values.shape, cfg.lam)
    converged = False
    residual = np.inf
    psi_delta = np.inf
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        prev_alpha, prev_beta = state.alpha, state.beta
        state = alpha_step(state, x, kernel)
        state = beta_step(state, w, kernel)
        residual = max(
            _max_change(prev_alpha, state.alpha),
            _max_change(prev_beta, state.beta),
            psi_delta,
        )
        if residual < cfg.convergence_tol:
            converged = True
            break
        previous_psi = state.psi
        state = psi_newton_step(state, eps, x, w, kernel, shrink=cfg.newton_shrink)
        psi_delta = abs(state.psi - previous_psi)

    raw = w.values - state.beta / state.lam
    clamped_mass = float(np.minimum(raw, 0.0).sum())
    z, plan = recover_primal(state, w, kernel)
    return ProjectionResult(
        z=z,
        transport_cost=plan.transport_cost(),
        iterations=iterations,
        converged=converged,
        final_residual=residual,
        clamped_mass=-clamped_mass,
        plan=plan,
        dual_state=state,
    )
