"""Exact ground-truth solvers for small instances.

Everything here exists to be trusted, not to be fast: transport distances
and support functions are solved as linear programs with primal-dual
certificates, and the exact ball projection as a convex QP whose KKT
residual is recomputed from the returned multipliers before anything is
reported.  Cost matrices are dense and cover all pixel pairs, deliberately
ignoring the window restriction of the fast solvers, so a feasibility
certificate from this module also certifies window-restricted plans.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .core import MassVector

__all__ = [
    "OracleError",
    "dense_cost_matrix",
    "exact_ot_distance",
    "exact_ball_projection",
    "exact_support_function",
    "rescale_to_match",
    "BallProjection",
]

_MAX_DISTANCE_PIXELS = 256
_MAX_QP_PIXELS = 64
_CERTIFICATE_TOL = 1e-8


class OracleError(RuntimeError):
    """An exact solve failed to produce a certified optimum."""


def dense_cost_matrix(height: int, width: int, exponent: float = 1.0) -> np.ndarray:
    """All-pairs pixel transport costs ((di^2 + dj^2)^(exponent/2)), row-major."""
    rows, cols = np.divmod(np.arange(height * width), width)
    sq = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    return sq.astype(float) ** (exponent / 2.0)


def rescale_to_match(z: MassVector, x: MassVector) -> MassVector:
    """Scale each channel of z so its total mass equals the matching channel of x."""
    factors = x.total_mass / z.total_mass
    return z.with_values(z.values * factors[:, None, None])


def _flat_channels(m: MassVector) -> np.ndarray:
    return m.values.reshape(m.channels, -1)


def _check_cost(cost: np.ndarray, n: int) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (n, n):
        raise ValueError(f"cost matrix shape {cost.shape} does not match {n} pixels")
    if np.any(cost < 0) or not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite and non-negative")
    return cost


def _marginal_rows(n: int) -> sparse.csr_matrix:
    return sparse.kron(sparse.eye(n), np.ones((1, n)), format="csr")


def _marginal_cols(n: int) -> sparse.csr_matrix:
    return sparse.kron(np.ones((1, n)), sparse.eye(n), format="csr")


def exact_ot_distance(x: MassVector, y: MassVector, cost: np.ndarray) -> float:
    """Optimal transport cost between x and y under a dense ground cost.

    Solves the transportation linear program exactly (HiGHS) per channel and
    sums the channel optima.  The reported value is accepted only if it
    matches the dual certificate to 1e-8; total masses must agree per
    channel to 1e-9 relative.
    """
    if x.values.shape != y.values.shape:
        raise ValueError(f"shapes differ: {x.values.shape} vs {y.values.shape}")
    n = x.grid_height * x.grid_width
    if n > _MAX_DISTANCE_PIXELS:
        raise ValueError(f"oracle distance supports at most {_MAX_DISTANCE_PIXELS} pixels, got {n}")
    cost = _check_cost(cost, n)
    mismatch = np.abs(x.total_mass - y.total_mass) / np.maximum(np.abs(x.total_mass), 1.0)
    if np.any(mismatch > 1e-9):
        raise ValueError(f"total masses differ beyond 1e-9 relative: {x.total_mass} vs {y.total_mass}")

    total = 0.0
    a_eq = sparse.vstack([_marginal_rows(n), _marginal_cols(n)[:-1]], format="csr")
    for xc, yc in zip(_flat_channels(x), _flat_channels(y)):
        if xc.sum() == 0.0:
            continue
        b_eq = np.concatenate([xc, yc[:-1]])
        res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if not res.success:
            raise OracleError(f"transport LP failed: {res.message}")
        dual_value = float(b_eq @ res.eqlin.marginals)
        if abs(res.fun - dual_value) > _CERTIFICATE_TOL * max(1.0, abs(res.fun)):
            raise OracleError(
                f"transport LP duality gap {res.fun - dual_value:.3e} exceeds certificate tolerance"
            )
        total += float(res.fun)
    return total


def exact_support_function(x: MassVector, y: np.ndarray, eps: float, cost: np.ndarray) -> float:
    """Exact value of max -z'y over the ball of transport cost at most eps around x.

    One linear program over all channels (the cost budget is shared);
    certified against its dual value to 1e-8.
    """
    if eps < 0:
        raise ValueError(f"ball radius must be non-negative, got {eps!r}")
    n = x.grid_height * x.grid_width
    if n > _MAX_QP_PIXELS:
        raise ValueError(f"oracle support function supports at most {_MAX_QP_PIXELS} pixels, got {n}")
    cost = _check_cost(cost, n)
    yv = np.asarray(y, dtype=float)
    if yv.ndim == 2:
        yv = yv[None]
    if yv.shape != x.values.shape:
        raise ValueError(f"objective field shape {yv.shape} does not match grid {x.values.shape}")

    channels = x.channels
    # Objective: minimize sum_c y_c[j] * plan_c[i, j]; support value is the negation.
    yf = yv.reshape(channels, -1)
    c_vec = np.concatenate([np.tile(yf[c], n) for c in range(channels)])
    a_eq = sparse.block_diag([_marginal_rows(n)] * channels, format="csr")
    b_eq = _flat_channels(x).ravel()
    a_ub = np.tile(cost.ravel(), channels)[None, :]
    res = linprog(c_vec, A_eq=a_eq, b_eq=b_eq, A_ub=a_ub, b_ub=[eps], bounds=(0, None), method="highs")
    if not res.success:
        raise OracleError(f"support-function LP failed: {res.message}")
    dual_value = float(b_eq @ res.eqlin.marginals) + eps * float(res.ineqlin.marginals[0])
    if abs(res.fun - dual_value) > _CERTIFICATE_TOL * max(1.0, abs(res.fun)):
        raise OracleError(
            f"support LP duality gap {res.fun - dual_value:.3e} exceeds certificate tolerance"
        )
    return -float(res.fun)


@dataclass(frozen=True)
class BallProjection:
    """Certified exact projection: the projected point, plan, and KKT residual."""

    z: MassVector
    plans: np.ndarray
    transport_cost: float
    kkt_residual: float
    solver: str


def _qp_kkt_residual(
    plans: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    x: np.ndarray,
    eps: float,
    cost: np.ndarray,
    nu: np.ndarray,
    eta: float,
) -> float:
    """Max-abs KKT violation of the projection QP at the given primal/dual pair."""
    residual = 0.0
    total_cost = float((plans * cost[None]).sum())
    for c in range(plans.shape[0]):
        residual = max(residual, float(np.abs(plans[c].sum(axis=1) - x[c]).max()))
        # Stationarity defines the multiplier of plan >= 0; it must be
        # non-negative and complementary to the plan.
        s = (z[c] - w[c])[None, :] + nu[c][:, None] + eta * cost
        residual = max(residual, float(np.maximum(-s, 0.0).max()))
        residual = max(residual, float(np.abs(s * plans[c]).max()))
        residual = max(residual, float(np.maximum(-plans[c], 0.0).max()))
    residual = max(residual, max(total_cost - eps, 0.0))
    residual = max(residual, max(-eta, 0.0))
    residual = max(residual, abs(eta * (total_cost - eps)))
    return residual


def exact_ball_projection(w: MassVector, x: MassVector, eps: float, cost: np.ndarray) -> BallProjection:
    """Exact Euclidean projection of w onto the transport ball around x.

    Convex QP over window-free transport plans, solved with interior-point
    solvers and accepted only when the recomputed KKT residual is below
    1e-8.  Failures raise OracleError; they are never silent.
    """
    import cvxpy as cp

    if w.values.shape != x.values.shape:
        raise ValueError(f"shapes differ: w {w.values.shape} vs x {x.values.shape}")
    if eps < 0:
        raise ValueError(f"ball radius must be non-negative, got {eps!r}")
    n = x.grid_height * x.grid_width
    if n > _MAX_QP_PIXELS:
        raise ValueError(f"oracle projection supports at most {_MAX_QP_PIXELS} pixels, got {n}")
    cost = _check_cost(cost, n)

    xf = _flat_channels(x)
    wf = _flat_channels(w)
    channels = x.channels
    ones = np.ones(n)

    plans = [cp.Variable((n, n), nonneg=True) for _ in range(channels)]
    marginals = [plans[c].T @ ones for c in range(channels)]
    eq = [plans[c] @ ones == xf[c] for c in range(channels)]
    budget = cp.sum([cp.sum(cp.multiply(plans[c], cost)) for c in range(channels)]) <= eps
    objective = cp.Minimize(0.5 * cp.sum([cp.sum_squares(wf[c] - marginals[c]) for c in range(channels)]))
    problem = cp.Problem(objective, eq + [budget])

    best: BallProjection | None = None
    errors = []
    for solver, kwargs in (
        (cp.CLARABEL, {}),
        (cp.SCS, {"eps": 1e-12, "max_iters": 200_000}),
    ):
        try:
            problem.solve(solver=solver, **kwargs)
        except cp.error.SolverError as exc:
            errors.append(f"{solver}: {exc}")
            continue
        if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            errors.append(f"{solver}: status {problem.status}")
            continue
        plan_values = np.stack([np.asarray(p.value) for p in plans])
        z_values = plan_values.sum(axis=1)
        nu = np.stack([np.asarray(c.dual_value).ravel() for c in eq])
        eta = float(np.asarray(budget.dual_value).ravel()[0])
        # Equality-dual sign conventions vary by solver; any sign that
        # certifies KKT certifies optimality.
        residual = min(
            _qp_kkt_residual(plan_values, z_values, wf, xf, eps, cost, nu, eta),
            _qp_kkt_residual(plan_values, z_values, wf, xf, eps, cost, -nu, eta),
        )
        candidate = BallProjection(
            z=MassVector(np.maximum(z_values, 0.0).reshape(x.values.shape)),
            plans=plan_values,
            transport_cost=float((plan_values * cost[None]).sum()),
            kkt_residual=residual,
            solver=str(solver),
        )
        if best is None or candidate.kkt_residual < best.kkt_residual:
            best = candidate
        if best.kkt_residual <= _CERTIFICATE_TOL:
            return best

    if best is None:
        raise OracleError("projection QP failed in every solver: " + "; ".join(errors))
    raise OracleError(
        f"projection QP reached KKT residual {best.kkt_residual:.3e}, above {_CERTIFICATE_TOL:.0e}"
    )
