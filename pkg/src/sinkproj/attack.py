"""Projected-descent attack with a transport-cost threat model.

The attacker takes l-inf steepest-ascent steps on the model loss and
projects each iterate back onto the transport ball around the original
image.  The ball radius follows a geometric growth schedule: every
``growth_period`` iterations it is multiplied by ``growth_factor``, so a
single attack scans a whole range of budgets and records the smallest one
at which the model breaks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LocalCostKernel, MassVector, NumericalFailure
from .projection import SinkhornConfig, project

__all__ = [
    "EpsilonSchedule",
    "AttackResult",
    "EvaluationResult",
    "steepest_step_linf",
    "pgd_attack",
    "evaluate_adversarial_accuracy",
]


@dataclass(frozen=True)
class EpsilonSchedule:
    """Geometric ball-radius schedule for the attack loop.

    Iteration t (1-based) runs at radius
    eps_start * growth_factor ** (t // growth_period): growth lands before
    the projection of every growth_period-th iteration.
    """

    eps_start: float
    growth_factor: float
    growth_period: int
    max_pgd_iterations: int

    def __post_init__(self):
        if not self.eps_start > 0:
            raise ValueError(f"eps_start must be positive, got {self.eps_start!r}")
        if not self.growth_factor > 1:
            raise ValueError(f"growth_factor must exceed 1, got {self.growth_factor!r}")
        if self.growth_period < 1:
            raise ValueError("growth_period must be at least 1")
        if self.max_pgd_iterations < 1:
            raise ValueError("max_pgd_iterations must be at least 1")
        if not np.isfinite(self.eps_max):
            raise ValueError("implied maximum radius overflows")

    def eps_at(self, iteration: int) -> float:
        """Radius in force at a 1-based attack iteration."""
        if iteration < 1:
            raise ValueError("iterations are counted from 1")
        return self.eps_start * self.growth_factor ** (iteration // self.growth_period)

    @property
    def eps_max(self) -> float:
        return self.eps_start * self.growth_factor ** (self.max_pgd_iterations // self.growth_period)

    def distinct_radii(self) -> list[float]:
        """All radii the schedule can visit, ascending."""
        steps = self.max_pgd_iterations // self.growth_period
        return [self.eps_start * self.growth_factor**m for m in range(steps + 1)]


@dataclass
class AttackResult:
    """Outcome of one attack run.

    ``eps_at_success`` is the radius in force when the prediction first
    flipped (0.0 for inputs misclassified before any perturbation) and
    +inf when the attack never succeeded.
    """

    success: bool
    adversarial_example: MassVector
    eps_at_success: float
    iterations_used: int
    loss_trace: list[float] = field(default_factory=list)
    error: str | None = None


def steepest_step_linf(grad: np.ndarray, step: float) -> np.ndarray:
    """Steepest-ascent direction for an l-inf step ball: step * sign(grad)."""
    return step * np.sign(np.asarray(grad, dtype=float))


def pgd_attack(
    model,
    x: MassVector,
    label: int,
    schedule: EpsilonSchedule,
    step: float,
    sinkhorn_cfg: SinkhornConfig,
    kernel: LocalCostKernel,
) -> AttackResult:
    """Attack one example; stop at the first misclassification or the iteration cap.

    The model must expose ``predict(mass_vector) -> label`` and
    ``loss_and_input_grad(mass_vector, label) -> (loss, grad)``.  The start
    point is the unperturbed input (already-misclassified inputs count as
    broken at radius 0).  Stepped iterates are clamped at zero before
    projection, since the ball is a set of histograms.  A numerical failure
    inside the projection aborts the attack for this example and is
    recorded on the result instead of raising.
    """
    if step < 0:
        raise ValueError(f"step size must be non-negative, got {step!r}")
    if model.predict(x) != label:
        return AttackResult(True, x, 0.0, 0)

    adversarial = x
    trace: list[float] = []
    for iteration in range(1, schedule.max_pgd_iterations + 1):
        eps = schedule.eps_at(iteration)
        loss, grad = model.loss_and_input_grad(adversarial, label)
        trace.append(float(loss))
        if step > 0:
            stepped = np.maximum(adversarial.values + steepest_step_linf(grad, step), 0.0)
            try:
                adversarial = project(MassVector(stepped), x, eps, kernel, sinkhorn_cfg).z
            except NumericalFailure as exc:
                return AttackResult(False, adversarial, np.inf, iteration, trace, error=str(exc))
        if model.predict(adversarial) != label:
            return AttackResult(True, adversarial, eps, iteration, trace)
    return AttackResult(False, adversarial, np.inf, schedule.max_pgd_iterations, trace)


@dataclass
class EvaluationResult:
    """Accuracy-vs-radius curve plus per-example attack outcomes."""

    eps_grid: list[float]
    accuracies: list[float]
    eps_at_success: np.ndarray
    attack_errors: int

    def accuracy_at(self, eps: float) -> float:
        """Fraction of examples the attacker could not break within radius eps."""
        return float(np.mean(self.eps_at_success > eps))

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.eps_grid, self.accuracies))


def evaluate_adversarial_accuracy(
    model,
    dataset,
    schedule: EpsilonSchedule,
    step: float,
    sinkhorn_cfg: SinkhornConfig,
    kernel: LocalCostKernel,
) -> EvaluationResult:
    """Attack every example and compile the adversarial-accuracy curve.

    The curve point at radius eps is the fraction of examples whose attack
    succeeded only beyond eps (or never), so it is non-increasing by
    construction; a failed projection counts as a robust example.  The grid
    spans radius 0 (nominal accuracy on the dataset) plus every radius the
    schedule can visit.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    found = np.empty(len(dataset))
    errors = 0
    for i, (image, label) in enumerate(dataset):
        result = pgd_attack(model, image, int(label), schedule, step, sinkhorn_cfg, kernel)
        found[i] = result.eps_at_success
        if result.error is not None:
            errors += 1
    grid = [0.0] + schedule.distinct_radii()
    accuracies = [float(np.mean(found > eps)) for eps in grid]
    return EvaluationResult(grid, accuracies, found, errors)
