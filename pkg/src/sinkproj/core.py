"""Grid mass histograms and the local-window transport-cost machinery.

Images are treated as non-negative mass distributions over a pixel grid.
Transport is restricted to a square window around each pixel, so the full
n-by-n cost matrix never needs to be materialized: every matrix-vector
product the solvers need reduces to a windowed sum over pixel offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "MassVector",
    "LocalCostKernel",
    "NumericalFailure",
    "build_cost_kernel",
    "local_matvec",
    "local_matvec_t",
    "local_log_matvec",
    "local_log_matvec_t",
    "normalize_to_unit_mass",
    "shifted_stack",
]


class NumericalFailure(RuntimeError):
    """A solver update produced NaN/overflow or an impossible configuration.

    The message always names the offending step.
    """

    def __init__(self, step: str, message: str):
        super().__init__(f"{step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MassVector:
    """Non-negative mass histogram over a (channels, height, width) grid.

    The backing array is copied and frozen at construction; ``total_mass``
    caches the per-channel sums.  A plain (height, width) array is promoted
    to a single channel.
    """

    values: np.ndarray
    total_mass: np.ndarray = field(init=False, compare=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(
                f"expected a (channels, height, width) array, got shape {np.shape(self.values)}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("mass entries must be finite")
        if np.any(arr < 0):
            raise ValueError("mass entries must be non-negative")
        arr.flags.writeable = False
        mass = arr.sum(axis=(1, 2))
        mass.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "total_mass", mass)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid_height(self) -> int:
        return self.values.shape[1]

    @property
    def grid_width(self) -> int:
        return self.values.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def with_values(self, values: np.ndarray) -> "MassVector":
        """A new histogram on the same grid with replaced entries."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        if values.shape != self.values.shape:
            raise ValueError(f"shape {values.shape} does not match grid {self.values.shape}")
        return MassVector(values)


@dataclass(frozen=True)
class LocalCostKernel:
    """Per-offset transport costs over a square window of odd side ``size``.

    Entry (di + r, dj + r) holds the cost of moving one unit of mass by the
    pixel offset (di, dj), with r = size // 2.
    """

    size: int
    exponent: float
    costs: np.ndarray

    def __post_init__(self):
        costs = np.array(self.costs, dtype=float)
        if costs.shape != (self.size, self.size):
            raise ValueError(f"cost table shape {costs.shape} does not match size {self.size}")
        if np.any(costs < 0):
            raise ValueError("kernel costs must be non-negative")
        costs.flags.writeable = False
        object.__setattr__(self, "costs", costs)

    @property
    def radius(self) -> int:
        return self.size // 2

    @property
    def is_symmetric(self) -> bool:
        """True when the cost is invariant under offset negation."""
        return bool(np.array_equal(self.costs, self.costs[::-1, ::-1]))

    def flipped(self) -> np.ndarray:
        """Cost table of the reversed offsets, used for transposed products."""
        return self.costs[::-1, ::-1]

    @property
    def max_cost(self) -> float:
        return float(self.costs.max())


@lru_cache(maxsize=None)
def _cached_kernel(size: int, exponent: float) -> LocalCostKernel:
    offsets = np.arange(-(size // 2), size // 2 + 1, dtype=float)
    squared = offsets[:, None] ** 2 + offsets[None, :] ** 2
    return LocalCostKernel(size=size, exponent=exponent, costs=squared ** (exponent / 2.0))


def build_cost_kernel(size: int, exponent: float) -> LocalCostKernel:
    """Window cost table with entry (di, dj) equal to (di^2 + dj^2)^(exponent/2).

    ``size`` must be a positive odd integer; ``exponent`` must be positive.
    Tables are cached and shared read-only across solver calls.
    """
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {size!r}")
    if not exponent > 0:
        raise ValueError(f"cost exponent must be positive, got {exponent!r}")
    return _cached_kernel(int(size), float(exponent))


@lru_cache(maxsize=None)
def _shift_slices(height: int, width: int, size: int):
    """Source/destination slice pairs for every offset of a size x size window.

    Offsets are enumerated row-major, matching ``LocalCostKernel.costs.ravel()``.
    """
    radius = size // 2
    entries = []
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            dst = (
                slice(max(0, -di), height - max(0, di)),
                slice(max(0, -dj), width - max(0, dj)),
            )
            src = (
                slice(max(0, di), height - max(0, -di)),
                slice(max(0, dj), width - max(0, -dj)),
            )
            entries.append((dst, src))
    return tuple(entries)


def shifted_stack(values: np.ndarray, size: int, fill: float) -> np.ndarray:
    """Stack of window-shifted copies of ``values``.

    Output entry (d, ..., i, j) equals values[..., i + di, j + dj] for the
    d-th offset (di, dj), or ``fill`` where the shift leaves the grid.
    Grids are never padded or wrapped: windows are clipped at the edges.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim < 2:
        raise ValueError("expected an array with trailing (height, width) axes")
    height, width = values.shape[-2:]
    out = np.full((size * size,) + values.shape, fill, dtype=float)
    for d, (dst, src) in enumerate(_shift_slices(height, width, size)):
        out[(d, Ellipsis) + dst] = values[(Ellipsis,) + src]
    return out


def _as_window_table(kernel_values: np.ndarray) -> np.ndarray:
    table = np.asarray(kernel_values, dtype=float)
    if table.ndim != 2 or table.shape[0] != table.shape[1] or table.shape[0] % 2 == 0:
        raise ValueError(f"window table must be square with odd side, got shape {table.shape}")
    return table


def local_matvec(kernel_values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Windowed product: out[i] = sum over in-grid offsets d of kernel[d] * u[i + d].

    Realizes the product of the window-supported n-by-n matrix
    K[i, j] = kernel[j - i] with a per-pixel vector, without materializing K.
    """
    table = _as_window_table(kernel_values)
    u = np.asarray(u, dtype=float)
    stack = shifted_stack(u, table.shape[0], 0.0)
    return np.tensordot(table.ravel(), stack, axes=(0, 0))


def local_matvec_t(kernel_values: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Transposed windowed product: out[j] = sum over i of kernel[j - i] * u[i].

    Equals ``local_matvec`` with the offset-reversed table; for symmetric
    tables the two coincide (asserted in tests, not assumed here).
    """
    table = _as_window_table(kernel_values)
    return local_matvec(table[::-1, ::-1], u)


def _logsumexp_over_stack(stack: np.ndarray) -> np.ndarray:
    """Log-sum-exp over axis 0, mapping all-(-inf) columns to -inf without NaNs."""
    top = stack.max(axis=0)
    anchored = np.where(np.isfinite(top), top, 0.0)
    total = np.exp(stack - anchored).sum(axis=0)
    with np.errstate(divide="ignore"):
        out = np.where(np.isfinite(top), np.log(total) + anchored, -np.inf)
    return out


def local_log_matvec(log_kernel: np.ndarray, log_u: np.ndarray) -> np.ndarray:
    """Log-domain windowed product: log sum over offsets of exp(logk[d] + log_u[i + d]).

    Entries of -inf denote exact zeros and survive the reduction unchanged.
    """
    table = _as_window_table(log_kernel)
    stack = shifted_stack(np.asarray(log_u, dtype=float), table.shape[0], -np.inf)
    flat = table.ravel().reshape((-1,) + (1,) * (stack.ndim - 1))
    return _logsumexp_over_stack(stack + flat)


def local_log_matvec_t(log_kernel: np.ndarray, log_u: np.ndarray) -> np.ndarray:
    """Transposed variant of ``local_log_matvec`` (offset-reversed table)."""
    table = _as_window_table(log_kernel)
    return local_log_matvec(table[::-1, ::-1], log_u)


def normalize_to_unit_mass(img: MassVector) -> tuple[MassVector, np.ndarray]:
    """Scale each channel to total mass one; the returned per-channel scale undoes it."""
    scale = img.total_mass.copy()
    if np.any(scale <= 0):
        raise ValueError("cannot normalize a channel with zero total mass")
    return img.with_values(img.values / scale[:, None, None]), scale
