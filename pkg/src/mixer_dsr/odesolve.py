"""Fixed-step differentiable RK4 and an adaptive 4(5) integrator for data generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import RK45

from . import diffengine as de

__all__ = [
    "TimeGrid",
    "Trajectory",
    "Rollout",
    "IntegrationBlowUp",
    "StiffnessError",
    "SingularFieldError",
    "integrate_rk4",
    "integrate_adaptive",
]


class IntegrationBlowUp(RuntimeError):
    """A non-finite state appeared; ``index`` is the first bad output row."""

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"non-finite state at output index {index}")


class StiffnessError(RuntimeError):
    pass


class SingularFieldError(ArithmeticError):
    """Raised by a right-hand side evaluated at (or next to) a singularity."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    n_steps: int = 100

    def __post_init__(self):
        if not self.t_end > self.t0:
            raise ValueError(f"t_end ({self.t_end}) must exceed t0 ({self.t0})")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t_end, self.n_steps + 1)


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, d), or (n_steps + 1, N, d) for a batch

    def __post_init__(self):
        if self.states.shape[0] != self.grid.n_steps + 1:
            raise ValueError(
                f"expected {self.grid.n_steps + 1} rows, got {self.states.shape[0]}"
            )


@dataclass
class Rollout:
    """Differentiable result of :func:`integrate_rk4`.

    ``values[k]`` is the ``(N, d)`` state at output time ``k``.
    """

    grid: TimeGrid
    values: list

    def stacked(self) -> de.Value:
        """All output states as one ``((n_steps + 1) * N, d)`` Value, time-major."""
        return de.concat(self.values, axis=0)

    def to_trajectory(self) -> Trajectory:
        states = np.stack([v.data for v in self.values])
        if states.shape[1] == 1:
            states = states[:, 0, :]
        return Trajectory(self.grid, states)


def _as_rows(z0) -> de.Value:
    z0 = z0 if isinstance(z0, de.Value) else de.constant(z0)
    if z0.ndim == 1:
        # (1, 1) * (d,) broadcasts to (1, d) while keeping the graph intact
        return de.mul(de.constant(np.ones((1, 1))), z0)
    return z0


def integrate_rk4(
    field: Callable[[de.Value], de.Value],
    z0,
    grid: TimeGrid,
    substeps: int = 2,
    check_finite: bool = True,
) -> Rollout:
    """Classical RK4 with ``substeps`` internal steps per output interval.

    ``field`` maps an ``(N, d)`` Value to its time derivative.  Every output
    state stays connected to the graph, so gradients flow back to ``z0`` and
    to whatever parameters ``field`` closes over.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = grid.dt / substeps
    half, sixth = 0.5 * h, h / 6.0
    z = _as_rows(z0)
    values = [z]
    for k in range(1, grid.n_steps + 1):
        for _ in range(substeps):
            k1 = field(z)
            k2 = field(de.lincomb((z, k1), (1.0, half)))
            k3 = field(de.lincomb((z, k2), (1.0, half)))
            k4 = field(de.lincomb((z, k3), (1.0, h)))
            z = de.lincomb((z, k1, k2, k3, k4), (1.0, sixth, 2.0 * sixth, 2.0 * sixth, sixth))
        if check_finite and not np.isfinite(z.data).all():
            raise IntegrationBlowUp(k)
        values.append(z)
    return Rollout(grid, values)


def integrate_adaptive(
    field: Callable[[np.ndarray], np.ndarray],
    z0,
    grid: TimeGrid,
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> Trajectory:
    """Dormand-Prince 5(4) (scipy's RK45) sampled exactly on ``grid``.

    Grid points inside a step are read from the step's dense-output
    interpolant.  Steps shrinking below ``1e-12 * (t_end - t0)`` raise
    :class:`StiffnessError`; a :class:`SingularFieldError` from ``field`` is
    reported as :class:`IntegrationBlowUp` at the pending grid index.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    times = grid.times()
    y0 = np.array(z0, dtype=np.float64)
    out = np.empty((times.size, y0.size))
    out[0] = y0
    min_step = 1e-12 * (grid.t_end - grid.t0)
    k = 1
    try:
        solver = RK45(lambda t, y: np.asarray(field(y), dtype=np.float64),
                      grid.t0, y0, grid.t_end, rtol=rtol, atol=atol)
        while k < times.size:
            message = solver.step()
            if solver.status == "failed":
                raise StiffnessError(f"adaptive step failed near t={solver.t}: {message}")
            if solver.status == "running" and solver.step_size < min_step:
                raise StiffnessError(
                    f"step size {solver.step_size:.3e} underflowed below {min_step:.3e} at t={solver.t}"
                )
            if not np.isfinite(solver.y).all():
                raise IntegrationBlowUp(k)
            dense = None
            while k < times.size and times[k] <= solver.t:
                if times[k] == solver.t:
                    out[k] = solver.y
                else:
                    if dense is None:
                        dense = solver.dense_output()
                    out[k] = dense(times[k])
                k += 1
    except SingularFieldError as exc:
        raise IntegrationBlowUp(k, f"singular right-hand side before output index {k}: {exc}") from exc
    if not np.isfinite(out).all():
        bad = int(np.argmax(~np.isfinite(out).all(axis=1)))
        raise IntegrationBlowUp(bad)
    return Trajectory(grid, out)
