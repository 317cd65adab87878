"""Two-dimensional ODE families used by the synthetic benchmarks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .odesolve import SingularFieldError

__all__ = ["OdeFamily", "FAMILIES", "ODEBENCH_10", "ODEBENCH_2", "LOTKA_VOLTERRA", "get_family"]

Rhs = Callable[[np.ndarray, tuple], np.ndarray]


@dataclass(frozen=True)
class OdeFamily:
    id: int | str
    name: str
    rhs: Rhs
    params: tuple[float, ...]
    ic_refs: tuple[tuple[float, ...], tuple[float, ...]]
    horizon: float
    dim: int = 2
    n_steps: int = 100
    # indices of the parameters that vary across environments (default: all)
    varied: tuple[int, ...] | None = None
    # reject sampled initial conditions for which this returns False
    ic_ok: Callable[[np.ndarray], bool] | None = field(default=None, compare=False)

    @property
    def varied_indices(self) -> tuple[int, ...]:
        return tuple(range(len(self.params))) if self.varied is None else self.varied

    def field(self, params: tuple[float, ...]) -> Callable[[np.ndarray], np.ndarray]:
        rhs = self.rhs
        return lambda z: rhs(z, params)


def _harmonic(z, p):
    return np.array([z[1], -p[0] * z[0]])


def _damped_harmonic(z, p):
    return np.array([z[1], -p[0] * z[0] - p[1] * z[1]])


def _pendulum(z, p):
    return np.array([z[1], -p[0] * math.sin(z[0])])


def _double_well(z, p):
    x0, x1 = z
    return np.array([x1, -p[0] * x1 - x0**3 + x0])


def _bead_on_hoop(z, p):
    x0, x1 = z
    return np.array([x1, (-p[0] + math.cos(x0)) * math.sin(x0)])


def _shear_flow(z, p):
    x0, x1 = z
    t = math.tan(x1)
    if abs(t) < 1e-9:
        raise SingularFieldError(f"tan(x1) = {t:.3e} at x1 = {x1}")
    s, c = math.sin(x1), math.cos(x1)
    return np.array([math.cos(x0) / t, math.sin(x0) * (p[0] * s * s + c * c)])


def _van_der_pol(z, p):
    x0, x1 = z
    return np.array([x1, -p[0] * x1 * (x0 * x0 - 1.0) - x0])


def _van_der_pol_simplified(z, p):
    x0, x1 = z
    return np.array([p[0] * (-(x0**3) / 3.0 + x0 + x1), -x0 / p[0]])


def _glycolytic(z, p):
    x0, x1 = z
    return np.array([p[0] * x1 + x0 * x0 * x1 - x0, -p[0] * x0 + p[1] - x0 * x0 * x1])


def _duffing(z, p):
    x0, x1 = z
    return np.array([x1, p[0] * x1 * (1.0 - x0 * x0) - x0])


def _lotka_volterra(z, p):
    x, y = z
    alpha, beta, delta, gamma = p
    return np.array([alpha * x - beta * x * y, delta * x * y - gamma * y])


def _away_from_tan_zero(z0: np.ndarray) -> bool:
    return abs(z0[1]) >= 0.05


FAMILIES: dict[int | str, OdeFamily] = {
    24: OdeFamily(24, "Harmonic oscillator without damping", _harmonic,
                  (2.1,), ((0.4, -0.03), (0.0, 0.2)), 10.0),
    25: OdeFamily(25, "Harmonic oscillator with damping", _damped_harmonic,
                  (4.5, 0.43), ((0.12, 0.043), (0.0, -0.3)), 8.0),
    28: OdeFamily(28, "Pendulum without friction", _pendulum,
                  (0.9,), ((-1.9, 0.0), (0.3, 0.8)), 15.0),
    32: OdeFamily(32, "Damped double well oscillator", _double_well,
                  (0.18,), ((-1.8, -1.8), (-2.8, 1.0)), 5.0),
    34: OdeFamily(34, "Frictionless bead on a rotating hoop", _bead_on_hoop,
                  (0.93,), ((2.1, 0.0), (-1.2, -0.2)), 20.0),
    35: OdeFamily(35, "Rotational dynamics of an object in a shear flow", _shear_flow,
                  (4.2,), ((1.13, -0.3), (0.7, -1.7)), 5.0, ic_ok=_away_from_tan_zero),
    37: OdeFamily(37, "Van der Pol oscillator (standard form)", _van_der_pol,
                  (0.43,), ((2.2, 0.0), (0.1, 3.2)), 15.0),
    38: OdeFamily(38, "Van der Pol oscillator (simplified form)", _van_der_pol_simplified,
                  (3.37,), ((0.7, 0.0), (-1.1, -0.7)), 15.0),
    39: OdeFamily(39, "Glycolytic oscillator", _glycolytic,
                  (2.4, 0.07), ((0.4, 0.31), (0.2, -0.7)), 4.0),
    40: OdeFamily(40, "Duffing equation", _duffing,
                  (0.886,), ((0.63, -0.03), (0.2, 0.2)), 10.0),
}

ODEBENCH_10 = (24, 25, 28, 32, 34, 35, 37, 38, 39, 40)

# Two-family variant with retuned parameters/ICs/horizons; c1 of the damped
# oscillator keeps its ODEBench-10 value.
ODEBENCH_2 = (
    replace(FAMILIES[25], params=(0.4, 0.43), ic_refs=((0.1, 0.1), (0.0, -0.3)), horizon=5.0),
    replace(FAMILIES[35], params=(6.0,), horizon=5.0),
)

# Repo-defined stand-in, not a published configuration: alpha, beta, delta, gamma.
LOTKA_VOLTERRA = OdeFamily(
    "lv", "Lotka-Volterra", _lotka_volterra,
    (0.5, 0.5, 0.5, 0.5), ((1.0, 1.0), (2.0, 1.5)), 10.0, varied=(1, 2),
)


def get_family(family_id) -> OdeFamily:
    if family_id == "lv":
        return LOTKA_VOLTERRA
    return FAMILIES[int(family_id)]
