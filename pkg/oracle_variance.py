"""Closed forms for final-variance maximization with quadratic control cost.

Problem: minimize int (lam/2)|u|^2 dt - (1/2) Var(mu(T)) with x' = u, u in [-C, C],
over centered one-dimensional ensembles.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import UnsupportedInstanceError
from models import ParticleEnsemble, PontryaginTriple, TimeGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class VarianceInstance:
    x0: ParticleEnsemble
    lam: float
    T: float
    C: float

    def __post_init__(self):
        if self.x0.d != 1:
            raise UnsupportedInstanceError(f"variance oracle is one-dimensional, got d = {self.x0.d}")
        if not (self.lam > 0 and self.T > 0 and self.C > 0):
            raise ValueError("lambda, T and C must be positive")
        x = self.x0.positions[:, 0]
        scale = max(1.0, float(np.abs(x).max()))
        if abs(float(x.sum())) > 1e-12 * x.size * scale:
            raise UnsupportedInstanceError(f"initial ensemble is not centered (mean {x.mean():.3e})")

    @property
    def n(self) -> int:
        return self.x0.n

    @property
    def rho(self) -> float:
        return closed_form_rho(self.lam, self.T)


def closed_form_rho(lam: float, T: float) -> float:
    """Sharp coercivity constant lam - T; non-positive values mean coercivity fails"""
    if not (lam > 0 and T > 0):
        raise ValueError("lambda and T must be positive")
    return lam - T


def closed_form_control(inst: VarianceInstance) -> np.ndarray:
    """Constant optimal controls, shape (N, 1)"""
    x = inst.x0.positions
    if inst.lam > inst.T:
        return np.clip(x / (inst.lam - inst.T), -inst.C, inst.C)
    # bang regime; the particle at the origin keeps 0
    return np.sign(x) * inst.C


def discrete_cost(inst: VarianceInstance, u) -> float:
    """(1/2N) sum_i (T (lam - T) u_i^2 - 2 T x_i u_i - x_i^2) for constant controls u"""
    x = inst.x0.positions[:, 0]
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != x.shape:
        raise ValueError(f"expected {x.size} controls, got {u.size}")
    T, lam = inst.T, inst.lam
    return float(np.sum(T * (lam - T) * u * u - 2.0 * T * x * u - x * x) / (2.0 * inst.n))


def lipschitz_bound(inst: VarianceInstance) -> float:
    """1/(lam - T) when lam > T, infinity otherwise"""
    return 1.0 / inst.rho if inst.rho > 0 else math.inf


def closed_form_triple(inst: VarianceInstance, grid: TimeGrid) -> PontryaginTriple:
    """States x0 + u t, constant controls and the constant costate x(T) - mean(x(T))"""
    if abs(grid.T - inst.T) > 1e-12 * inst.T:
        raise ValueError(f"grid horizon {grid.T} differs from instance horizon {inst.T}")
    u = closed_form_control(inst)
    x0 = inst.x0.positions
    states = x0[np.newaxis] + grid.nodes[:, np.newaxis, np.newaxis] * u[np.newaxis]
    final = states[-1]
    costate = final - final.mean(axis=0)
    costates = np.broadcast_to(costate, states.shape)
    controls = np.broadcast_to(u, (grid.M,) + u.shape)
    return PontryaginTriple(states, costates, controls, grid)


def from_problem(spec, x0: ParticleEnsemble) -> VarianceInstance:
    """Recognise the variance-maximization configuration in a general problem"""
    parameters = spec.variance_parameters()
    if parameters is None:
        raise UnsupportedInstanceError("problem is not the final-variance maximization instance")
    lam, C = parameters
    return VarianceInstance(x0, lam, spec.horizon, C)
