from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Dict, Any, Sequence

import numpy as np


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim == ndim - 1:
        array = array[..., np.newaxis]
    if array.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} axes, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite entries")
    array.setflags(write=False)
    return array


class Verdict(Enum):
    HOLDS = "holds"
    FAILS = "fails"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """N uniform-weight particles in R^d, i.e. the empirical measure (1/N) sum of Diracs"""
    positions: np.ndarray

    def __post_init__(self):
        positions = _frozen_array(self.positions, 2, "positions")
        if positions.shape[0] < 1 or positions.shape[1] < 1:
            raise ValueError("ensemble needs N >= 1 and d >= 1")
        object.__setattr__(self, 'positions', positions)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def from_list(cls, values: Sequence) -> 'ParticleEnsemble':
        """Accept a flat list (d = 1) or a list of coordinate lists"""
        return cls(np.asarray(values, dtype=float))

    def to_dict(self) -> Dict:
        return {'N': self.n, 'd': self.d, 'positions': self.positions.tolist()}


@dataclass(frozen=True, eq=False)
class RescaledVector:
    """Element of ((R^d)^N, <.,.>_N); finite_difference marks approximate derivatives"""
    entries: np.ndarray
    finite_difference: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'entries', _frozen_array(self.entries, 2, "entries"))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True, eq=False)
class Box:
    """Compact hyper-rectangle [lower, upper] in R^d"""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.array(self.lower, dtype=float))
        upper = np.atleast_1d(np.array(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("box bounds must be vectors of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box bounds must be finite")
        if np.any(upper < lower):
            raise ValueError("box upper bound below lower bound")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @classmethod
    def centered(cls, half_width: float, d: int) -> 'Box':
        return cls(-half_width * np.ones(d), half_width * np.ones(d))

    @property
    def d(self) -> int:
        return self.lower.shape[0]

    def contains(self, points: np.ndarray, slack: float = 0.0) -> bool:
        return bool(np.all(points >= self.lower - slack) and np.all(points <= self.upper + slack))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("grid.T must be positive")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError("grid.M must be an integer >= 1")

    @property
    def step(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.step

    def node_index(self, t: float) -> int:
        """Grid node whose interval [t_k, t_{k+1}) contains t, clamped to [0, M]"""
        k = int(np.floor(t / self.step + 1e-12))
        return min(max(k, 0), self.M)

    def to_dict(self) -> Dict:
        return {'T': self.T, 'M': self.M}


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """Piecewise-constant controls, values[k] acting on [t_k, t_{k+1})"""
    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        values = _frozen_array(self.values, 3, "controls")
        if values.shape[0] != self.grid.M:
            raise ValueError(f"controls hold {values.shape[0]} intervals, grid has {self.grid.M}")
        object.__setattr__(self, 'values', values)

    @classmethod
    def constant(cls, per_particle, grid: TimeGrid) -> 'ControlTrajectory':
        per_particle = np.asarray(per_particle, dtype=float)
        if per_particle.ndim == 1:
            per_particle = per_particle[:, np.newaxis]
        return cls(np.broadcast_to(per_particle, (grid.M,) + per_particle.shape).copy(), grid)

    def at_nodes(self) -> np.ndarray:
        """Controls sampled at every node, the last interval repeated at t_M"""
        return np.concatenate([self.values, self.values[-1:]], axis=0)


@dataclass(frozen=True, eq=False)
class PontryaginTriple:
    """State, rescaled costate and control trajectories on a shared grid"""
    states: np.ndarray    # (M+1, N, d)
    costates: np.ndarray  # (M+1, N, d)
    controls: np.ndarray  # (M, N, d)
    grid: TimeGrid

    def __post_init__(self):
        states = _frozen_array(self.states, 3, "states")
        costates = _frozen_array(self.costates, 3, "costates")
        controls = _frozen_array(self.controls, 3, "controls")
        expected = (self.grid.M + 1,) + states.shape[1:]
        if states.shape != expected or costates.shape != expected:
            raise ValueError(f"states/costates must have shape {expected}")
        if controls.shape != (self.grid.M,) + states.shape[1:]:
            raise ValueError("controls must have one entry per interval")
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'costates', costates)
        object.__setattr__(self, 'controls', controls)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def state(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.states[k])

    def control_trajectory(self) -> ControlTrajectory:
        return ControlTrajectory(self.controls, self.grid)

    def controls_at_nodes(self) -> np.ndarray:
        return self.control_trajectory().at_nodes()


@dataclass
class SolveResult:
    triple: PontryaginTriple
    converged: bool
    iterations: int
    residual: float
    cost: float
    residual_history: List[float] = field(default_factory=list)
    cost_history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'converged': self.converged,
            'iterations': self.iterations,
            'residual': self.residual,
            'cost': self.cost,
            'residual_history_tail': self.residual_history[-5:],
        }


@dataclass
class HypothesisReport:
    passed: bool
    lambda_psi: float
    growth_bound: float
    control_radius: float
    violations: List[str] = field(default_factory=list)
    messages: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'lambda_psi': self.lambda_psi,
            'growth_bound': self.growth_bound,
            'control_radius': self.control_radius,
            'violations': self.violations,
            'messages': self.messages,
        }


@dataclass
class FdCheckReport:
    passed: bool
    gradient_error: float
    hessian_error: float
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.gradient_error, self.hessian_error)

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'gradient_error': self.gradient_error,
            'hessian_error': self.hessian_error,
            'tol': self.tol,
        }


@dataclass
class CoercivityReport:
    rho_hat: float
    min_quotient_vector: np.ndarray  # (M, N, d)
    sufficient_lambda_p: float
    lambda_psi: float
    verdict: Verdict
    mode: str = "dense"
    upper_bound_only: bool = False
    active_coordinates: int = 0

    @property
    def margin(self) -> float:
        return self.lambda_psi - self.sufficient_lambda_p

    def to_dict(self) -> Dict:
        return {
            'rho_hat': self.rho_hat,
            'sufficient_lambda_p': self.sufficient_lambda_p,
            'lambda_psi': self.lambda_psi,
            'margin': self.margin,
            'verdict': self.verdict.value,
            'mode': self.mode,
            'upper_bound_only': self.upper_bound_only,
            'active_coordinates': self.active_coordinates,
        }


@dataclass
class RegularityReport:
    lip_hat: float
    profile: np.ndarray          # max quotient per node, NaN where every pair was excluded
    excluded_pairs: int
    eps_sep: float
    support_radius: float        # observed R_T
    time_lipschitz: float        # observed L_T
    inconclusive: bool = False

    def to_dict(self) -> Dict:
        return {
            'lip_hat': self.lip_hat,
            'excluded_pairs': self.excluded_pairs,
            'eps_sep': self.eps_sep,
            'r_t': self.support_radius,
            'l_t': self.time_lipschitz,
            'inconclusive': self.inconclusive,
        }


@dataclass
class SweepRecord:
    n: int
    cost: float
    lip_hat: float
    w1_to_ref: float
    r_t: float
    l_t: float
    converged: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            'N': self.n,
            'cost': self.cost,
            'lip_hat': self.lip_hat,
            'w1_to_ref': self.w1_to_ref,
            'r_t': self.r_t,
            'l_t': self.l_t,
            'converged': self.converged,
        }
