"""Problem data for the particle control problems: drift, costs, control set, horizon."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import BOUND_GRID_POINTS
from errors import DimensionMismatchError, HypothesisViolation, UnsupportedInstanceError
from measures import first_moment
from mfcalc import FunctionalDescriptor, FunctionalKind
from models import Box, HypothesisReport, ParticleEnsemble
from utils import box_grid, clamp_to_box, project_to_ball

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant factor: factors[k] applies from breakpoints[k] on"""
    breakpoints: Tuple[float, ...] = (0.0,)
    factors: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if len(self.breakpoints) != len(self.factors) or not self.breakpoints:
            raise ValueError("schedule needs one factor per breakpoint")
        if self.breakpoints[0] != 0.0 or any(b >= a for a, b in zip(self.breakpoints[1:], self.breakpoints)):
            raise ValueError("schedule breakpoints must start at 0 and increase")

    def factor(self, t: float) -> float:
        k = int(np.searchsorted(self.breakpoints, t, side='right')) - 1
        return self.factors[max(k, 0)]

    @classmethod
    def from_record(cls, record: Optional[Dict]) -> 'Schedule':
        if not record:
            return cls()
        return cls(tuple(float(b) for b in record['breakpoints']),
                   tuple(float(f) for f in record['factors']))

    def to_record(self) -> Dict:
        return {'breakpoints': list(self.breakpoints), 'factors': list(self.factors)}


class DriftKind(Enum):
    CONSTANT_FIELD = "constant_field"
    LINEAR_FIELD = "linear_field"
    ATTRACTION_TO_MEAN = "attraction_to_mean"
    KERNEL_INTERACTION = "kernel_interaction"


@dataclass(frozen=True, eq=False)
class DriftTerm:
    """One additive piece of the velocity field v(t, mu, x).

    constant_field      v = b
    linear_field        v = A x
    attraction_to_mean  v = a (mean(mu) - x)
    kernel_interaction  v = int c (x - y) exp(-|x - y|^2 / (2 s^2)) dmu(y)
    """
    kind: DriftKind
    params: Dict[str, Any]
    schedule: Schedule = field(default_factory=Schedule)

    @classmethod
    def constant_field(cls, vector, schedule: Optional[Schedule] = None) -> 'DriftTerm':
        return cls(DriftKind.CONSTANT_FIELD, {'vector': np.atleast_1d(np.asarray(vector, dtype=float)).tolist()},
                   schedule or Schedule())

    @classmethod
    def linear_field(cls, matrix, schedule: Optional[Schedule] = None) -> 'DriftTerm':
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if matrix.shape[0] != matrix.shape[1]:
            raise ValueError("linear field matrix must be square")
        return cls(DriftKind.LINEAR_FIELD, {'matrix': matrix.tolist()}, schedule or Schedule())

    @classmethod
    def attraction_to_mean(cls, strength: float, schedule: Optional[Schedule] = None) -> 'DriftTerm':
        return cls(DriftKind.ATTRACTION_TO_MEAN, {'strength': float(strength)}, schedule or Schedule())

    @classmethod
    def kernel_interaction(cls, amplitude: float, width: float = 1.0,
                           schedule: Optional[Schedule] = None) -> 'DriftTerm':
        if not width > 0:
            raise ValueError("kernel width must be positive")
        return cls(DriftKind.KERNEL_INTERACTION, {'amplitude': float(amplitude), 'width': float(width)},
                   schedule or Schedule())

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'DriftTerm':
        record = dict(record)
        tag = record.pop('kind', None)
        schedule = Schedule.from_record(record.pop('schedule', None))
        builders = {
            DriftKind.CONSTANT_FIELD.value: cls.constant_field,
            DriftKind.LINEAR_FIELD.value: cls.linear_field,
            DriftKind.ATTRACTION_TO_MEAN.value: cls.attraction_to_mean,
            DriftKind.KERNEL_INTERACTION.value: cls.kernel_interaction,
        }
        if tag not in builders:
            raise ValueError(f"unknown drift kind '{tag}' (expected one of {sorted(builders)})")
        try:
            return builders[tag](schedule=schedule, **record)
        except TypeError as e:
            raise ValueError(f"bad parameters for drift '{tag}': {e}")

    def to_record(self) -> Dict[str, Any]:
        return {'kind': self.kind.value, **self.params, 'schedule': self.schedule.to_record()}

    def check_dimension(self, d: int):
        if self.kind is DriftKind.CONSTANT_FIELD and len(self.params['vector']) not in (1, d):
            raise DimensionMismatchError(f"constant field of length {len(self.params['vector'])} in dimension {d}")
        if self.kind is DriftKind.LINEAR_FIELD and len(self.params['matrix']) != d:
            raise DimensionMismatchError(f"linear field matrix of size {len(self.params['matrix'])} in dimension {d}")

    # --- kernel helpers -----------------------------------------------------

    def _kernel(self, x: np.ndarray):
        c, s = self.params['amplitude'], self.params['width']
        z = x[:, None, :] - x[None, :, :]
        e = c * np.exp(-0.5 * np.sum(z * z, axis=-1) / (s * s))
        return z, e, s * s

    def _kernel_jacobians(self, x: np.ndarray) -> np.ndarray:
        z, e, s2 = self._kernel(x)
        d = x.shape[1]
        outer = z[..., :, None] * z[..., None, :]
        return e[..., None, None] * (np.eye(d) - outer / s2)

    # --- evaluation ---------------------------------------------------------

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        n, d = x.shape
        factor = self.schedule.factor(t)
        if self.kind is DriftKind.CONSTANT_FIELD:
            vector = np.broadcast_to(np.asarray(self.params['vector'], dtype=float), (d,))
            return factor * np.tile(vector, (n, 1))
        if self.kind is DriftKind.LINEAR_FIELD:
            return factor * x @ np.asarray(self.params['matrix']).T
        if self.kind is DriftKind.ATTRACTION_TO_MEAN:
            return factor * self.params['strength'] * (x.mean(axis=0) - x)
        z, e, _ = self._kernel(x)
        return factor * np.einsum('ij,ija->ia', e, z) / n

    def blocks(self, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Diagonal blocks D_x v(x_i) and measure blocks (1/N) D_mu v(x_j)(x_i)"""
        n, d = x.shape
        factor = self.schedule.factor(t)
        diag = np.zeros((n, d, d))
        measure = np.zeros((n, n, d, d))
        if self.kind is DriftKind.LINEAR_FIELD:
            diag[:] = np.asarray(self.params['matrix'])
        elif self.kind is DriftKind.ATTRACTION_TO_MEAN:
            a = self.params['strength']
            diag[:] = -a * np.eye(d)
            measure[:] = (a / n) * np.eye(d)
        elif self.kind is DriftKind.KERNEL_INTERACTION:
            jac = self._kernel_jacobians(x)
            diag = jac.mean(axis=1)
            measure = -jac / n
        return factor * diag, factor * measure

    def costate_contraction(self, t: float, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        """(sum_i J_ik^T r_i)_k for the plain Jacobian J of x -> (v(x_i))_i"""
        n, d = x.shape
        factor = self.schedule.factor(t)
        if self.kind is DriftKind.CONSTANT_FIELD:
            return np.zeros((n, d))
        if self.kind is DriftKind.LINEAR_FIELD:
            return factor * r @ np.asarray(self.params['matrix'])
        if self.kind is DriftKind.ATTRACTION_TO_MEAN:
            return factor * self.params['strength'] * (r.mean(axis=0) - r)
        jac = self._kernel_jacobians(x)
        own = np.einsum('kjba,kb->ka', jac, r) / n
        others = np.einsum('ikba,ib->ka', jac, r) / n
        return factor * (own - others)

    def r_weighted_hessian(self, t: float, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Plain Hessian in x of (1/N) sum_i <r_i, v(t, mu[x], x_i)>, shape (N, d, N, d)"""
        n, d = x.shape
        hessian = np.zeros((n, d, n, d))
        if self.kind is not DriftKind.KERNEL_INTERACTION:
            return hessian
        z, e, s2 = self._kernel(x)
        rz = np.einsum('ia,ija->ij', r, z)
        rr = np.broadcast_to(r[:, None, :], z.shape)
        sym = rr[..., :, None] * z[..., None, :] + z[..., :, None] * rr[..., None, :]
        outer = z[..., :, None] * z[..., None, :]
        tmat = e[..., None, None] * (-(sym + rz[..., None, None] * np.eye(d)) / s2
                                     + rz[..., None, None] * outer / (s2 * s2))
        idx = np.arange(n)
        coupling = -(tmat + tmat.transpose(1, 0, 2, 3))
        hessian[:] = coupling.transpose(0, 2, 1, 3)
        hessian[idx, :, idx, :] = tmat.sum(axis=1) + tmat.sum(axis=0)
        return self.schedule.factor(t) * hessian / (n * n)


class ControlCostKind(Enum):
    QUADRATIC = "quadratic"
    QUADRATIC_QUARTIC = "quadratic_quartic"


@dataclass(frozen=True)
class ControlCost:
    """psi(u) = (weight/2)|u|^2 + (quartic/4)|u|^4"""
    kind: ControlCostKind
    weight: float
    quartic: float = 0.0

    def __post_init__(self):
        if not self.weight > 0:
            raise HypothesisViolation(['(H)(ii)'], f"control cost weight must be positive, got {self.weight}")
        if self.quartic < 0:
            raise HypothesisViolation(['(H)(ii)'], "negative quartic coefficient breaks convexity")
        if self.kind is ControlCostKind.QUADRATIC and self.quartic != 0.0:
            raise ValueError("quadratic control cost takes no quartic coefficient")

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'ControlCost':
        record = dict(record)
        tag = record.pop('kind', None)
        try:
            kind = ControlCostKind(tag)
        except ValueError:
            raise HypothesisViolation(
                ['(H)(ii)'], f"control cost '{tag}' is not a C2 strictly convex built-in "
                f"(expected one of {[k.value for k in ControlCostKind]})")
        return cls(kind, float(record.pop('weight')), float(record.pop('quartic', 0.0)))

    def to_record(self) -> Dict[str, Any]:
        return {'kind': self.kind.value, 'weight': self.weight, 'quartic': self.quartic}

    @property
    def is_quadratic(self) -> bool:
        return self.quartic == 0.0

    def value(self, u: np.ndarray) -> np.ndarray:
        sq = np.sum(u * u, axis=-1)
        return 0.5 * self.weight * sq + 0.25 * self.quartic * sq * sq

    def gradient(self, u: np.ndarray) -> np.ndarray:
        sq = np.sum(u * u, axis=-1, keepdims=True)
        return (self.weight + self.quartic * sq) * u

    def hessian(self, u: np.ndarray) -> np.ndarray:
        d = u.shape[-1]
        sq = np.sum(u * u, axis=-1)
        outer = u[..., :, None] * u[..., None, :]
        return (self.weight + self.quartic * sq)[..., None, None] * np.eye(d) + 2.0 * self.quartic * outer


class ControlSetKind(Enum):
    BOX = "box"
    BALL = "ball"


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Convex compact U: a hyper-rectangle or a centered ball of radius bound"""
    kind: ControlSetKind
    box: Optional[Box] = None
    bound: float = 0.0

    def __post_init__(self):
        if self.kind is ControlSetKind.BOX:
            if self.box is None or np.any(self.box.upper <= self.box.lower):
                raise HypothesisViolation(['(H)(i)'], "degenerate control set: box has empty interior")
        elif not self.bound > 0:
            raise HypothesisViolation(['(H)(i)'], f"degenerate control set: ball radius {self.bound}")

    @classmethod
    def centered_box(cls, bound: float, d: int) -> 'ControlSet':
        if not bound > 0:
            raise HypothesisViolation(['(H)(i)'], f"degenerate control set: bound C = {bound}")
        return cls(ControlSetKind.BOX, Box.centered(bound, d), bound)

    @classmethod
    def ball(cls, bound: float) -> 'ControlSet':
        return cls(ControlSetKind.BALL, None, float(bound))

    @classmethod
    def from_record(cls, record: Dict[str, Any], d: int) -> 'ControlSet':
        tag = record.get('kind')
        if tag == ControlSetKind.BALL.value:
            return cls.ball(float(record['bound']))
        if tag == ControlSetKind.BOX.value:
            if 'lower' in record or 'upper' in record:
                box = Box(np.broadcast_to(record['lower'], (d,)), np.broadcast_to(record['upper'], (d,)))
                return cls(ControlSetKind.BOX, box, float(np.max(np.abs([box.lower, box.upper]))))
            return cls.centered_box(float(record['bound']), d)
        raise ValueError(f"unknown control set '{tag}' (expected 'box' or 'ball')")

    def to_record(self) -> Dict[str, Any]:
        if self.kind is ControlSetKind.BALL:
            return {'kind': 'ball', 'bound': self.bound}
        return {'kind': 'box', 'lower': self.box.lower.tolist(), 'upper': self.box.upper.tolist()}

    def project(self, u: np.ndarray) -> np.ndarray:
        if self.kind is ControlSetKind.BOX:
            return clamp_to_box(u, self.box.lower, self.box.upper)
        return project_to_ball(u, self.bound)

    def contains(self, u: np.ndarray, slack: float = 1e-12) -> bool:
        if self.kind is ControlSetKind.BOX:
            return self.box.contains(u, slack)
        return bool(np.all(np.linalg.norm(u, axis=-1) <= self.bound + slack))

    def radius(self) -> float:
        """R_U with U inside the closed ball B(0, R_U)"""
        if self.kind is ControlSetKind.BALL:
            return self.bound
        return float(np.linalg.norm(np.maximum(np.abs(self.box.lower), np.abs(self.box.upper))))

    def active_mask(self, u: np.ndarray, tol: float) -> np.ndarray:
        """Coordinates sitting on the boundary of U"""
        if self.kind is ControlSetKind.BOX:
            return (np.abs(u - self.box.lower) <= tol) | (np.abs(u - self.box.upper) <= tol)
        on_sphere = np.linalg.norm(u, axis=-1, keepdims=True) >= self.bound - tol
        return np.broadcast_to(on_sphere, u.shape)

    def grid(self, d: int, points: int = BOUND_GRID_POINTS) -> np.ndarray:
        if self.kind is ControlSetKind.BOX:
            return box_grid(self.box.lower, self.box.upper, points)
        cube = box_grid(-self.bound * np.ones(d), self.bound * np.ones(d), points)
        return cube[np.linalg.norm(cube, axis=1) <= self.bound]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    dimension: int
    horizon: float
    control_cost: ControlCost
    control_set: ControlSet
    final_cost: FunctionalDescriptor = field(default_factory=FunctionalDescriptor.constant)
    running_cost: FunctionalDescriptor = field(default_factory=FunctionalDescriptor.constant)
    running_schedule: Schedule = field(default_factory=Schedule)
    drift: Tuple[DriftTerm, ...] = ()

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ValueError("problem dimension must be an integer >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon T must be positive")
        object.__setattr__(self, 'drift', tuple(self.drift))
        for term in self.drift:
            term.check_dimension(self.dimension)
        if self.control_set.kind is ControlSetKind.BOX and self.control_set.box.d != self.dimension:
            raise DimensionMismatchError("control box dimension differs from state dimension")

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'ProblemSpec':
        d = int(record['d'])
        return cls(
            dimension=d,
            horizon=float(record['T']),
            control_cost=ControlCost.from_record(record['control_cost']),
            control_set=ControlSet.from_record(record['control_set'], d),
            final_cost=FunctionalDescriptor.from_record(record.get('final_cost', {'kind': 'constant'})),
            running_cost=FunctionalDescriptor.from_record(record.get('running_cost', {'kind': 'constant'})),
            running_schedule=Schedule.from_record(record.get('running_schedule')),
            drift=tuple(DriftTerm.from_record(term) for term in record.get('drift', [])),
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            'd': self.dimension,
            'T': self.horizon,
            'control_cost': self.control_cost.to_record(),
            'control_set': self.control_set.to_record(),
            'final_cost': self.final_cost.to_record(),
            'running_cost': self.running_cost.to_record(),
            'running_schedule': self.running_schedule.to_record(),
            'drift': [term.to_record() for term in self.drift],
        }

    # --- recorded constants -------------------------------------------------

    @cached_property
    def lambda_psi(self) -> float:
        """Smallest eigenvalue of the Hessian of psi over a grid of U"""
        grid = self.control_set.grid(self.dimension)
        return float(np.linalg.eigvalsh(self.control_cost.hessian(grid)).min())

    @cached_property
    def growth_bound(self) -> float:
        """Sampled M with |v(t, mu, x)| <= M (1 + |x| + int |y| dmu(y))"""
        if not self.drift:
            return 0.0
        rng = np.random.default_rng(0)
        reach = 4.0 * max(1.0, self.control_set.radius())
        times = set(np.linspace(0.0, self.horizon, 5).tolist())
        for term in self.drift:
            times.update(b for b in term.schedule.breakpoints if b <= self.horizon)
        worst = 0.0
        for _ in range(8):
            x = rng.uniform(-reach, reach, size=(16, self.dimension))
            moment = first_moment(ParticleEnsemble(x))
            for t in sorted(times):
                v = self.drift_value(t, x)
                ratio = np.linalg.norm(v, axis=1) / (1.0 + np.linalg.norm(x, axis=1) + moment)
                worst = max(worst, float(ratio.max()))
        return worst

    # --- drift --------------------------------------------------------------

    @property
    def has_drift(self) -> bool:
        return len(self.drift) > 0

    @property
    def drift_is_nonlinear(self) -> bool:
        return any(term.kind is DriftKind.KERNEL_INTERACTION for term in self.drift)

    def drift_value(self, t: float, x: np.ndarray) -> np.ndarray:
        total = np.zeros_like(x)
        for term in self.drift:
            total += term.value(t, x)
        return total

    def drift_blocks(self, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n, d = x.shape
        diag = np.zeros((n, d, d))
        measure = np.zeros((n, n, d, d))
        for term in self.drift:
            term_diag, term_measure = term.blocks(t, x)
            diag += term_diag
            measure += term_measure
        return diag, measure

    def drift_jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        """Plain Jacobian of x -> (v(t, mu[x], x_i))_i as an (N*d, N*d) matrix"""
        n, d = x.shape
        diag, measure = self.drift_blocks(t, x)
        jac = measure.transpose(0, 2, 1, 3).copy()
        idx = np.arange(n)
        jac[idx, :, idx, :] += diag
        return jac.reshape(n * d, n * d)

    def drift_contraction(self, t: float, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        total = np.zeros_like(x)
        for term in self.drift:
            total += term.costate_contraction(t, x, r)
        return total

    # --- running cost -------------------------------------------------------

    def running_value(self, t: float, x: np.ndarray) -> float:
        if self.running_cost.kind is FunctionalKind.CONSTANT and self.running_cost.params['value'] == 0.0:
            return 0.0
        return self.running_schedule.factor(t) * self.running_cost.value(x)

    def running_gradient(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.running_cost.is_zero:
            return np.zeros_like(x)
        grad = self.running_cost.gradient(x)
        if grad is None:
            from mfcalc import mf_gradient
            grad = mf_gradient(self.running_cost, ParticleEnsemble(x)).entries
        return self.running_schedule.factor(t) * grad

    # --- Hamiltonian second derivatives --------------------------------------

    def state_hessian_h(self, t: float, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Plain (N*d, N*d) Hessian in x of the mean-field Hamiltonian H_N"""
        from mfcalc import mf_hessian
        n, d = x.shape
        matrix = np.zeros((n * d, n * d))
        for term in self.drift:
            matrix += term.r_weighted_hessian(t, x, r).reshape(n * d, n * d)
        if not self.running_cost.is_zero:
            factor = self.running_schedule.factor(t)
            matrix -= factor * mf_hessian(self.running_cost, ParticleEnsemble(x)).as_matrix()
        return matrix

    # --- recognisers --------------------------------------------------------

    def variance_parameters(self) -> Optional[Tuple[float, float]]:
        """(lambda, C) when this is the variance-maximization problem, else None"""
        fc = self.final_cost
        if (self.dimension == 1 and not self.drift and self.running_cost.is_zero
                and self.control_cost.is_quadratic and fc.kind is FunctionalKind.VARIANCE
                and fc.params['weight'] == -0.5 and self.control_set.kind is ControlSetKind.BOX
                and self.control_set.box.lower[0] == -self.control_set.box.upper[0]):
            return self.control_cost.weight, float(self.control_set.box.upper[0])
        return None

    def variance_instance(self, x0: ParticleEnsemble):
        """Closed-form instance for this problem and x0, or None when none applies"""
        from oracle_variance import from_problem
        if self.variance_parameters() is None:
            return None
        try:
            return from_problem(self, x0)
        except UnsupportedInstanceError as e:
            logger.info(f"No closed form for this ensemble: {e}")
            return None


def variance_problem(lam: float, T: float, C: float) -> ProblemSpec:
    """Maximize the final variance with quadratic control penalty: psi = (lam/2)u^2, U = [-C, C]"""
    return ProblemSpec(
        dimension=1,
        horizon=T,
        control_cost=ControlCost(ControlCostKind.QUADRATIC, lam),
        control_set=ControlSet.centered_box(C, 1),
        final_cost=FunctionalDescriptor.variance(-0.5),
    )


def validate_hypotheses(spec: ProblemSpec) -> HypothesisReport:
    """Check (i) compact convex U, (ii) strict convexity of psi, (iii) sublinear drift growth"""
    violations: List[str] = []
    messages: List[str] = []

    radius = spec.control_set.radius()
    if not np.isfinite(radius) or radius <= 0:
        violations.append('(H)(i)')
        messages.append(f"control set radius {radius} is not positive and finite")

    lambda_psi = spec.lambda_psi
    if not lambda_psi > 0:
        violations.append('(H)(ii)')
        messages.append(f"control cost not strictly convex on U: lambda_psi = {lambda_psi}")

    growth = spec.growth_bound
    if not np.isfinite(growth):
        violations.append('(H)(iii)')
        messages.append("drift growth bound is not finite on the sample grid")

    report = HypothesisReport(not violations, lambda_psi, growth, radius, violations, messages)
    if violations:
        logger.warning(f"Hypotheses violated: {violations}")
        raise HypothesisViolation(violations, '; '.join(messages), report)
    logger.info(f"Hypotheses hold: lambda_psi={lambda_psi:.6g}, M={growth:.6g}, R_U={radius:.6g}")
    return report


def eval_drift(spec: ProblemSpec, t: float, mu: ParticleEnsemble, i: int) -> np.ndarray:
    """v(t, mu[x], x_i)"""
    if not 0.0 <= t <= spec.horizon:
        raise ValueError(f"time {t} outside [0, {spec.horizon}]")
    if mu.d != spec.dimension:
        raise DimensionMismatchError(f"ensemble dimension {mu.d} differs from problem dimension {spec.dimension}")
    return spec.drift_value(t, mu.positions)[i]
