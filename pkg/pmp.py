"""Forward/backward integration and the damped forward-backward sweep for (P_N).

Costates are always the rescaled ones, r = N p.
"""
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from config import FBSM_MAX_ITERS, FBSM_RELAXATION, FBSM_TOL, NEWTON_MAX_ITERS, NEWTON_TOL
from errors import ConvergenceError, DimensionMismatchError, DivergenceError
from measures import inner_n, norm_n, support_radius
from models import ControlTrajectory, ParticleEnsemble, PontryaginTriple, RescaledVector, SolveResult, TimeGrid
from problem import ControlSetKind, ProblemSpec
from utils import format_table, parse_table

logger = logging.getLogger(__name__)

TRIPLE_TABLES = ('states', 'costates', 'controls')


def _array(value) -> np.ndarray:
    if isinstance(value, ParticleEnsemble):
        return value.positions
    if isinstance(value, RescaledVector):
        return value.entries
    array = np.asarray(value, dtype=float)
    return array[:, np.newaxis] if array.ndim == 1 else array


def hamiltonian(spec: ProblemSpec, t: float, x, r, u) -> float:
    """H_N = (1/N) sum_i (<r_i, v_i + u_i> - psi(u_i)) - L(t, mu[x])"""
    x, r, u = _array(x), _array(r), _array(u)
    velocity = spec.drift_value(t, x) + u
    return inner_n(r, velocity) - float(spec.control_cost.value(u).mean()) - spec.running_value(t, x)


# --- Hamiltonian maximization --------------------------------------------------

def _radial_root(a: float, b: float, target: np.ndarray) -> np.ndarray:
    """s >= 0 with a s + b s^3 = target, by Newton from s = target / a (monotone from above)"""
    s = target / a
    for _ in range(NEWTON_MAX_ITERS):
        excess = a * s + b * s ** 3 - target
        if np.all(np.abs(excess) <= NEWTON_TOL * np.maximum(1.0, target)):
            return s
        s = s - excess / (a + 3.0 * b * s * s)
    residual = float(np.max(np.abs(a * s + b * s ** 3 - target)))
    raise ConvergenceError(residual, "radial Hamiltonian maximization did not converge")


def _projected_newton_box(spec: ProblemSpec, r: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Minimize psi(u) - <r, u> over a box, batched over the leading axes"""
    cost = spec.control_cost
    project = spec.control_set.project
    lower, upper = spec.control_set.box.lower, spec.control_set.box.upper
    d = r.shape[-1]
    scale = np.maximum(1.0, np.linalg.norm(r, axis=-1))

    def objective(u):
        return cost.value(u) - np.sum(r * u, axis=-1)

    u = project(start)
    for _ in range(NEWTON_MAX_ITERS):
        grad = cost.gradient(u) - r
        stationarity = np.linalg.norm(u - project(u - grad), axis=-1)
        if np.all(stationarity <= NEWTON_TOL * scale):
            return u
        active = ((u <= lower) & (grad > 0)) | ((u >= upper) & (grad < 0))
        hess = cost.hessian(u)
        free = ~active
        mask = free[..., :, None] & free[..., None, :]
        reduced = np.where(mask, hess, np.eye(d))
        step = np.linalg.solve(reduced, np.where(free, grad, 0.0)[..., None])[..., 0]
        step = np.where(free, step, grad)

        base = objective(u)
        alpha = np.ones(u.shape[:-1])
        candidate = project(u - step)
        for _ in range(40):
            drop = np.sum(grad * (u - candidate), axis=-1)
            accepted = objective(candidate) <= base - 1e-4 * drop + 1e-15 * np.abs(base)
            if np.all(accepted):
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
            candidate = np.where(accepted[..., None], candidate, project(u - alpha[..., None] * step))
        u = candidate
    grad = cost.gradient(u) - r
    residual = float(np.max(np.linalg.norm(u - project(u - grad), axis=-1)))
    raise ConvergenceError(residual, "projected Newton did not converge")


def maximize_controls(spec: ProblemSpec, r: np.ndarray) -> np.ndarray:
    """argmax_{u in U} <r, u> - psi(u), applied along the last axis"""
    r = np.asarray(r, dtype=float)
    cost = spec.control_cost
    if cost.is_quadratic:
        return spec.control_set.project(r / cost.weight)

    norms = np.linalg.norm(r, axis=-1, keepdims=True)
    radial = _radial_root(cost.weight, cost.quartic, norms)
    direction = np.divide(r, norms, out=np.zeros_like(r), where=norms > 0)
    if spec.control_set.kind is ControlSetKind.BALL:
        return direction * np.minimum(radial, spec.control_set.bound)
    return _projected_newton_box(spec, r, direction * radial)


def maximize_control(spec: ProblemSpec, r_i) -> np.ndarray:
    r_i = np.atleast_1d(np.asarray(r_i, dtype=float))
    if r_i.shape != (spec.dimension,):
        raise DimensionMismatchError(f"costate of shape {r_i.shape} in dimension {spec.dimension}")
    return maximize_controls(spec, r_i[np.newaxis])[0]


# --- integration ---------------------------------------------------------------

def _control_values(u, grid: TimeGrid) -> np.ndarray:
    if isinstance(u, ControlTrajectory):
        return u.values
    values = np.asarray(u, dtype=float)
    if values.shape[0] != grid.M:
        raise DimensionMismatchError(f"{values.shape[0]} control intervals for a grid of {grid.M}")
    return values


def _check_finite(values: np.ndarray, step: int, what: str):
    if not np.all(np.isfinite(values)):
        raise DivergenceError(step, f"non-finite {what}")


def integrate_forward(spec: ProblemSpec, u, x0: ParticleEnsemble, grid: TimeGrid) -> np.ndarray:
    """States at every node, shape (M+1, N, d); classical RK4 with piecewise-constant controls"""
    controls = _control_values(u, grid)
    if x0.d != spec.dimension or controls.shape[1:] != x0.positions.shape:
        raise DimensionMismatchError("initial ensemble and controls disagree with the problem dimensions")
    h = grid.step
    states = np.empty((grid.M + 1,) + x0.positions.shape)
    states[0] = x0.positions

    if not spec.has_drift:
        states[1:] = x0.positions + h * np.cumsum(controls, axis=0)
        _check_finite(states, grid.M, "state")
        return states

    def rhs(t, x, uk):
        return spec.drift_value(t, x) + uk

    for k in range(grid.M):
        t, x, uk = k * h, states[k], controls[k]
        k1 = rhs(t, x, uk)
        k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1, uk)
        k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2, uk)
        k4 = rhs(t + h, x + h * k3, uk)
        states[k + 1] = x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        _check_finite(states[k + 1], k + 1, "state")

    _check_support_bound(spec, x0, states, grid)
    return states


def _check_support_bound(spec: ProblemSpec, x0: ParticleEnsemble, states: np.ndarray, grid: TimeGrid):
    growth = spec.growth_bound
    bound = (support_radius(x0) + (growth + spec.control_set.radius()) * grid.T) * np.exp(2.0 * growth * grid.T)
    radii = np.linalg.norm(states, axis=-1).max(axis=1)
    if np.any(radii > bound * (1.0 + 1e-9)):
        step = int(np.argmax(radii > bound))
        logger.warning(f"Support radius {radii[step]:.6g} exceeds the growth bound {bound:.6g} at step {step}; "
                       f"the sampled growth constant M={growth:.6g} is too small for this trajectory")


def midpoint_states(spec: ProblemSpec, states: np.ndarray, controls: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Cubic Hermite values at t_k + h/2 from node states and velocities"""
    h = grid.step
    mids = np.empty_like(controls)
    for k in range(grid.M):
        left = spec.drift_value(k * h, states[k]) + controls[k]
        right = spec.drift_value((k + 1) * h, states[k + 1]) + controls[k]
        mids[k] = 0.5 * (states[k] + states[k + 1]) + 0.125 * h * (left - right)
    return mids


def terminal_costate(spec: ProblemSpec, final_state: np.ndarray) -> np.ndarray:
    """r(T) = -grad^N phi(x(T))"""
    if spec.final_cost.is_zero:
        return np.zeros_like(final_state)
    from mfcalc import mf_gradient
    return -mf_gradient(spec.final_cost, ParticleEnsemble(final_state)).entries


def integrate_backward(spec: ProblemSpec, states: np.ndarray, u, grid: TimeGrid) -> np.ndarray:
    """Costates at every node from r' = -grad^N_x H_N and r(T) = -grad^N phi(x(T))"""
    controls = _control_values(u, grid)
    states = np.asarray(states, dtype=float)
    if states.shape[0] != grid.M + 1:
        raise DimensionMismatchError(f"{states.shape[0]} state nodes for a grid of {grid.M}")
    costates = np.empty_like(states)
    costates[-1] = terminal_costate(spec, states[-1])
    _check_finite(costates[-1], grid.M, "costate")

    if not spec.has_drift and spec.running_cost.is_zero:
        costates[:] = costates[-1]
        return costates

    h = grid.step
    mids = midpoint_states(spec, states, controls, grid)

    def rhs(t, x, r):
        return -spec.drift_contraction(t, x, r) + spec.running_gradient(t, x)

    for k in range(grid.M - 1, -1, -1):
        t, r = (k + 1) * h, costates[k + 1]
        k1 = rhs(t, states[k + 1], r)
        k2 = rhs(t - 0.5 * h, mids[k], r - 0.5 * h * k1)
        k3 = rhs(t - 0.5 * h, mids[k], r - 0.5 * h * k2)
        k4 = rhs(t - h, states[k], r - h * k3)
        costates[k] = r - h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        _check_finite(costates[k], k, "costate")
    return costates


def costate_slopes(spec: ProblemSpec, states: np.ndarray, costates: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """r'(t_k) at every node; the costate equation does not see the control"""
    h = grid.step
    return np.stack([-spec.drift_contraction(k * h, states[k], costates[k]) + spec.running_gradient(k * h, states[k])
                     for k in range(grid.M + 1)])


def interval_costates(spec: ProblemSpec, states: np.ndarray, costates: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Interval means of r from the cubic Hermite interpolant (Simpson with the Hermite midpoint)"""
    costates = np.asarray(costates, dtype=float)
    means = 0.5 * (costates[:-1] + costates[1:])
    if not spec.has_drift and spec.running_cost.is_zero:
        return means
    slopes = costate_slopes(spec, np.asarray(states, dtype=float), costates, grid)
    return means + grid.step / 12.0 * (slopes[:-1] - slopes[1:])


# --- cost and residual ---------------------------------------------------------

def total_cost(spec: ProblemSpec, states: np.ndarray, u, grid: TimeGrid) -> float:
    """Trapezoidal running cost, exact interval sums of psi, plus phi(x(T))"""
    controls = _control_values(u, grid)
    states = np.asarray(states, dtype=float)
    h = grid.step
    running = np.array([spec.running_value(k * h, states[k]) for k in range(grid.M + 1)])
    running_part = h * (running.sum() - 0.5 * (running[0] + running[-1]))
    control_part = h * float(spec.control_cost.value(controls).mean(axis=1).sum())
    return float(running_part + control_part + spec.final_cost.value(states[-1]))


def pmp_residual(spec: ProblemSpec, triple: PontryaginTriple) -> float:
    """max over intervals of norm_n(u_k - argmax H(r_k+1/2)), and the terminal mismatch"""
    target = maximize_controls(spec, interval_costates(spec, triple.states, triple.costates, triple.grid))
    control_gap = max(norm_n(triple.controls[k] - target[k]) for k in range(triple.grid.M))
    terminal_gap = norm_n(triple.costates[-1] - terminal_costate(spec, triple.states[-1]))
    return max(control_gap, terminal_gap)


# --- solver --------------------------------------------------------------------

def solve_fbsm(spec: ProblemSpec, x0: ParticleEnsemble, grid: TimeGrid,
               relaxation: float = FBSM_RELAXATION, tol: float = FBSM_TOL,
               max_iters: int = FBSM_MAX_ITERS,
               initial_controls: Optional[np.ndarray] = None) -> SolveResult:
    """Damped forward-backward sweep: u <- (1 - w) u + w argmax H_N(r)"""
    if not 0.0 < relaxation <= 1.0:
        raise ValueError(f"relaxation must lie in (0, 1], got {relaxation}")
    if abs(grid.T - spec.horizon) > 1e-12 * spec.horizon:
        raise ValueError(f"grid horizon {grid.T} differs from problem horizon {spec.horizon}")
    if x0.d != spec.dimension:
        raise DimensionMismatchError(f"initial ensemble dimension {x0.d} vs problem dimension {spec.dimension}")

    shape = (grid.M, x0.n, x0.d)
    u = np.zeros(shape) if initial_controls is None else np.broadcast_to(initial_controls, shape).copy()
    u = spec.control_set.project(u)

    residuals, costs = [], []
    best = None
    logger.info(f"FBSM start: N={x0.n}, d={x0.d}, M={grid.M}, relaxation={relaxation}, tol={tol:.1e}")
    for iteration in range(1, max_iters + 1):
        states = integrate_forward(spec, u, x0, grid)
        costates = integrate_backward(spec, states, u, grid)
        target = maximize_controls(spec, interval_costates(spec, states, costates, grid))
        residual = max(norm_n(target[k] - u[k]) for k in range(grid.M))
        cost = total_cost(spec, states, u, grid)
        residuals.append(residual)
        costs.append(cost)

        if best is None or residual < best[0]:
            best = (residual, states, costates, u.copy(), cost, iteration)
        if residual <= tol:
            logger.info(f"FBSM converged after {iteration} iterations: cost={cost:.12g}, residual={residual:.3e}")
            return SolveResult(PontryaginTriple(states, costates, u, grid), True, iteration,
                               residual, cost, residuals, costs)
        if iteration % 100 == 0:
            logger.debug(f"FBSM iteration {iteration}: residual={residual:.3e}, cost={cost:.12g}")
        u = (1.0 - relaxation) * u + relaxation * target

    residual, states, costates, u_best, cost, iteration = best
    logger.warning(f"FBSM hit max_iters={max_iters}; returning iterate {iteration} with residual {residual:.3e}")
    return SolveResult(PontryaginTriple(states, costates, u_best, grid), False, max_iters,
                       residual, cost, residuals, costs)


# --- plain-text codec ----------------------------------------------------------

def triple_to_tables(triple: PontryaginTriple) -> Dict[str, str]:
    """Three tables with header 'M N d'; each row is t followed by the flattened particles"""
    grid = triple.grid
    header = [grid.M, triple.n, triple.d]
    nodes = grid.nodes
    tables = {}
    for name, values, times in (('states', triple.states, nodes),
                                ('costates', triple.costates, nodes),
                                ('controls', triple.controls, nodes[:-1])):
        rows = np.column_stack([times, values.reshape(values.shape[0], -1)])
        tables[name] = format_table(header, rows)
    return tables


def triple_from_tables(tables: Dict[str, str]) -> PontryaginTriple:
    parsed = {}
    shape = None
    for name in TRIPLE_TABLES:
        header, rows = parse_table(tables[name])
        dims = tuple(int(v) for v in header)
        if len(dims) != 3 or (shape is not None and dims != shape):
            raise ValueError(f"{name}: header must read 'M N d' and agree across tables")
        shape = dims
        parsed[name] = rows
    m, n, d = shape
    times = parsed['states'][:, 0]
    if parsed['states'].shape != (m + 1, 1 + n * d) or parsed['controls'].shape != (m, 1 + n * d):
        raise DimensionMismatchError(f"table bodies disagree with header {m} {n} {d}")
    grid = TimeGrid(float(times[-1]), m)
    return PontryaginTriple(parsed['states'][:, 1:].reshape(m + 1, n, d),
                            parsed['costates'][:, 1:].reshape(m + 1, n, d),
                            parsed['controls'][:, 1:].reshape(m, n, d),
                            grid)


def triple_from_directory(path: Union[str, Path]) -> PontryaginTriple:
    path = Path(path)
    return triple_from_tables({name: (path / f"{name}.txt").read_text() for name in TRIPLE_TABLES})
