"""Spatial regularity of optimal controls: pairwise Lipschitz scans, McShane feedback
fields and the particle-count convergence sweep."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from config import (ASSIGNMENT_CAP, FBSM_MAX_ITERS, FBSM_RELAXATION, FBSM_TOL, REFERENCE_MIN_PARTICLES,
                    SEPARATION_EPS)
from errors import DimensionMismatchError, MeanFieldError, UnsupportedInstanceError
from measures import support_radius, wasserstein_any_size
from models import ParticleEnsemble, PontryaginTriple, RegularityReport, SweepRecord, TimeGrid
from oracle_variance import closed_form_triple
from pmp import solve_fbsm
from problem import ControlSet, ProblemSpec
from utils import SAMPLERS, csv_text

logger = logging.getLogger(__name__)

Sampler = Union[str, Callable[[int, int, np.random.Generator], np.ndarray]]

SWEEP_COLUMNS = ('N', 'cost', 'lip_hat', 'w1_to_ref', 'r_t', 'l_t', 'converged')
PROFILE_COLUMNS = ('t', 'quotient')


def default_separation(triple: PontryaginTriple) -> float:
    return SEPARATION_EPS * max(1.0, support_radius(triple.states[0]))


def lipschitz_scan(triple: PontryaginTriple, eps_sep: Optional[float] = None) -> RegularityReport:
    """Largest |u_i - u_j| / |x_i - x_j| over nodes and separated pairs"""
    if eps_sep is None:
        eps_sep = default_separation(triple)
    if eps_sep < 0:
        raise ValueError("eps_sep must be non-negative")

    controls = triple.controls_at_nodes()
    profile = np.full(triple.grid.M + 1, np.nan)
    excluded = 0
    for k in range(triple.grid.M + 1):
        if triple.n < 2:
            break
        gaps = pdist(triple.states[k])
        jumps = pdist(controls[k])
        kept = gaps >= eps_sep
        excluded += int(np.count_nonzero(~kept))
        if np.any(kept):
            profile[k] = float(np.max(jumps[kept] / gaps[kept]))

    inconclusive = bool(np.all(np.isnan(profile)))
    lip_hat = 0.0 if inconclusive else float(np.nanmax(profile))
    if inconclusive:
        logger.warning(f"Every particle pair closer than eps_sep={eps_sep:.3e}; Lipschitz scan inconclusive")
    if excluded:
        logger.info(f"Lipschitz scan excluded {excluded} near-coincident pairs")

    h = triple.grid.step
    radius = max(float(np.linalg.norm(triple.states, axis=-1).max()),
                 float(np.linalg.norm(triple.costates, axis=-1).max()))
    slope = max(float(np.linalg.norm(np.diff(triple.states, axis=0), axis=-1).max()),
                float(np.linalg.norm(np.diff(triple.costates, axis=0), axis=-1).max())) / h
    return RegularityReport(lip_hat, profile, excluded, eps_sep, radius, slope, inconclusive)


def profile_csv(report: RegularityReport, grid: TimeGrid) -> str:
    rows = [(float(t), float(q)) for t, q in zip(grid.nodes, report.profile)]
    return csv_text(PROFILE_COLUMNS, rows)


def mcshane_extend(triple: PontryaginTriple, L: float, t: float, query,
                   control_set: Optional[ControlSet] = None) -> np.ndarray:
    """Lower McShane extension per component, then projection onto U.

    Without a control set the projection is onto the box spanned by the
    node's controls. query may be one point (d,) or a batch (Q, d); in d = 1
    a flat list of Q points is a batch too.
    """
    if L < 0:
        raise ValueError("Lipschitz constant must be non-negative")
    k = triple.grid.node_index(t)
    positions = triple.states[k]
    values = triple.controls_at_nodes()[k]
    query = np.asarray(query, dtype=float)
    single = query.shape == (triple.d,)
    if single:
        points = query[None, :]
    elif query.ndim == 2 and query.shape[1] == triple.d:
        points = query
    elif query.ndim == 1 and triple.d == 1:
        points = query[:, None]
    else:
        raise DimensionMismatchError(f"query of shape {query.shape} is neither ({triple.d},) nor (Q, {triple.d})")

    distances = np.linalg.norm(points[:, None, :] - positions[None, :, :], axis=-1)
    field = np.min(values[None, :, :] + L * distances[:, :, None], axis=1)
    if control_set is not None:
        field = control_set.project(field)
    else:
        field = np.clip(field, values.min(axis=0), values.max(axis=0))
    return field[0] if single else field


# --- convergence sweep -----------------------------------------------------------

def _draw(sampler: Sampler, n: int, d: int, seed: int) -> np.ndarray:
    if isinstance(sampler, str):
        try:
            sampler = SAMPLERS[sampler]
        except KeyError:
            raise ValueError(f"unknown sampler '{sampler}' (expected one of {sorted(SAMPLERS)})")
    return np.asarray(sampler(n, d, np.random.default_rng(seed)), dtype=float)


def _reference_size(n_list: Sequence[int]) -> int:
    common = math.lcm(*n_list)
    copies = max(1, -(-REFERENCE_MIN_PARTICLES // common))
    return common * copies


def _check_assignment_size(spec: ProblemSpec, n_list: Sequence[int]):
    """W_1 against the largest member needs lcm-sized assignments in d > 1"""
    if spec.dimension == 1 or len(n_list) == 1:
        return
    reference = max(n_list)
    needed = max(math.lcm(n, reference) for n in n_list)
    if needed > ASSIGNMENT_CAP:
        raise UnsupportedInstanceError(
            f"N_list {sorted(n_list)} in d={spec.dimension} needs assignments of size {needed} "
            f"(cap {ASSIGNMENT_CAP}); pick counts that divide {reference} or raise MFC_ASSIGNMENT_CAP")


def _solve_member(spec: ProblemSpec, sampler: Sampler, n: int, grid: TimeGrid, seed: int,
                  solver_options: dict) -> Tuple[SweepRecord, Optional[np.ndarray]]:
    try:
        x0 = ParticleEnsemble(_draw(sampler, n, spec.dimension, seed))
        result = solve_fbsm(spec, x0, grid, **solver_options)
        report = lipschitz_scan(result.triple)
        if not result.converged:
            logger.warning(f"Sweep member N={n} did not converge (residual {result.residual:.3e})")
        record = SweepRecord(n, result.cost, report.lip_hat, math.nan,
                             report.support_radius, report.time_lipschitz, result.converged)
        return record, result.triple.states
    except MeanFieldError as e:
        logger.error(f"Sweep member N={n} failed: {e}")
        return SweepRecord(n, math.nan, math.nan, math.nan, math.nan, math.nan, False), None


def _reference_states(spec: ProblemSpec, sampler: Sampler, n_list: Sequence[int], grid: TimeGrid,
                      seed: int, members: List[Tuple[SweepRecord, Optional[np.ndarray]]]) -> Optional[np.ndarray]:
    if len(n_list) == 1:
        return members[0][1]
    if spec.variance_parameters() is not None:
        n_ref = _reference_size(n_list)
        x_ref = ParticleEnsemble(_draw(sampler, n_ref, spec.dimension, seed))
        instance = spec.variance_instance(x_ref)
        if instance is not None:
            logger.info(f"Sweep reference: closed-form triple on {n_ref} particles")
            return closed_form_triple(instance, grid).states
    largest = int(np.argmax(n_list))
    logger.info(f"Sweep reference: solved member N={n_list[largest]}")
    return members[largest][1]


def convergence_sweep(spec: ProblemSpec, sampler: Sampler, n_list: Sequence[int], grid: TimeGrid,
                      seed: int = 0, threads: int = 1,
                      relaxation: float = FBSM_RELAXATION, tol: float = FBSM_TOL,
                      max_iters: int = FBSM_MAX_ITERS) -> List[SweepRecord]:
    """Solve for every N, then compare each trajectory in max_t W_1 with the reference"""
    n_list = [int(n) for n in n_list]
    if not n_list or min(n_list) < 1:
        raise ValueError("N_list must hold positive particle counts")
    if len(set(n_list)) != len(n_list):
        raise ValueError("N_list entries must be distinct")
    _check_assignment_size(spec, n_list)
    options = {'relaxation': relaxation, 'tol': tol, 'max_iters': max_iters}

    logger.info(f"Sweep over N={n_list} with {threads} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_solve_member, spec, sampler, n, grid, seed, options) for n in n_list]
        members = [future.result() for future in futures]

    reference = _reference_states(spec, sampler, n_list, grid, seed, members)
    records = []
    for record, states in members:
        if states is not None and reference is not None:
            record.w1_to_ref = max(
                wasserstein_any_size(1, ParticleEnsemble(states[k]), ParticleEnsemble(reference[k]))
                for k in range(grid.M + 1))
        records.append(record)
    return sorted(records, key=lambda r: r.n)


def sweep_csv(records: Sequence[SweepRecord]) -> str:
    rows = [[record.to_dict()[column] for column in SWEEP_COLUMNS] for record in records]
    return csv_text(SWEEP_COLUMNS, [[str(v).lower() if isinstance(v, bool) else v for v in row] for row in rows])
