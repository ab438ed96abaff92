"""Empirical measures, the rescaled inner product and Wasserstein distances.

Every measure here is uniform over N particles; weights are never stored.
"""
import logging
import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from config import ASSIGNMENT_CAP
from errors import DimensionMismatchError, UnsupportedInstanceError
from models import ParticleEnsemble, RescaledVector
from utils import format_table, parse_table

logger = logging.getLogger(__name__)


def _entries(value) -> np.ndarray:
    if isinstance(value, RescaledVector):
        return value.entries
    if isinstance(value, ParticleEnsemble):
        return value.positions
    array = np.asarray(value, dtype=float)
    return array[:, np.newaxis] if array.ndim == 1 else array


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def inner_n(a, b) -> float:
    """(1/N) sum_i <a_i, b_i>"""
    a, b = _entries(a), _entries(b)
    _check_same_shape(a, b)
    return float(np.sum(a * b) / a.shape[0])


def norm_n(a) -> float:
    return math.sqrt(max(inner_n(a, a), 0.0))


def mean(mu: ParticleEnsemble) -> np.ndarray:
    return mu.positions.mean(axis=0)


def first_moment(mu: ParticleEnsemble) -> float:
    return float(np.linalg.norm(mu.positions, axis=1).mean())


def support_radius(mu) -> float:
    """max_i |x_i|"""
    return float(np.linalg.norm(_entries(mu), axis=1).max())


def wasserstein(p: int, mu: ParticleEnsemble, nu: ParticleEnsemble) -> float:
    """Exact W_p between equal-size uniform empirical measures.

    d = 1 uses the sorted (monotone) matching; d > 1 solves the optimal
    assignment over permutations.
    """
    if p not in (1, 2):
        raise ValueError(f"order p must be 1 or 2, got {p}")
    x, y = mu.positions, nu.positions
    if x.shape[0] != y.shape[0]:
        raise UnsupportedInstanceError(
            f"unequal particle counts {x.shape[0]} and {y.shape[0]}; "
            "replicate both ensembles to a common size first")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(f"state dimensions differ: {x.shape[1]} vs {y.shape[1]}")

    if x.shape[1] == 1:
        gaps = np.abs(np.sort(x[:, 0]) - np.sort(y[:, 0]))
        cost = np.mean(gaps ** p)
    else:
        costs = cdist(x, y, metric='euclidean') ** p
        rows, cols = linear_sum_assignment(costs)
        cost = costs[rows, cols].mean()
    return float(cost ** (1.0 / p))


def replicate(mu: ParticleEnsemble, copies: int) -> ParticleEnsemble:
    """Same empirical measure carried by copies * N particles"""
    if copies < 1:
        raise ValueError("copies must be >= 1")
    return ParticleEnsemble(np.repeat(mu.positions, copies, axis=0))


def wasserstein_any_size(p: int, mu: ParticleEnsemble, nu: ParticleEnsemble) -> float:
    """W_p between uniform empirical measures of different sizes, via their lcm size"""
    common = math.lcm(mu.n, nu.n)
    if mu.d > 1 and common > ASSIGNMENT_CAP:
        raise UnsupportedInstanceError(
            f"comparing {mu.n} and {nu.n} particles in d={mu.d} needs an assignment of size {common} "
            f"(cap {ASSIGNMENT_CAP}); use particle counts with a small common multiple or raise MFC_ASSIGNMENT_CAP")
    return wasserstein(p, replicate(mu, common // mu.n), replicate(nu, common // nu.n))


def canonical_order(mu: ParticleEnsemble) -> ParticleEnsemble:
    """Lexicographic particle order (first coordinate is the primary key)"""
    keys = mu.positions.T[::-1]
    return ParticleEnsemble(mu.positions[np.lexsort(keys)])


def ensemble_to_text(mu: ParticleEnsemble) -> str:
    return format_table([mu.n, mu.d], mu.positions)


def ensemble_from_text(text: str) -> ParticleEnsemble:
    header, rows = parse_table(text)
    if len(header) != 2:
        raise ValueError("ensemble header must read 'N d'")
    n, d = int(header[0]), int(header[1])
    if rows.shape != (n, d):
        raise DimensionMismatchError(f"header announces {n}x{d}, body holds {rows.shape}")
    return ParticleEnsemble(rows)
