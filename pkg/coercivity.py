"""Second variation of the particle cost along a Pontryagin triple.

The quadratic form is assembled on piecewise-constant perturbations w of shape
(M, N, d). Its minimal Rayleigh quotient against the time-weighted rescaled
inner product estimates the coercivity constant.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import eigh

from config import ACTIVE_BOUND_TOL, DENSE_EIGEN_CAP, SUBSPACE_RANDOM_VECTORS, VERDICT_TOL
from errors import DimensionMismatchError, UnsupportedInstanceError
from mfcalc import mf_hessian
from models import CoercivityReport, ParticleEnsemble, PontryaginTriple, TimeGrid, Verdict
from pmp import midpoint_states
from problem import ProblemSpec
from utils import format_float

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """Drift derivatives evaluated on the stored trajectory.

    jacobians[k] is the plain (N*d, N*d) matrix A(t_k) with y' = A y + w;
    midpoint_jacobians[k] is A at t_k + h/2 on the interpolated state.
    """
    grid: TimeGrid
    diag_blocks: np.ndarray           # (M+1, N, d, d)
    measure_blocks: np.ndarray        # (M+1, N, N, d, d)
    jacobians: np.ndarray             # (M+1, N*d, N*d)
    midpoint_jacobians: np.ndarray    # (M, N*d, N*d)
    n: int
    d: int
    null_drift: bool

    @property
    def dimension(self) -> int:
        return self.n * self.d


def linearize(spec: ProblemSpec, triple: PontryaginTriple, grid: Optional[TimeGrid] = None) -> LinearizedSystem:
    grid = grid or triple.grid
    if grid.M != triple.grid.M:
        raise DimensionMismatchError("grid does not match the triple")
    n, d = triple.n, triple.d
    h = grid.step
    size = grid.M + 1
    diag = np.zeros((size, n, d, d))
    measure = np.zeros((size, n, n, d, d))
    jacobians = np.zeros((size, n * d, n * d))
    mid_jacobians = np.zeros((grid.M, n * d, n * d))
    if spec.has_drift:
        for k in range(size):
            diag[k], measure[k] = spec.drift_blocks(k * h, triple.states[k])
            jacobians[k] = spec.drift_jacobian(k * h, triple.states[k])
        mids = midpoint_states(spec, triple.states, triple.controls, grid)
        for k in range(grid.M):
            mid_jacobians[k] = spec.drift_jacobian((k + 0.5) * h, mids[k])
    return LinearizedSystem(grid, diag, measure, jacobians, mid_jacobians, n, d, not spec.has_drift)


def propagate_batch(linsys: LinearizedSystem, w: np.ndarray) -> np.ndarray:
    """y' = A(t) y + w, y(0) = 0, for a batch w of shape (K, M, N, d); returns (K, M+1, N, d)"""
    grid = linsys.grid
    k_count = w.shape[0]
    flat = w.reshape(k_count, grid.M, linsys.dimension)
    h = grid.step
    y = np.zeros((k_count, grid.M + 1, linsys.dimension))
    if linsys.null_drift:
        y[:, 1:] = h * np.cumsum(flat, axis=1)
    else:
        for k in range(grid.M):
            a0, am, a1 = linsys.jacobians[k], linsys.midpoint_jacobians[k], linsys.jacobians[k + 1]
            yk, wk = y[:, k], flat[:, k]
            k1 = yk @ a0.T + wk
            k2 = (yk + 0.5 * h * k1) @ am.T + wk
            k3 = (yk + 0.5 * h * k2) @ am.T + wk
            k4 = (yk + h * k3) @ a1.T + wk
            y[:, k + 1] = yk + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    return y.reshape(k_count, grid.M + 1, linsys.n, linsys.d)


def propagate(linsys: LinearizedSystem, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (linsys.grid.M, linsys.n, linsys.d):
        raise DimensionMismatchError(f"perturbation of shape {w.shape}, expected "
                                     f"{(linsys.grid.M, linsys.n, linsys.d)}")
    return propagate_batch(linsys, w[np.newaxis])[0]


# --- Hessian pieces along the trajectory ---------------------------------------

@dataclass(frozen=True, eq=False)
class _FormPieces:
    final: np.ndarray      # (N*d, N*d) plain Hessian of phi at x(T)
    state: np.ndarray      # (M+1, N*d, N*d) plain state Hessian of H_N per node
    control: np.ndarray    # (M, N, d, d) Hessian of psi at u*


def _form_pieces(spec: ProblemSpec, triple: PontryaginTriple) -> _FormPieces:
    grid = triple.grid
    n, d = triple.n, triple.d
    if spec.final_cost.is_zero:
        final = np.zeros((n * d, n * d))
    else:
        final = mf_hessian(spec.final_cost, ParticleEnsemble(triple.states[-1])).as_matrix()
    state = np.zeros((grid.M + 1, n * d, n * d))
    if spec.drift_is_nonlinear or not spec.running_cost.is_zero:
        for k in range(grid.M + 1):
            state[k] = spec.state_hessian_h(k * grid.step, triple.states[k], triple.costates[k])
    control = spec.control_cost.hessian(triple.controls)
    return _FormPieces(final, state, control)


def _trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    weights = np.full(grid.M + 1, grid.step)
    weights[0] = weights[-1] = 0.5 * grid.step
    return weights


def _gram(pieces: _FormPieces, grid: TimeGrid, w: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Q evaluated bilinearly on a batch: (K, K) matrix Q(w_a, w_b)"""
    k_count = w.shape[0]
    n = w.shape[2]
    y_flat = y.reshape(k_count, grid.M + 1, -1)
    final = y_flat[:, -1] @ pieces.final @ y_flat[:, -1].T
    weights = _trapezoid_weights(grid)
    state = np.einsum('k,akp,kpq,bkq->ab', weights, y_flat, pieces.state, y_flat, optimize=True)
    control = grid.step / n * np.einsum('akip,kipq,bkiq->ab', w, pieces.control, w, optimize=True)
    return final - state + control


def quadratic_form(spec: ProblemSpec, triple: PontryaginTriple, linsys: LinearizedSystem, w) -> float:
    """Q(w) = B_phi(y(T), y(T)) - int B_{H,x}(y, y) dt + int (1/N) sum_i <psi''(u_i*) w_i, w_i> dt"""
    w = np.asarray(w, dtype=float)
    y = propagate(linsys, w)
    pieces = _form_pieces(spec, triple)
    return float(_gram(pieces, triple.grid, w[np.newaxis], y[np.newaxis])[0, 0])


def assemble_quadratic_matrix(spec: ProblemSpec, triple: PontryaginTriple,
                              linsys: LinearizedSystem) -> np.ndarray:
    """Matrix of Q on unit perturbations, ordered as w.reshape(-1)"""
    size = triple.grid.M * triple.n * triple.d
    basis = np.eye(size).reshape(size, triple.grid.M, triple.n, triple.d)
    columns = propagate_batch(linsys, basis)
    return _gram(_form_pieces(spec, triple), triple.grid, basis, columns)


def _subspace_basis(grid: TimeGrid, n: int, d: int, seed: int) -> np.ndarray:
    """Time-constant unit perturbations per coordinate plus seeded random directions"""
    size = grid.M * n * d
    constant = np.zeros((n * d, grid.M, n, d))
    for idx in range(n * d):
        constant[idx, :, idx // d, idx % d] = 1.0
    rng = np.random.default_rng(seed)
    random = rng.standard_normal((SUBSPACE_RANDOM_VECTORS, grid.M, n, d))
    stacked = np.concatenate([constant, random]).reshape(-1, size)
    q, _ = np.linalg.qr(stacked.T)
    return q.T[: min(stacked.shape[0], size)].reshape(-1, grid.M, n, d)


def _verdict(rho_hat: float, upper_bound_only: bool) -> Verdict:
    if rho_hat < -VERDICT_TOL:
        return Verdict.FAILS
    if rho_hat > VERDICT_TOL and not upper_bound_only:
        return Verdict.HOLDS
    return Verdict.INCONCLUSIVE


def estimate_rho(spec: ProblemSpec, triple: PontryaginTriple, grid: Optional[TimeGrid] = None,
                 mode: str = "auto", seed: int = 0) -> CoercivityReport:
    """Minimal generalized eigenvalue of Q against (h/N) I on the perturbation space.

    mode 'dense' refuses spaces above DENSE_EIGEN_CAP; 'subspace' runs a
    Rayleigh-Ritz projection whose minimum is only an upper bound; 'auto'
    picks dense when it fits.
    """
    grid = grid or triple.grid
    size = grid.M * triple.n * triple.d
    if mode == "auto":
        mode = "dense" if size <= DENSE_EIGEN_CAP else "subspace"
        if mode == "subspace":
            logger.warning(f"Perturbation space of size {size} exceeds the dense cap {DENSE_EIGEN_CAP}; "
                           "using subspace mode (upper bound only)")
    if mode == "dense" and size > DENSE_EIGEN_CAP:
        raise UnsupportedInstanceError(
            f"M*N*d = {size} exceeds the dense eigen cap {DENSE_EIGEN_CAP}; "
            "reduce coercivity.M / coercivity.N or request subspace mode")
    if mode not in ("dense", "subspace"):
        raise ValueError(f"unknown coercivity mode '{mode}'")

    linsys = linearize(spec, triple, grid)
    pieces = _form_pieces(spec, triple)
    scale = grid.step / triple.n
    if mode == "dense":
        basis = np.eye(size).reshape(size, grid.M, triple.n, triple.d)
    else:
        basis = _subspace_basis(grid, triple.n, triple.d, seed)
    columns = propagate_batch(linsys, basis)
    matrix = _gram(pieces, grid, basis, columns)
    matrix = 0.5 * (matrix + matrix.T)
    flat = basis.reshape(basis.shape[0], -1)
    metric = scale * flat @ flat.T

    values, vectors = eigh(matrix, metric, subset_by_index=[0, 0])
    rho_hat = float(values[0])
    minimizer = (vectors[:, 0] @ flat).reshape(grid.M, triple.n, triple.d)

    active = int(spec.control_set.active_mask(triple.controls, ACTIVE_BOUND_TOL).sum())
    lambda_hat, _ = sufficient_constants(spec, triple)
    upper_bound_only = mode == "subspace"
    report = CoercivityReport(
        rho_hat=rho_hat,
        min_quotient_vector=minimizer,
        sufficient_lambda_p=lambda_hat,
        lambda_psi=spec.lambda_psi,
        verdict=_verdict(rho_hat, upper_bound_only),
        mode=mode,
        upper_bound_only=upper_bound_only,
        active_coordinates=active,
    )
    logger.info(f"Coercivity ({mode}): rho_hat={rho_hat:.6g}, lambda_hat={lambda_hat:.6g}, "
                f"verdict={report.verdict.value}, active coordinates={active}")
    if active:
        logger.warning(f"{active} control coordinates sit on the boundary of U; "
                       "the unconstrained estimate may be strict there")
    return report


def sufficient_constants(spec: ProblemSpec, triple: PontryaginTriple) -> Tuple[float, Dict[str, float]]:
    """lambda_hat = (M_phi + T M_H) T exp(2 L_v T) with its three ingredients"""
    grid = triple.grid
    n = triple.n
    pieces = _form_pieces(spec, triple)

    def extreme_eigenvalues(matrix):
        values = np.linalg.eigvalsh(0.5 * n * (matrix + matrix.T))
        return values[0], values[-1]

    m_phi = max(0.0, -extreme_eigenvalues(pieces.final)[0])
    m_h = max([0.0] + [extreme_eigenvalues(block)[1] for block in pieces.state])
    l_v = 0.0
    if spec.has_drift:
        l_v = max(float(np.linalg.norm(spec.drift_jacobian(k * grid.step, triple.states[k]), 2))
                  for k in range(grid.M + 1))
    T = grid.T
    lambda_hat = (m_phi + T * m_h) * T * np.exp(2.0 * l_v * T)
    return float(lambda_hat), {'m_phi': float(m_phi), 'm_h': float(m_h), 'l_v': l_v}


def sufficient_margin(spec: ProblemSpec, triple: PontryaginTriple) -> float:
    """lambda_psi - lambda_hat; positive margins certify coercivity"""
    lambda_hat, _ = sufficient_constants(spec, triple)
    return spec.lambda_psi - lambda_hat


def report_to_text(report: CoercivityReport) -> str:
    lines = []
    for key, value in report.to_dict().items():
        if isinstance(value, float):
            value = format_float(value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}: {value}")
    return '\n'.join(lines) + '\n'
