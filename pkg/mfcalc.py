"""Mean-field gradients and Hessians of symmetric functionals at empirical measures.

Conventions: for phi_N(x) = phi(mu[x]) the mean-field gradient is N times the
plain partial gradient, and the Hessian bilinear form is

    B(h1, h2) = (1/N) sum_i <D_x grad_mu phi(x_i) h1_i, h2_i>
              + (1/N^2) sum_{i,j} <D2_mu phi(x_i, x_j) h1_i, h2_j>

with plain Euclidean brackets, so that B(h, h) = h^T P h for the plain
Hessian matrix P of phi_N.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple, Any

import numpy as np

from config import FD_GRADIENT_STEP, FD_HESSIAN_STEP, BOUND_GRID_POINTS
from errors import DimensionMismatchError, UnsupportedInstanceError
from measures import inner_n
from models import Box, FdCheckReport, ParticleEnsemble, RescaledVector
from utils import box_grid

logger = logging.getLogger(__name__)


class FunctionalKind(Enum):
    CONSTANT = "constant"
    LINEAR_IN_MEAN = "linear_in_mean"
    POTENTIAL = "potential"
    VARIANCE = "variance"
    INTERACTION = "interaction"
    CUSTOM = "custom"


PROFILES = ("quadratic", "gaussian")


def profile_derivatives(profile: str, amplitude: float, width: float, z: np.ndarray):
    """Value, gradient and Hessian of a radial profile at points z of shape (..., d).

    quadratic: amplitude * |z|^2 / 2
    gaussian:  amplitude * exp(-|z|^2 / (2 width^2))
    """
    d = z.shape[-1]
    sq = np.sum(z * z, axis=-1)
    eye = np.eye(d)
    if profile == "quadratic":
        value = 0.5 * amplitude * sq
        grad = amplitude * z
        hess = amplitude * np.broadcast_to(eye, z.shape[:-1] + (d, d))
    elif profile == "gaussian":
        s2 = width * width
        e = amplitude * np.exp(-0.5 * sq / s2)
        value = e
        grad = -(e / s2)[..., None] * z
        outer = z[..., :, None] * z[..., None, :]
        hess = e[..., None, None] * (outer / (s2 * s2) - eye / s2)
    else:
        raise ValueError(f"unknown profile '{profile}' (expected one of {PROFILES})")
    return value, grad, np.array(hess)


def _spectral_sup(hessians: np.ndarray) -> float:
    if hessians.size == 0:
        return 0.0
    return float(np.linalg.norm(hessians, ord=2, axis=(-2, -1)).max())


@dataclass(frozen=True, eq=False)
class FunctionalDescriptor:
    """Symmetric functional phi(mu) with closed-form mean-field derivatives.

    Custom functionals provide value_fn(x) -> phi_N(x) on an (N, d) array and,
    optionally, plain derivatives gradient_fn(x) -> (N, d) and
    hessian_fn(x) -> (N*d, N*d).
    """
    kind: FunctionalKind
    params: Dict[str, Any] = field(default_factory=dict)
    value_fn: Optional[Callable] = None
    gradient_fn: Optional[Callable] = None
    hessian_fn: Optional[Callable] = None

    # --- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, value: float = 0.0) -> 'FunctionalDescriptor':
        return cls(FunctionalKind.CONSTANT, {'value': float(value)})

    @classmethod
    def linear_in_mean(cls, coefficient) -> 'FunctionalDescriptor':
        return cls(FunctionalKind.LINEAR_IN_MEAN,
                   {'coefficient': np.atleast_1d(np.asarray(coefficient, dtype=float)).tolist()})

    @classmethod
    def potential(cls, profile: str = "quadratic", amplitude: float = 1.0,
                  center=0.0, width: float = 1.0) -> 'FunctionalDescriptor':
        _check_profile(profile, width)
        return cls(FunctionalKind.POTENTIAL, {
            'profile': profile, 'amplitude': float(amplitude),
            'center': np.atleast_1d(np.asarray(center, dtype=float)).tolist(), 'width': float(width)})

    @classmethod
    def variance(cls, weight: float = 1.0) -> 'FunctionalDescriptor':
        return cls(FunctionalKind.VARIANCE, {'weight': float(weight)})

    @classmethod
    def interaction(cls, profile: str = "quadratic", amplitude: float = 1.0,
                    width: float = 1.0) -> 'FunctionalDescriptor':
        _check_profile(profile, width)
        return cls(FunctionalKind.INTERACTION,
                   {'profile': profile, 'amplitude': float(amplitude), 'width': float(width)})

    @classmethod
    def custom(cls, value_fn: Callable, gradient_fn: Optional[Callable] = None,
               hessian_fn: Optional[Callable] = None) -> 'FunctionalDescriptor':
        if not callable(value_fn):
            raise ValueError("custom functionals need a callable value_fn")
        return cls(FunctionalKind.CUSTOM, {}, value_fn, gradient_fn, hessian_fn)

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'FunctionalDescriptor':
        """Build from a tagged record {'kind': tag, **parameters}"""
        record = dict(record)
        tag = record.pop('kind', None)
        builders = {
            FunctionalKind.CONSTANT.value: cls.constant,
            FunctionalKind.LINEAR_IN_MEAN.value: cls.linear_in_mean,
            FunctionalKind.POTENTIAL.value: cls.potential,
            FunctionalKind.VARIANCE.value: cls.variance,
            FunctionalKind.INTERACTION.value: cls.interaction,
        }
        if tag not in builders:
            raise ValueError(f"unknown functional kind '{tag}' (expected one of {sorted(builders)})")
        try:
            return builders[tag](**record)
        except TypeError as e:
            raise ValueError(f"bad parameters for functional '{tag}': {e}")

    def to_record(self) -> Dict[str, Any]:
        if self.kind is FunctionalKind.CUSTOM:
            return {'kind': 'custom'}
        return {'kind': self.kind.value, **self.params}

    # --- evaluation ---------------------------------------------------------

    @property
    def is_custom(self) -> bool:
        return self.kind is FunctionalKind.CUSTOM

    @property
    def is_zero(self) -> bool:
        """Identically zero derivatives (constants, zero-weight terms)"""
        if self.kind is FunctionalKind.CONSTANT:
            return True
        if self.kind is FunctionalKind.VARIANCE:
            return self.params['weight'] == 0.0
        if self.kind in (FunctionalKind.POTENTIAL, FunctionalKind.INTERACTION):
            return self.params['amplitude'] == 0.0
        if self.kind is FunctionalKind.LINEAR_IN_MEAN:
            return not any(self.params['coefficient'])
        return False

    def value(self, x: np.ndarray) -> float:
        """phi(mu[x]) for positions x of shape (N, d)"""
        kind, p = self.kind, self.params
        if kind is FunctionalKind.CONSTANT:
            return p['value']
        if kind is FunctionalKind.LINEAR_IN_MEAN:
            return float(np.dot(self._vector(p['coefficient'], x), x.mean(axis=0)))
        if kind is FunctionalKind.POTENTIAL:
            z = x - self._vector(p['center'], x)
            return float(profile_derivatives(p['profile'], p['amplitude'], p['width'], z)[0].mean())
        if kind is FunctionalKind.VARIANCE:
            centered = x - x.mean(axis=0)
            return float(p['weight'] * np.mean(np.sum(centered * centered, axis=1)))
        if kind is FunctionalKind.INTERACTION:
            z = x[:, None, :] - x[None, :, :]
            return float(0.5 * profile_derivatives(p['profile'], p['amplitude'], p['width'], z)[0].mean())
        return float(self.value_fn(x))

    def gradient(self, x: np.ndarray) -> Optional[np.ndarray]:
        """Mean-field gradient (grad_mu phi(mu[x])(x_i))_i, or None if unavailable"""
        kind, p = self.kind, self.params
        n, d = x.shape
        if kind is FunctionalKind.CONSTANT:
            return np.zeros((n, d))
        if kind is FunctionalKind.LINEAR_IN_MEAN:
            return np.tile(self._vector(p['coefficient'], x), (n, 1))
        if kind is FunctionalKind.POTENTIAL:
            z = x - self._vector(p['center'], x)
            return profile_derivatives(p['profile'], p['amplitude'], p['width'], z)[1]
        if kind is FunctionalKind.VARIANCE:
            return 2.0 * p['weight'] * (x - x.mean(axis=0))
        if kind is FunctionalKind.INTERACTION:
            z = x[:, None, :] - x[None, :, :]
            return profile_derivatives(p['profile'], p['amplitude'], p['width'], z)[1].mean(axis=1)
        if self.gradient_fn is None:
            return None
        return n * np.asarray(self.gradient_fn(x), dtype=float).reshape(n, d)

    def hessian_blocks(self, x: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """(diag (N, d, d), interaction (N, N, d, d)) blocks, or None if unavailable"""
        kind, p = self.kind, self.params
        n, d = x.shape
        zero_diag = np.zeros((n, d, d))
        zero_inter = np.zeros((n, n, d, d))
        if kind in (FunctionalKind.CONSTANT, FunctionalKind.LINEAR_IN_MEAN):
            return zero_diag, zero_inter
        if kind is FunctionalKind.POTENTIAL:
            z = x - self._vector(p['center'], x)
            return profile_derivatives(p['profile'], p['amplitude'], p['width'], z)[2], zero_inter
        if kind is FunctionalKind.VARIANCE:
            c = 2.0 * p['weight']
            eye = np.eye(d)
            return (np.broadcast_to(c * eye, (n, d, d)).copy(),
                    np.broadcast_to(-c * eye, (n, n, d, d)).copy())
        if kind is FunctionalKind.INTERACTION:
            z = x[:, None, :] - x[None, :, :]
            hess = profile_derivatives(p['profile'], p['amplitude'], p['width'], z)[2]
            return hess.mean(axis=1), -hess
        if self.hessian_fn is None:
            return None
        plain = np.asarray(self.hessian_fn(x), dtype=float).reshape(n, d, n, d)
        return zero_diag, n * n * plain.transpose(0, 2, 3, 1)

    # --- bounds -------------------------------------------------------------

    def closed_form_bounds(self) -> Tuple[float, float]:
        """Global bounds on (sup |D_x grad_mu phi|, sup |D2_mu phi|), spectral norms"""
        kind, p = self.kind, self.params
        if kind in (FunctionalKind.CONSTANT, FunctionalKind.LINEAR_IN_MEAN):
            return 0.0, 0.0
        if kind is FunctionalKind.VARIANCE:
            c = 2.0 * abs(p['weight'])
            return c, c
        if kind in (FunctionalKind.POTENTIAL, FunctionalKind.INTERACTION):
            a = abs(p['amplitude'])
            peak = a if p['profile'] == 'quadratic' else a / p['width'] ** 2
            return (peak, 0.0) if kind is FunctionalKind.POTENTIAL else (peak, peak)
        raise UnsupportedInstanceError("custom functionals carry no closed-form bounds")

    def hessian_bounds(self, box: Box) -> Tuple[float, float]:
        """Suprema of the two Hessian block norms over a deterministic grid of the box"""
        kind, p = self.kind, self.params
        if kind is FunctionalKind.CUSTOM:
            raise UnsupportedInstanceError("custom functionals have no certified bounds on a box")
        if kind in (FunctionalKind.POTENTIAL, FunctionalKind.INTERACTION) and p['profile'] == 'gaussian':
            if kind is FunctionalKind.POTENTIAL:
                center = np.broadcast_to(np.asarray(p['center'], dtype=float), box.lower.shape)
                points = box_grid(box.lower - center, box.upper - center, BOUND_GRID_POINTS)
            else:
                span = box.upper - box.lower
                points = box_grid(-span, span, BOUND_GRID_POINTS)
            sup = _spectral_sup(profile_derivatives('gaussian', p['amplitude'], p['width'], points)[2])
            return (sup, 0.0) if kind is FunctionalKind.POTENTIAL else (sup, sup)
        return self.closed_form_bounds()

    @staticmethod
    def _vector(values, x: np.ndarray) -> np.ndarray:
        vector = np.asarray(values, dtype=float)
        if vector.size == 1:
            return np.full(x.shape[1], float(vector.ravel()[0]))
        if vector.shape != (x.shape[1],):
            raise DimensionMismatchError(f"parameter of length {vector.size} in dimension {x.shape[1]}")
        return vector


def _check_profile(profile: str, width: float):
    if profile not in PROFILES:
        raise ValueError(f"unknown profile '{profile}' (expected one of {PROFILES})")
    if not width > 0:
        raise ValueError("profile width must be positive")


@dataclass(frozen=True, eq=False)
class MfHessianOperator:
    diag_blocks: np.ndarray         # (N, d, d)
    interaction_blocks: np.ndarray  # (N, N, d, d)
    finite_difference: bool = False

    @property
    def n(self) -> int:
        return self.diag_blocks.shape[0]

    @property
    def d(self) -> int:
        return self.diag_blocks.shape[1]

    def bilinear(self, h1, h2) -> float:
        a, b = _as_entries(h1), _as_entries(h2)
        if a.shape != (self.n, self.d) or b.shape != (self.n, self.d):
            raise DimensionMismatchError(f"expected ({self.n}, {self.d}) perturbations")
        n = self.n
        local = np.einsum('iab,ib,ia->', self.diag_blocks, a, b) / n
        coupled = np.einsum('ijab,ib,ja->', self.interaction_blocks, a, b) / (n * n)
        return float(local + coupled)

    def as_matrix(self) -> np.ndarray:
        """Plain (N*d, N*d) matrix P with B(a, b) = a^T P b"""
        n, d = self.n, self.d
        matrix = self.interaction_blocks.transpose(0, 3, 1, 2).reshape(n * d, n * d) / (n * n)
        idx = np.arange(n)
        blocks = matrix.reshape(n, d, n, d)
        blocks[idx, :, idx, :] += self.diag_blocks.transpose(0, 2, 1) / n
        return matrix

    def min_quotient(self) -> float:
        """min over h of B(h, h) / norm_n(h)^2"""
        matrix = self.n * self.as_matrix()
        return float(np.linalg.eigvalsh(0.5 * (matrix + matrix.T))[0])


def _as_entries(value) -> np.ndarray:
    if isinstance(value, (RescaledVector,)):
        return value.entries
    if isinstance(value, ParticleEnsemble):
        return value.positions
    array = np.asarray(value, dtype=float)
    return array[:, np.newaxis] if array.ndim == 1 else array


def _fd_plain_gradient(f: FunctionalDescriptor, x: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        forward, backward = x.copy(), x.copy()
        forward[index] += step
        backward[index] -= step
        grad[index] = (f.value(forward) - f.value(backward)) / (2.0 * step)
    return grad


def _fd_plain_hessian(f: FunctionalDescriptor, x: np.ndarray, step: float) -> np.ndarray:
    n, d = x.shape
    size = n * d
    flat = x.ravel()
    matrix = np.zeros((size, size))

    def shifted(a, sa, b, sb):
        y = flat.copy()
        y[a] += sa
        y[b] += sb
        return f.value(y.reshape(n, d))

    for a in range(size):
        for b in range(a, size):
            value = (shifted(a, step, b, step) - shifted(a, step, b, -step)
                     - shifted(a, -step, b, step) + shifted(a, -step, b, -step)) / (4.0 * step * step)
            matrix[a, b] = matrix[b, a] = value
    return matrix


def mf_gradient(f: FunctionalDescriptor, mu: ParticleEnsemble) -> RescaledVector:
    x = mu.positions
    grad = f.gradient(x)
    if grad is not None:
        return RescaledVector(grad)
    logger.warning("No gradient for custom functional, falling back to finite differences")
    return RescaledVector(mu.n * _fd_plain_gradient(f, x, FD_GRADIENT_STEP), finite_difference=True)


def mf_hessian(f: FunctionalDescriptor, mu: ParticleEnsemble) -> MfHessianOperator:
    x = mu.positions
    blocks = f.hessian_blocks(x)
    if blocks is not None:
        return MfHessianOperator(*blocks)
    logger.warning("No Hessian for custom functional, falling back to finite differences")
    n, d = x.shape
    plain = _fd_plain_hessian(f, x, FD_HESSIAN_STEP).reshape(n, d, n, d)
    return MfHessianOperator(np.zeros((n, d, d)), n * n * plain.transpose(0, 2, 3, 1),
                             finite_difference=True)


def hessian_lower_bound(f: FunctionalDescriptor, box: Box) -> float:
    """lambda such that B(h, h) >= lambda * norm_n(h)^2 on every ensemble inside the box"""
    diag_sup, inter_sup = f.hessian_bounds(box)
    return 0.0 - (diag_sup + inter_sup)


def _relative_error(approx: float, exact: float, scale: float) -> float:
    # zero baselines are compared absolutely
    if scale < 1e-12:
        return abs(approx - exact)
    return abs(approx - exact) / scale


def fd_check(f: FunctionalDescriptor, mu: ParticleEnsemble, tol: float,
             directions: int = 4, seed: int = 0) -> FdCheckReport:
    """Compare closed-form mean-field derivatives with central differences of phi_N"""
    x = mu.positions
    n = mu.n
    grad = mf_gradient(f, mu).entries
    fd_grad = n * _fd_plain_gradient(f, x, FD_GRADIENT_STEP)
    grad_scale = float(np.linalg.norm(grad))
    gradient_error = (float(np.linalg.norm(fd_grad - grad)) / grad_scale
                      if grad_scale >= 1e-12 else float(np.abs(fd_grad - grad).max()))

    hessian = mf_hessian(f, mu)
    rng = np.random.default_rng(seed)
    base = f.value(x)
    s = FD_HESSIAN_STEP
    hessian_error = 0.0
    for _ in range(directions):
        h = rng.standard_normal(x.shape)
        exact = hessian.bilinear(h, h)
        approx = (f.value(x + s * h) - 2.0 * base + f.value(x - s * h)) / (s * s)
        hessian_error = max(hessian_error, _relative_error(approx, exact, abs(exact)))

    passed = gradient_error <= tol and hessian_error <= tol
    logger.debug(f"fd_check {f.kind.value}: gradient {gradient_error:.2e}, hessian {hessian_error:.2e}")
    return FdCheckReport(passed, gradient_error, hessian_error, tol)


def taylor_remainder(f: FunctionalDescriptor, mu: ParticleEnsemble, h: np.ndarray, s: float) -> float:
    """phi_N(x + s h) - phi_N(x) - s <grad, h>_N - s^2 B(h, h) / 2"""
    x = mu.positions
    grad = mf_gradient(f, mu)
    hessian = mf_hessian(f, mu)
    return (f.value(x + s * h) - f.value(x) - s * inner_n(grad, h)
            - 0.5 * s * s * hessian.bilinear(h, h))
