import csv
import io
import json
import logging
from typing import Any, List, Sequence, Tuple, Optional

import numpy as np
from scipy.stats import truncnorm

logger = logging.getLogger(__name__)


def parse_value(raw: str) -> Any:
    """Parse a config value: JSON literal first, bare string otherwise"""
    raw = raw.strip()
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def format_float(value: float) -> str:
    """17 significant digits, enough for an exact float64 round trip"""
    return format(float(value), '.17g')


def format_table(header: Sequence, rows: np.ndarray) -> str:
    """Plain-text table: one header line, then whitespace-separated decimal rows"""
    lines = [' '.join(str(h) for h in header)]
    for row in np.atleast_2d(rows):
        lines.append(' '.join(format_float(v) for v in row))
    return '\n'.join(lines) + '\n'


def parse_table(text: str) -> Tuple[List[str], np.ndarray]:
    """Inverse of format_table; comment lines starting with '#' are skipped"""
    lines = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith('#')]
    if not lines:
        raise ValueError("empty table")
    header = lines[0].split()
    rows = [[float(v) for v in line.split()] for line in lines[1:]]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"ragged table rows: widths {sorted(widths)}")
    return header, np.array(rows, dtype=float)


def csv_text(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """CSV with stable column order; floats written with format_float"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buffer.getvalue()


def box_grid(lower: np.ndarray, upper: np.ndarray, points: int) -> np.ndarray:
    """Tensor grid over a hyper-rectangle, shape (points**d, d)"""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    axes = [np.linspace(lo, hi, points) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([m.ravel() for m in mesh], axis=-1)


def stratified_quantiles(n: int) -> np.ndarray:
    """Midpoint probabilities (i - 1/2)/n, symmetric about 1/2"""
    return (np.arange(1, n + 1) - 0.5) / n


def sample_uniform(n: int, d: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Stratified quantiles of the uniform law on [-1, 1]^d (Latin hypercube for d > 1)"""
    column = -1.0 + 2.0 * stratified_quantiles(n)
    return _latin_columns(column, d, rng)


def sample_gaussian(n: int, d: int, rng: Optional[np.random.Generator] = None,
                    scale: float = 0.5) -> np.ndarray:
    """Quantiles of a normal law truncated to [-1, 1] (Latin hypercube for d > 1)"""
    bound = 1.0 / scale
    column = scale * truncnorm.ppf(stratified_quantiles(n), -bound, bound)
    # ppf is symmetric only up to round-off
    column = 0.5 * (column - column[::-1])
    return _latin_columns(column, d, rng)


def _latin_columns(column: np.ndarray, d: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if d == 1:
        return column[:, np.newaxis]
    if rng is None:
        rng = np.random.default_rng(0)
    columns = [column] + [rng.permutation(column) for _ in range(d - 1)]
    return np.stack(columns, axis=-1)


SAMPLERS = {
    'uniform': sample_uniform,
    'gaussian': sample_gaussian,
}


def sample_ensemble(tag: str, n: int, d: int, seed: int = 0) -> np.ndarray:
    """Draw initial positions from a built-in sampler tag"""
    try:
        sampler = SAMPLERS[tag]
    except KeyError:
        raise ValueError(f"unknown sampler '{tag}' (expected one of {sorted(SAMPLERS)})")
    return sampler(n, d, np.random.default_rng(seed))


def clamp_to_box(values: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(values, lower), upper)


def project_to_ball(values: np.ndarray, radius: float) -> np.ndarray:
    """Radial projection of the last axis onto the centered ball"""
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return values * scale
