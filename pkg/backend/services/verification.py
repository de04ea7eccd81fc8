"""
Verification Oracles
Independent checks for the moment layers: eigendecomposition square root,
central finite-difference gradient checking, Gaussian block structure and
Monte Carlo sketch quality
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from models.schemas import GradCheckReport, SketchQualityReport
from services.errors import NonFiniteError
from services.moment_layers import hm_forward
from services.numkernel import Matrix, Rng, Vector, as_matrix, eigh
from services.pooling_layers import SketchParams, ts_forward

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-6
REL_FLOOR = 1e-8
NEGATIVE_EIGEN_TOL = 1e-10
# standard error at 4x the draws must shrink to at most this fraction (ideal 0.5)
SE_SHRINK_LIMIT = 0.55


def sqrtm_oracle(m) -> Matrix:
    """Symmetric PSD square root W diag(sqrt(lambda)) W^T"""
    m = as_matrix(m, "sqrtm input")
    eigenvalues, vectors = eigh(m)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    if eigenvalues[0] < -NEGATIVE_EIGEN_TOL * scale:
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {eigenvalues[0]:.3e}")
    root = (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T
    return 0.5 * (root + root.T)


def relative_frobenius(a, b) -> float:
    """||a - b||_F / ||b||_F"""
    denom = float(np.linalg.norm(b))
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / max(denom, REL_FLOOR)


def numerical_gradient(f: Callable[[np.ndarray], float], point: np.ndarray,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of a scalar map, one coordinate at a time"""
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    shifted = point.copy()
    for index in np.ndindex(point.shape):
        original = shifted[index]
        shifted[index] = original + step
        upper = float(f(shifted.copy()))
        shifted[index] = original - step
        lower = float(f(shifted.copy()))
        shifted[index] = original
        if not (math.isfinite(upper) and math.isfinite(lower)):
            raise NonFiniteError(f"objective is not finite when perturbing coordinate {index}")
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def gradcheck(f: Callable[[np.ndarray], float], analytic_grad, point,
              step: float = DEFAULT_STEP, tol: float = 1e-5,
              name: str = "gradient") -> GradCheckReport:
    """
    Compare an analytic gradient with central differences; the relative error
    of each coordinate uses max(|analytic|, |numeric|, 1e-8) as denominator
    """
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic_grad(point) if callable(analytic_grad) else analytic_grad,
                          dtype=np.float64).reshape(point.shape)
    numeric = numerical_gradient(f, point, step)
    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    rel_err = abs_err / denom
    worst = np.unravel_index(int(np.argmax(rel_err)), rel_err.shape) if rel_err.size else ()
    report = GradCheckReport(
        op=name,
        max_rel_err=float(rel_err.max()) if rel_err.size else 0.0,
        max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
        worst_index=tuple(int(i) for i in worst),
        step=step,
        tol=tol,
    )
    logger.debug(f"gradcheck {name}: max_rel_err={report.max_rel_err:.3e} tol={tol:g}")
    return report


@dataclass(frozen=True)
class GaussianBlocks:
    """Mean, second moment and covariance of a feature map"""
    mean: Vector
    second_moment: Matrix
    covariance: Matrix


def gaussian_blocks(x) -> GaussianBlocks:
    x = as_matrix(x, "feature map")
    n = x.shape[0]
    mean = x.mean(axis=0)
    second = (x.T @ x) / n
    second = 0.5 * (second + second.T)
    return GaussianBlocks(mean=mean, second_moment=second,
                          covariance=second - np.outer(mean, mean))


def moment_matrix(blocks: GaussianBlocks) -> Matrix:
    """[[1, mu], [mu^T, (1/n) X^T X]]"""
    c = blocks.mean.size
    m = np.empty((c + 1, c + 1))
    m[0, 0] = 1.0
    m[0, 1:] = blocks.mean
    m[1:, 0] = blocks.mean
    m[1:, 1:] = blocks.second_moment
    return m


def verify_eq2(x, tol: float = 1e-12) -> bool:
    """The tensor product of the homogeneous features equals the Gaussian embedding"""
    xt = hm_forward(x).matrix
    product = xt.T @ xt
    expected = moment_matrix(gaussian_blocks(x))
    scale = max(1.0, float(np.max(np.abs(expected))))
    return bool(np.max(np.abs(product - expected)) <= tol * scale)


def circular_convolution_direct(a, b) -> Vector:
    """O(D^2) circular convolution used as a reference"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a.size
    out = np.zeros(d)
    for k in range(d):
        for j in range(d):
            out[k] += a[j] * b[(k - j) % d]
    return out


def sketch_pair(d_in: int, rng: Rng, correlation: float = 0.9):
    """Fixed positively correlated test vectors for sketch-quality runs"""
    x = rng.child("x").normal(d_in)
    noise = rng.child("noise").normal(d_in)
    y = correlation * x + math.sqrt(max(0.0, 1.0 - correlation ** 2)) * noise
    return x, y


def sketch_quality(d_in: int, d_out: int, trials: int, rng: Rng,
                   x: Optional[Vector] = None, y: Optional[Vector] = None) -> SketchQualityReport:
    """
    Monte Carlo quality of <TS(x), TS(y)> against <x, y>^2 over independent
    hash draws. When the target vanishes the per-trial error is absolute.
    """
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if x is None or y is None:
        x, y = sketch_pair(d_in, rng.child("vectors"))
    target = float(np.dot(x, y)) ** 2
    estimates = np.empty(trials)
    for t in range(trials):
        params = SketchParams.generate(d_in, d_out, rng.child(f"trial-{t}"))
        estimates[t] = float(np.dot(ts_forward(x, params), ts_forward(y, params)))

    absolute = target <= REL_FLOOR
    errors = np.abs(estimates - target)
    if not absolute:
        errors = errors / target
    std = float(estimates.std(ddof=1)) if trials > 1 else 0.0
    return SketchQualityReport(
        d_in=d_in,
        d_out=d_out,
        trials=trials,
        target=target,
        mean_estimate=float(estimates.mean()),
        mean_error=float(errors.mean()),
        std=std,
        standard_error=std / math.sqrt(trials),
        absolute=absolute,
    )


def standard_error_ratio(d_in: int, d_out: int, base_trials: int, rng: Rng,
                         x: Optional[Vector] = None, y: Optional[Vector] = None) -> float:
    """Standard error at 4 * base_trials hash draws over that at base_trials"""
    if x is None or y is None:
        x, y = sketch_pair(d_in, rng.child("vectors"))
    base = sketch_quality(d_in, d_out, base_trials, rng, x, y)
    more = sketch_quality(d_in, d_out, 4 * base_trials, rng, x, y)
    if base.standard_error == 0.0:
        return 0.0 if more.standard_error == 0.0 else math.inf
    return more.standard_error / base.standard_error
