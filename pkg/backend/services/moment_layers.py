"""
Moment Layers
Homogeneous mapping and the sub-matrix square-root layer with its exact
SVD-based backward pass
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from services.errors import (
    DegenerateSpectrumError,
    InsufficientLocationsError,
    ShapeError,
    SpectrumCollisionError,
)
from services.numkernel import Matrix, Vector, as_matrix, frozen, svd_thin

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
SEPARATION_GUARD = 1e-8


@dataclass(frozen=True)
class HomogeneousFeatures:
    """(1/sqrt(n)) [1 | X] for a feature map X of n locations and c channels"""
    matrix: Matrix
    n: int
    c: int


@dataclass(frozen=True)
class SvdCache:
    """Retained SVD factors of one ssqrt_forward call"""
    u1: Matrix
    s: Vector
    v1: Matrix
    e: int
    epsilon: float
    shape: Tuple[int, int]


def hm_forward(x) -> HomogeneousFeatures:
    """Pad every location with a constant 1 and scale by 1/sqrt(n)"""
    x = as_matrix(x, "feature map")
    n, c = x.shape
    scale = 1.0 / math.sqrt(n)
    matrix = np.empty((n, c + 1), dtype=np.float64)
    matrix[:, 0] = scale
    matrix[:, 1:] = x * scale
    return HomogeneousFeatures(matrix=frozen(matrix), n=n, c=c)


def hm_backward(grad_xt, like: Optional[HomogeneousFeatures] = None) -> Matrix:
    """Adjoint of hm_forward: drop the ones-column gradient, scale by 1/sqrt(n)"""
    grad_xt = as_matrix(grad_xt, "homogeneous gradient")
    n, cols = grad_xt.shape
    if cols < 2:
        raise ShapeError(f"homogeneous gradient needs at least 2 columns, got {cols}")
    if like is not None and grad_xt.shape != like.matrix.shape:
        raise ShapeError(
            f"gradient shape {grad_xt.shape} does not match forward output {like.matrix.shape}"
        )
    return grad_xt[:, 1:] / math.sqrt(n)


def ssqrt_forward(xt: Union[HomogeneousFeatures, np.ndarray],
                  epsilon: float = DEFAULT_EPSILON) -> Tuple[Matrix, SvdCache]:
    """
    Normalize features so that Y^T Y is the matrix square root of X^T X.

    Y keeps the input shape: row i < e holds sqrt(s_i) v_i^T for every
    singular value s_i above epsilon, the remaining rows are zero.
    """
    matrix = xt.matrix if isinstance(xt, HomogeneousFeatures) else as_matrix(xt, "ssqrt input")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n, m = matrix.shape
    if n < m:
        raise InsufficientLocationsError(
            f"sub-matrix square root needs at least {m} locations for {m} columns, got {n}; "
            f"supply more locations"
        )

    u, s, v = svd_thin(matrix)
    e = int(np.count_nonzero(s > epsilon))
    if e == 0:
        raise DegenerateSpectrumError(
            f"all singular values are at or below epsilon={epsilon:g} (largest {s[0]:.3e})"
        )
    if e < m:
        logger.debug(f"ssqrt truncated spectrum: kept {e} of {m} singular values")

    y = np.zeros((n, m), dtype=np.float64)
    y[:e] = np.sqrt(s[:e])[:, None] * v[:, :e].T
    cache = SvdCache(
        u1=frozen(u[:, :e].copy()),
        s=frozen(s[:e].copy()),
        v1=frozen(v[:, :e].copy()),
        e=e,
        epsilon=epsilon,
        shape=(n, m),
    )
    return y, cache


def k_matrix(s: Vector, strict: bool = True, guard: float = SEPARATION_GUARD) -> Matrix:
    """
    K_ij = 1 / (s_i^2 - s_j^2) off the diagonal, 0 on it.

    Pairs closer than guard raise in strict mode; otherwise the denominator
    is clamped to +/-guard, positive above the diagonal since s is sorted
    non-increasing.
    """
    s2 = s * s
    diff = s2[:, None] - s2[None, :]
    off = ~np.eye(s.size, dtype=bool)
    close = off & (np.abs(diff) < guard)
    if np.any(close):
        i, j = np.argwhere(close)[0]
        if strict:
            raise SpectrumCollisionError((int(i), int(j)), float(abs(diff[i, j])), guard)
        logger.warning(f"clamping {int(close.sum()) // 2} near-degenerate singular value pairs")
        upper = np.triu(np.ones_like(diff, dtype=bool), k=1)
        diff = np.where(close, np.where(upper, guard, -guard), diff)
    k = np.zeros_like(diff)
    k[off] = 1.0 / diff[off]
    return k


def _sym(q: Matrix) -> Matrix:
    return 0.5 * (q + q.T)


def ssqrt_backward(grad_y, cache: SvdCache, strict: bool = True) -> Matrix:
    """
    Gradient with respect to the ssqrt input, assuming dL/dU = 0:

        dL/dX = U1 ( diag(dL/ds) + 2 S [K^T o (V1^T dL/dV)]_sym ) V1^T

    with dL/ds_i = (1/2) s_i^(-1/2) (G1 V1)_ii and dL/dV = G1^T S^(1/2), where
    G1 holds the first e rows of dL/dY.
    """
    grad_y = as_matrix(grad_y, "ssqrt output gradient")
    if grad_y.shape != cache.shape:
        raise ShapeError(f"gradient shape {grad_y.shape} does not match forward shape {cache.shape}")

    s, u1, v1 = cache.s, cache.u1, cache.v1
    root = np.sqrt(s)
    g1 = grad_y[: cache.e]

    grad_s = 0.5 * np.einsum("ij,ji->i", g1, v1) / root
    grad_v = g1.T * root[None, :]
    k = k_matrix(s, strict=strict)
    inner = k.T * (v1.T @ grad_v)
    middle = np.diag(grad_s) + 2.0 * s[:, None] * _sym(inner)
    return u1 @ middle @ v1.T
