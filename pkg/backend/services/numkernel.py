"""
Numerical Kernel
Dense float64 matrices, SVD, symmetric eigendecomposition, the real FFT pair
and seeded splittable randomness shared by every other service
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple

import numpy as np
import numpy.typing as npt

from services.errors import (
    AsymmetricMatrixError,
    NonFiniteError,
    ShapeError,
    SvdConvergenceError,
)

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

RECONSTRUCTION_TOL = 1e-10
SYMMETRY_TOL = 1e-12


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Validate and convert to a 2-D finite float64 array"""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> Vector:
    """Validate and convert to a 1-D finite float64 array"""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def frozen(a: np.ndarray) -> np.ndarray:
    """Mark an array read-only so it can be shared safely"""
    a.setflags(write=False)
    return a


class SvdResult(NamedTuple):
    """Thin SVD: a = u @ diag(s) @ v.T"""
    u: Matrix
    s: Vector
    v: Matrix


def _fix_signs(u: Matrix, v: Matrix) -> Tuple[Matrix, Matrix]:
    # largest-magnitude entry of every v column is made positive
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def svd_thin(a) -> SvdResult:
    """
    Thin SVD with singular values sorted non-increasing and a deterministic
    column sign convention
    """
    a = as_matrix(a, "svd input")
    rows, cols = a.shape
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as e:
        logger.error(f"SVD failed for {rows}x{cols} matrix: {e}")
        raise SvdConvergenceError(rows, cols, float("nan")) from e

    # LAPACK already sorts; a stable sort keeps tied columns in original order
    order = np.argsort(-s, kind="stable")
    u, s, v = u[:, order], s[order], vh.T[:, order]
    u, v = _fix_signs(u, v)

    scale = max(np.linalg.norm(a), np.finfo(np.float64).tiny)
    residual = np.linalg.norm(a - (u * s) @ v.T) / scale
    if not np.isfinite(residual) or residual > RECONSTRUCTION_TOL:
        raise SvdConvergenceError(rows, cols, float(residual))
    return SvdResult(u=u, s=s, v=v)


def check_symmetric(a: Matrix, tol: float = SYMMETRY_TOL) -> None:
    """Raise if a deviates from symmetry beyond tol (scaled by the largest entry)"""
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"square matrix expected, got shape {a.shape}")
    bound = tol * max(1.0, float(np.max(np.abs(a))))
    gap = float(np.max(np.abs(a - a.T)))
    if gap > bound:
        raise AsymmetricMatrixError(f"matrix asymmetric by {gap:.3e} (tolerance {bound:.1e})")


def eigh(a) -> Tuple[Vector, Matrix]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix"""
    a = as_matrix(a, "eigh input")
    check_symmetric(a)
    sym = 0.5 * (a + a.T)
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    return eigenvalues, eigenvectors


def fft_real(x) -> npt.NDArray[np.complex128]:
    """Full D-point spectrum of a real vector"""
    x = as_vector(x, "fft input")
    if x.size < 1:
        raise ShapeError("fft input must have at least one entry")
    return np.fft.fft(x)


def ifft_real(spectrum) -> Vector:
    """Inverse of fft_real, keeping the real part"""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    if spectrum.ndim != 1 or spectrum.size < 1:
        raise ShapeError(f"spectrum must be a non-empty 1-D array, got shape {spectrum.shape}")
    return np.fft.ifft(spectrum).real


def rfft_rows(x: Matrix, d: int) -> npt.NDArray[np.complex128]:
    """Half spectra of every row (length d // 2 + 1)"""
    return np.fft.rfft(x, n=d, axis=-1)


def irfft_rows(spectra: npt.NDArray[np.complex128], d: int) -> Matrix:
    """Inverse of rfft_rows"""
    return np.fft.irfft(spectra, n=d, axis=-1)


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class Rng:
    """
    Seeded, splittable random source.

    Built on numpy's PCG64 with SeedSequence spawn keys: a child stream is
    addressed by a name path, so the same (seed, path) always yields the same
    numbers regardless of which other streams were consumed.
    """
    seed: int
    path: Tuple[int, ...] = field(default=())

    def child(self, name: str) -> "Rng":
        return Rng(seed=self.seed, path=self.path + (_stream_key(name),))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))

    def normal(self, shape) -> Matrix:
        return self.generator().standard_normal(shape)

    def orthogonal(self, size: int) -> Matrix:
        """Haar-distributed orthogonal matrix"""
        q, r = np.linalg.qr(self.normal((size, size)))
        d = np.sign(np.diag(r))
        d[d == 0] = 1.0
        return q * d
