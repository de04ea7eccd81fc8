"""
Pooling Layers
Exact bilinear (tensor product) pooling and Tensor Sketch compact pooling,
each with its backward pass
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt

from services.errors import ShapeError
from services.numkernel import (
    Matrix,
    Rng,
    Vector,
    as_matrix,
    as_vector,
    frozen,
    irfft_rows,
    rfft_rows,
)

logger = logging.getLogger(__name__)

DEFAULT_SKETCH_DIM = 10_000


@dataclass(frozen=True)
class PooledDescriptor:
    """Flattened pooled representation"""
    values: Vector
    kind: Literal["bilinear", "sketch"]

    @property
    def dim(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class SketchParams:
    """Fixed hash and sign tables of the two count sketches"""
    d_in: int
    d_out: int
    h1: npt.NDArray[np.int64]
    h2: npt.NDArray[np.int64]
    s1: Vector
    s2: Vector
    seed: int

    def __post_init__(self):
        for name in ("h1", "h2", "s1", "s2"):
            table = getattr(self, name)
            if table.shape != (self.d_in,):
                raise ShapeError(f"{name} must have length {self.d_in}, got shape {table.shape}")
        for name in ("h1", "h2"):
            table = getattr(self, name)
            if np.any(table < 0) or np.any(table >= self.d_out):
                raise ValueError(f"{name} entries must lie in [0, {self.d_out})")
        for name in ("s1", "s2"):
            if not np.all(np.abs(getattr(self, name)) == 1.0):
                raise ValueError(f"{name} entries must be -1 or +1")

    @classmethod
    def generate(cls, d_in: int, d_out: int, rng: Rng) -> "SketchParams":
        """Draw the tables from named sub-streams of rng"""
        if d_in < 1 or d_out < 1:
            raise ValueError(f"sketch dimensions must be positive, got d_in={d_in}, d_out={d_out}")
        tables = {}
        for t in (1, 2):
            tables[f"h{t}"] = frozen(
                rng.child(f"sketch-h{t}").generator().integers(0, d_out, size=d_in, dtype=np.int64)
            )
            tables[f"s{t}"] = frozen(
                rng.child(f"sketch-s{t}").generator().choice(np.array([-1.0, 1.0]), size=d_in)
            )
        return cls(d_in=d_in, d_out=d_out, seed=rng.seed, **tables)

    def table(self, t: int):
        if t == 1:
            return self.h1, self.s1
        if t == 2:
            return self.h2, self.s2
        raise ValueError(f"sketch table must be 1 or 2, got {t}")


def bilinear_pool_forward(y) -> PooledDescriptor:
    """Row-major flattening of Y^T Y = sum_i y_i y_i^T"""
    y = as_matrix(y, "bilinear input")
    gram = y.T @ y
    # a + b == b + a exactly, so this is bitwise symmetric
    gram = 0.5 * (gram + gram.T)
    return PooledDescriptor(values=gram.ravel(), kind="bilinear")


def bilinear_pool_backward(grad_m, y) -> Matrix:
    """grad_y = Y (G + G^T) with G the reshaped descriptor gradient"""
    y = as_matrix(y, "bilinear input")
    m = y.shape[1]
    grad_m = as_vector(grad_m, "bilinear gradient")
    if grad_m.size != m * m:
        raise ShapeError(f"bilinear gradient must have {m * m} entries, got {grad_m.size}")
    g = grad_m.reshape(m, m)
    return y @ (g + g.T)


def _check_width(y: Matrix, params: SketchParams) -> None:
    if y.shape[-1] != params.d_in:
        raise ShapeError(f"sketch expects {params.d_in} input columns, got {y.shape[-1]}")


def _sketch_rows(y: Matrix, t: int, params: SketchParams) -> Matrix:
    h, s = params.table(t)
    out = np.zeros((y.shape[0], params.d_out), dtype=np.float64)
    # unbuffered, in index order: repeated bins accumulate deterministically
    np.add.at(out, (slice(None), h), y * s)
    return out


def count_sketch(x, t: int, params: SketchParams) -> Vector:
    """psi_j(x) = sum over i with h_t(i) = j of s_t(i) x_i"""
    x = as_vector(x, "count sketch input")
    _check_width(x, params)
    return _sketch_rows(x[None, :], t, params)[0]


def ts_forward(x, params: SketchParams) -> Vector:
    """Circular convolution of the two count sketches of x"""
    x = as_vector(x, "tensor sketch input")
    _check_width(x, params)
    return ts_pool_forward(x[None, :], params).values


def ts_pool_forward(y, params: SketchParams) -> PooledDescriptor:
    """Sum of the tensor sketches of every row of y"""
    y = as_matrix(y, "tensor sketch input")
    _check_width(y, params)
    d = params.d_out
    f1 = rfft_rows(_sketch_rows(y, 1, params), d)
    f2 = rfft_rows(_sketch_rows(y, 2, params), d)
    # the row sum commutes with the inverse transform
    values = irfft_rows((f1 * f2).sum(axis=0), d)
    return PooledDescriptor(values=values, kind="sketch")


def ts_pool_backward(grad_out, y, params: SketchParams) -> Matrix:
    """
    Adjoint of ts_pool_forward: per row, the gradient of each count sketch is
    the circular cross-correlation of grad_out with the other sketch, pulled
    back through the count-sketch transpose
    """
    y = as_matrix(y, "tensor sketch input")
    _check_width(y, params)
    grad_out = as_vector(grad_out, "tensor sketch gradient")
    d = params.d_out
    if grad_out.size != d:
        raise ShapeError(f"tensor sketch gradient must have {d} entries, got {grad_out.size}")

    fg = rfft_rows(grad_out, d)
    f1 = rfft_rows(_sketch_rows(y, 1, params), d)
    f2 = rfft_rows(_sketch_rows(y, 2, params), d)
    grad_p1 = irfft_rows(fg[None, :] * np.conj(f2), d)
    grad_p2 = irfft_rows(fg[None, :] * np.conj(f1), d)
    return grad_p1[:, params.h1] * params.s1 + grad_p2[:, params.h2] * params.s2
