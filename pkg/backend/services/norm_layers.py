"""
Normalization Layers
Element-wise signed square root and l2 normalization of pooled descriptors
"""

import numpy as np

from models.schemas import NormConfig
from services.errors import ShapeError
from services.numkernel import Vector, as_vector

DEFAULT_NORM = NormConfig()


def _paired(grad_out, v):
    grad_out = as_vector(grad_out, "upstream gradient")
    v = as_vector(v, "forward input")
    if grad_out.shape != v.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} does not match input shape {v.shape}")
    return grad_out, v


def signed_sqrt_forward(v) -> Vector:
    """sign(v) * sqrt(|v|)"""
    v = as_vector(v, "signed sqrt input")
    return np.sign(v) * np.sqrt(np.abs(v))


def signed_sqrt_backward(grad_out, v, cfg: NormConfig = DEFAULT_NORM) -> Vector:
    grad_out, v = _paired(grad_out, v)
    return grad_out / (2.0 * np.maximum(np.sqrt(np.abs(v)), cfg.sqrt_guard))


def l2_normalize_forward(v, cfg: NormConfig = DEFAULT_NORM) -> Vector:
    """v / ||v||, or zeros when ||v|| is at or below the guard"""
    v = as_vector(v, "l2 input")
    norm = float(np.linalg.norm(v))
    if norm <= cfg.l2_guard:
        return np.zeros_like(v)
    return v / norm


def l2_normalize_backward(grad_out, v, cfg: NormConfig = DEFAULT_NORM) -> Vector:
    """(grad_out - <grad_out, u> u) / ||v|| with u = v / ||v||"""
    grad_out, v = _paired(grad_out, v)
    norm = float(np.linalg.norm(v))
    if norm <= cfg.l2_guard:
        return np.zeros_like(v)
    u = v / norm
    return (grad_out - np.dot(grad_out, u) * u) / norm
