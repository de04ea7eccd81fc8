"""
Torch Bridge
Homogeneous mapping, the sub-matrix square root and the descriptor
normalization as torch autograd functions, so the moment head can sit on top
of a torch backbone
"""

import logging
import math

import numpy as np
import torch
from torch import nn

from models.schemas import NormConfig
from services.moment_layers import DEFAULT_EPSILON, hm_backward, hm_forward, ssqrt_backward, ssqrt_forward
from services.norm_layers import (
    l2_normalize_backward,
    l2_normalize_forward,
    signed_sqrt_backward,
    signed_sqrt_forward,
)

logger = logging.getLogger(__name__)


class _HomogeneousSsqrt(torch.autograd.Function):
    """Y = Ssqrt(HM(X)) per feature map; float64 on the host"""

    @staticmethod
    def forward(ctx, x, epsilon, use_hm, strict):
        maps = x.detach().to(device="cpu", dtype=torch.float64)
        batched = maps.dim() == 3
        if not batched:
            maps = maps.unsqueeze(0)
        outputs, caches = [], []
        for features in maps.numpy():
            pre = hm_forward(features) if use_hm else features / math.sqrt(features.shape[0])
            y, cache = ssqrt_forward(pre, epsilon)
            outputs.append(y)
            caches.append(cache)
        ctx.caches = caches
        ctx.use_hm = use_hm
        ctx.strict = strict
        ctx.batched = batched
        out = torch.from_numpy(np.stack(outputs)).to(device=x.device, dtype=x.dtype)
        return out if batched else out[0]

    @staticmethod
    def backward(ctx, grad_output):
        grads = grad_output.detach().to(device="cpu", dtype=torch.float64)
        if not ctx.batched:
            grads = grads.unsqueeze(0)
        result = []
        for g, cache in zip(grads.numpy(), ctx.caches):
            g = ssqrt_backward(g, cache, strict=ctx.strict)
            result.append(hm_backward(g) if ctx.use_hm else g / math.sqrt(g.shape[0]))
        grad_input = torch.from_numpy(np.stack(result)).to(device=grad_output.device,
                                                           dtype=grad_output.dtype)
        return (grad_input if ctx.batched else grad_input[0]), None, None, None


def homogeneous_ssqrt(x: torch.Tensor, epsilon: float = DEFAULT_EPSILON, use_hm: bool = True,
                      strict: bool = False) -> torch.Tensor:
    if x.dim() not in (2, 3):
        raise RuntimeError(f"expected (n, C) or (B, n, C) feature maps, got {tuple(x.shape)}")
    return _HomogeneousSsqrt.apply(x, epsilon, use_hm, strict)


class _SignedSqrtL2(torch.autograd.Function):
    """l2(signed_sqrt(v)) per descriptor, through the same numpy layers as the head"""

    @staticmethod
    def forward(ctx, pooled, norm_cfg):
        rows = pooled.detach().to(device="cpu", dtype=torch.float64).reshape(-1, pooled.shape[-1])
        rows = rows.numpy().copy()
        rooted = [signed_sqrt_forward(v) for v in rows]
        out = np.stack([l2_normalize_forward(r, norm_cfg) for r in rooted])
        ctx.rows = rows
        ctx.rooted = rooted
        ctx.norm_cfg = norm_cfg
        return torch.from_numpy(out).to(device=pooled.device, dtype=pooled.dtype).reshape(pooled.shape)

    @staticmethod
    def backward(ctx, grad_output):
        grads = grad_output.detach().to(device="cpu", dtype=torch.float64)
        grads = grads.reshape(-1, grad_output.shape[-1]).numpy()
        result = np.stack([
            signed_sqrt_backward(l2_normalize_backward(g, r, ctx.norm_cfg), v, ctx.norm_cfg)
            for g, r, v in zip(grads, ctx.rooted, ctx.rows)
        ])
        grad_input = torch.from_numpy(result).to(device=grad_output.device, dtype=grad_output.dtype)
        return grad_input.reshape(grad_output.shape), None


def signed_sqrt_l2(pooled: torch.Tensor, norm_cfg: NormConfig = NormConfig()) -> torch.Tensor:
    return _SignedSqrtL2.apply(pooled, norm_cfg)


class MomentEmbedding(nn.Module):
    """
    Moment pooling over the locations of a (B, n, C) feature map: optional
    homogeneous mapping and sub-matrix square root, then Y^T Y flattened,
    signed square root and l2 normalization
    """

    def __init__(self, use_hm: bool = True, use_ssqrt: bool = True,
                 epsilon: float = DEFAULT_EPSILON, strict: bool = False,
                 norm_cfg: NormConfig = NormConfig()):
        super().__init__()
        self.use_hm = use_hm
        self.use_ssqrt = use_ssqrt
        self.epsilon = epsilon
        self.strict = strict
        self.norm_cfg = norm_cfg

    def _homogeneous(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-2]
        if self.use_hm:
            ones = torch.ones(*x.shape[:-1], 1, dtype=x.dtype, device=x.device)
            x = torch.cat([ones, x], dim=-1)
        return x / math.sqrt(n)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.use_ssqrt:
            y = homogeneous_ssqrt(x, self.epsilon, self.use_hm, self.strict)
        else:
            y = self._homogeneous(x)
        gram = y.transpose(-2, -1) @ y
        return signed_sqrt_l2(gram.flatten(-2), self.norm_cfg)

    def extra_repr(self) -> str:
        return f"use_hm={self.use_hm}, use_ssqrt={self.use_ssqrt}, epsilon={self.epsilon:g}"
