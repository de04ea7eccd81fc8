"""
MoNet Head
Assembles homogeneous mapping, sub-matrix square root, pooling and
normalization into one differentiable head with a linear softmax classifier,
and provides the clipped SGD optimizer used to train it
"""

import asyncio
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.schemas import NormConfig, OptimConfig, VariantSpec
from services.errors import ShapeError, StaleTapeError
from services.moment_layers import (
    DEFAULT_EPSILON,
    SvdCache,
    hm_backward,
    hm_forward,
    ssqrt_backward,
    ssqrt_forward,
)
from services.norm_layers import (
    l2_normalize_backward,
    l2_normalize_forward,
    signed_sqrt_backward,
    signed_sqrt_forward,
)
from services.numkernel import Matrix, Rng, Vector, as_matrix, as_vector
from services.pooling_layers import (
    SketchParams,
    bilinear_pool_backward,
    bilinear_pool_forward,
    ts_pool_backward,
    ts_pool_forward,
)

logger = logging.getLogger(__name__)

CLASSIFIER_PARAMS = ("classifier.weights", "classifier.bias")
ADAPTER_PARAM = "adapter.weights"


def pooled_width(variant: VariantSpec, channels: int) -> int:
    """Columns entering the pooling layer"""
    return channels + 1 if variant.use_hm else channels


def descriptor_dim(variant: VariantSpec, channels: int) -> int:
    """(C+1)^2 with HM, C^2 without, D for sketch pooling"""
    if variant.pooling == "sketch":
        return variant.sketch_dim
    return pooled_width(variant, channels) ** 2


@dataclass(frozen=True)
class Footprint:
    """Dimension and memory accounting of one variant"""
    descriptor_dim: int
    parameter_entries: int
    classifier_bytes: int
    compression: float


def footprint(variant: VariantSpec, channels: int, classes: int) -> Footprint:
    """
    Dimension, non-trainable parameter count and single-precision classifier
    memory; compression is measured against the (C+1)^2 full descriptor
    """
    dim = descriptor_dim(variant, channels)
    # each count sketch packs bin and sign into one signed index per input
    entries = 2 * pooled_width(variant, channels) if variant.pooling == "sketch" else 0
    return Footprint(
        descriptor_dim=dim,
        parameter_entries=entries,
        classifier_bytes=4 * classes * dim,
        compression=1.0 - dim / float((channels + 1) ** 2),
    )


@dataclass(frozen=True)
class HeadParams:
    """Classifier, optional feature adapter and fixed sketch tables"""
    weights: Matrix
    bias: Vector
    adapter: Optional[Matrix] = None
    sketch: Optional[SketchParams] = None
    version: int = 0

    @property
    def classes(self) -> int:
        return int(self.bias.size)

    @classmethod
    def initialize(cls, variant: VariantSpec, channels: int, classes: int, rng: Rng,
                   adapter: bool = False, init_scale: float = 0.0) -> "HeadParams":
        """Zero (or small Gaussian) classifier, identity adapter, seeded sketch tables"""
        if classes < 2:
            raise ValueError(f"a classifier needs at least 2 classes, got {classes}")
        dim = descriptor_dim(variant, channels)
        weights = np.zeros((classes, dim))
        if init_scale > 0:
            weights = init_scale * rng.child("classifier").normal((classes, dim))
        sketch = None
        if variant.pooling == "sketch":
            sketch = SketchParams.generate(pooled_width(variant, channels), variant.sketch_dim,
                                           rng.child("sketch"))
        return cls(
            weights=weights,
            bias=np.zeros(classes),
            adapter=np.eye(channels) if adapter else None,
            sketch=sketch,
        )

    def tensors(self) -> Dict[str, np.ndarray]:
        """Trainable tensors by name"""
        out = {"classifier.weights": self.weights, "classifier.bias": self.bias}
        if self.adapter is not None:
            out[ADAPTER_PARAM] = self.adapter
        return out

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> "HeadParams":
        return replace(
            self,
            weights=tensors.get("classifier.weights", self.weights),
            bias=tensors.get("classifier.bias", self.bias),
            adapter=tensors.get(ADAPTER_PARAM, self.adapter),
            version=self.version + 1,
        )


@dataclass
class Tape:
    """Intermediates of one forward pass, consumed by exactly one backward"""
    variant: VariantSpec
    params_version: int
    strict: bool
    features: Matrix
    adapted: Matrix
    pre_ssqrt: Matrix
    cache: Optional[SvdCache]
    pooled_input: Matrix
    pooled: Vector
    rooted: Vector
    normalized: Vector
    consumed: bool = False


def head_forward(x, variant: VariantSpec, params: HeadParams,
                 norm_cfg: NormConfig = NormConfig(), epsilon: float = DEFAULT_EPSILON,
                 strict: bool = True) -> Tuple[Vector, Tape]:
    """
    Logits W y_n + b of one feature map.

    strict selects how near-degenerate spectra are handled in the backward
    pass: raise (verification) or clamp (training).
    """
    x = as_matrix(x, "feature map")
    n, c = x.shape
    expected = params.adapter.shape[0] if params.adapter is not None else None
    if expected is not None and c != expected:
        raise ShapeError(f"feature map has {c} channels, adapter expects {expected}")
    if params.weights.shape[1] != descriptor_dim(variant, c):
        raise ShapeError(
            f"classifier expects descriptors of length {params.weights.shape[1]}, "
            f"variant {variant.label} with {c} channels produces {descriptor_dim(variant, c)}"
        )
    if variant.pooling == "sketch" and params.sketch is None:
        raise ShapeError("sketch pooling requires sketch parameters")

    adapted = x @ params.adapter if params.adapter is not None else x
    if variant.use_hm:
        pre = hm_forward(adapted).matrix
    else:
        pre = adapted / math.sqrt(n)

    cache = None
    pooled_input = pre
    if variant.use_ssqrt:
        pooled_input, cache = ssqrt_forward(pre, epsilon)

    if variant.pooling == "sketch":
        pooled = ts_pool_forward(pooled_input, params.sketch).values
    else:
        pooled = bilinear_pool_forward(pooled_input).values

    rooted = signed_sqrt_forward(pooled)
    normalized = l2_normalize_forward(rooted, norm_cfg)
    logits = params.weights @ normalized + params.bias

    tape = Tape(
        variant=variant,
        params_version=params.version,
        strict=strict,
        features=x,
        adapted=adapted,
        pre_ssqrt=pre,
        cache=cache,
        pooled_input=pooled_input,
        pooled=pooled,
        rooted=rooted,
        normalized=normalized,
    )
    return logits, tape


def head_backward(grad_logits, tape: Tape, params: HeadParams,
                  norm_cfg: NormConfig = NormConfig(),
                  need_input: bool = False) -> Dict[str, np.ndarray]:
    """
    Gradients of every trainable tensor (and optionally the input feature map)
    from the logit gradient of the paired forward call
    """
    if tape.consumed:
        raise StaleTapeError("forward tape was already consumed by a backward pass")
    if tape.params_version != params.version:
        raise StaleTapeError(
            f"parameters changed since the forward pass (version {tape.params_version} -> {params.version})"
        )
    tape.consumed = True

    grad_logits = as_vector(grad_logits, "logit gradient")
    if grad_logits.size != params.classes:
        raise ShapeError(f"logit gradient must have {params.classes} entries, got {grad_logits.size}")

    grads: Dict[str, np.ndarray] = {
        "classifier.weights": np.outer(grad_logits, tape.normalized),
        "classifier.bias": grad_logits.copy(),
    }
    needs_features = params.adapter is not None or need_input
    if not needs_features:
        return grads

    variant = tape.variant
    g = params.weights.T @ grad_logits
    g = l2_normalize_backward(g, tape.rooted, norm_cfg)
    g = signed_sqrt_backward(g, tape.pooled, norm_cfg)
    if variant.pooling == "sketch":
        g = ts_pool_backward(g, tape.pooled_input, params.sketch)
    else:
        g = bilinear_pool_backward(g, tape.pooled_input)
    if variant.use_ssqrt:
        g = ssqrt_backward(g, tape.cache, strict=tape.strict)
    if variant.use_hm:
        g = hm_backward(g)
    else:
        g = g / math.sqrt(tape.features.shape[0])

    if params.adapter is not None:
        grads[ADAPTER_PARAM] = tape.features.T @ g
        g = g @ params.adapter.T
    if need_input:
        grads["input"] = g
    return grads


def loss_softmax_ce(logits, label: int) -> Tuple[float, Vector]:
    """Cross-entropy of softmax(logits) against label, and its logit gradient"""
    logits = as_vector(logits, "logits")
    k = logits.size
    if k < 2:
        raise ValueError(f"softmax cross-entropy needs at least 2 classes, got {k}")
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    shifted = logits - np.max(logits)
    log_z = math.log(float(np.sum(np.exp(shifted))))
    loss = log_z - float(shifted[label])
    probs = np.exp(shifted - log_z)
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad


@dataclass
class OptimState:
    """Momentum buffers plus the hyperparameters that drive them"""
    config: OptimConfig
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], config: OptimConfig) -> "OptimState":
        return cls(config=config, velocity={k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             state: OptimState) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """
    One update per entry:
        g' = clamp(g, clip_lo, clip_hi); v' = momentum v + g' + wd w; w' = w - lr v'
    Tensors without a gradient are left untouched.
    """
    cfg = state.config
    new_params = dict(params)
    new_velocity = dict(state.velocity)
    for name, grad in grads.items():
        if name not in params:
            continue
        weight = params[name]
        if grad.shape != weight.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {weight.shape}")
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(weight)
        clipped = np.clip(grad, cfg.clip_lo, cfg.clip_hi)
        velocity = cfg.momentum * velocity + clipped + cfg.weight_decay * weight
        new_velocity[name] = velocity
        new_params[name] = weight - cfg.lr * velocity
    return new_params, OptimState(config=cfg, velocity=new_velocity, steps=state.steps + 1)


class MoNetHead:
    """
    Stateful wrapper tying a variant, its parameters and an optimizer together
    """

    def __init__(self, variant: VariantSpec, params: HeadParams,
                 norm_cfg: NormConfig = NormConfig(), epsilon: float = DEFAULT_EPSILON,
                 optim: OptimConfig = OptimConfig()):
        self.variant = variant
        self.params = params
        self.norm_cfg = norm_cfg
        self.epsilon = epsilon
        self.state = OptimState.for_params(params.tensors(), optim)

    def logits(self, x) -> Vector:
        logits, _ = head_forward(x, self.variant, self.params, self.norm_cfg, self.epsilon)
        return logits

    def predict(self, x) -> int:
        return int(np.argmax(self.logits(x)))

    def descriptor(self, x) -> Vector:
        """Normalized descriptor y_n fed to the classifier"""
        _, tape = head_forward(x, self.variant, self.params, self.norm_cfg, self.epsilon)
        return tape.normalized

    def sample_loss_and_grads(self, x, label: int,
                              trainable: Iterable[str]) -> Tuple[float, Dict[str, np.ndarray]]:
        logits, tape = head_forward(x, self.variant, self.params, self.norm_cfg,
                                    self.epsilon, strict=False)
        loss, grad_logits = loss_softmax_ce(logits, label)
        grads = head_backward(grad_logits, tape, self.params, self.norm_cfg)
        wanted = set(trainable)
        return loss, {k: v for k, v in grads.items() if k in wanted}

    def _reduce(self, results: Sequence[Tuple[float, Dict[str, np.ndarray]]]
                ) -> Tuple[float, Dict[str, np.ndarray]]:
        # fixed submission order keeps the float sums reproducible
        count = len(results)
        total = 0.0
        summed: Dict[str, np.ndarray] = {}
        for loss, grads in results:
            total += loss
            for name, grad in grads.items():
                summed[name] = summed[name] + grad if name in summed else grad.copy()
        return total / count, {k: v / count for k, v in summed.items()}

    def batch_loss_and_grads(self, batch: Sequence[Tuple[Matrix, int]],
                             trainable: Iterable[str]) -> Tuple[float, Dict[str, np.ndarray]]:
        if not batch:
            raise ValueError("empty batch")
        names = list(trainable)
        return self._reduce([self.sample_loss_and_grads(x, y, names) for x, y in batch])

    async def batch_loss_and_grads_async(self, batch: Sequence[Tuple[Matrix, int]],
                                         trainable: Iterable[str],
                                         workers: int = 4) -> Tuple[float, Dict[str, np.ndarray]]:
        """Per-sample passes in worker threads; results gathered in submission order"""
        if not batch:
            raise ValueError("empty batch")
        names = list(trainable)
        limit = asyncio.Semaphore(workers)

        async def run(x, y):
            async with limit:
                return await asyncio.to_thread(self.sample_loss_and_grads, x, y, names)

        results = await asyncio.gather(*(run(x, y) for x, y in batch))
        return self._reduce(results)

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        tensors, self.state = sgd_step(self.params.tensors(), grads, self.state)
        self.params = self.params.with_tensors(tensors)

    def trainable_names(self, warm: bool) -> List[str]:
        """Classifier only during warm start, every tensor afterwards"""
        if warm:
            return list(CLASSIFIER_PARAMS)
        return list(self.params.tensors())
