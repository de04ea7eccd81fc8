"""
Run Harness
Training and evaluation loops, gradient-check and oracle suites, sketch
benchmarks and dataset generation behind the CLI commands
"""

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.schemas import (
    EvalSummary,
    GradCheckReport,
    ModelHeader,
    OracleCheck,
    RunConfig,
    TrainingMetadata,
    VariantSpec,
)
from services import moment_layers, norm_layers, pooling_layers
from services.errors import ShapeError, SpectrumCollisionError
from services.model_head import (
    HeadParams,
    MoNetHead,
    descriptor_dim,
    footprint,
    head_backward,
    head_forward,
    loss_softmax_ce,
)
from services.numkernel import Matrix, Rng, eigh, fft_real, ifft_real, svd_thin
from services.persistence import atomic_write, load_dataset, load_model, save_dataset, save_model
from services.synth_data import Sample, generate
from services.verification import (
    SE_SHRINK_LIMIT,
    circular_convolution_direct,
    gradcheck,
    relative_frobenius,
    sketch_pair,
    sketch_quality,
    sqrtm_oracle,
    standard_error_ratio,
    verify_eq2,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "wall_ms"]
GRADCHECK_HEADER = ["op", "max_rel_err", "tol", "pass"]
VERIFY_HEADER = ["check", "value", "threshold", "pass", "detail"]
SKETCHBENCH_HEADER = ["d_in", "d_out", "trials", "target", "mean_estimate", "mean_error",
                      "std", "standard_error", "compression_at_c512"]
GRID_HEADER = ["variant", "pooling", "seed", "test_accuracy"]

# hash draws for the smaller run of the standard-error check
SE_BASE_TRIALS = 2000

ALL_VARIANTS = ("monet", "monet-2", "monet-u", "monet-2u")
ALL_POOLINGS = ("bilinear", "sketch")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write(path, buffer.getvalue().encode("utf-8"))
    return Path(path)


def preprocess(x: Matrix, signed_sqrt: bool) -> Matrix:
    """Element-wise signed square root of local features, when enabled"""
    if not signed_sqrt:
        return x
    return norm_layers.signed_sqrt_forward(x.ravel()).reshape(x.shape)


def load_splits(cfg: RunConfig) -> Tuple[List[Sample], List[Sample]]:
    """
    Train/test samples from --data (a directory holding train.json and
    test.json, or a train manifest plus --test-data), or generated from the
    configured task when no data is given
    """
    if cfg.data is None:
        return generate(cfg.task)
    data = Path(cfg.data)
    if data.is_dir():
        train, _ = load_dataset(data / "train.json")
        test_path = Path(cfg.test_data) if cfg.test_data else data / "test.json"
    else:
        train, _ = load_dataset(data)
        test_path = Path(cfg.test_data) if cfg.test_data else data.with_name("test.json")
    test, _ = load_dataset(test_path) if test_path.exists() else ([], None)
    return train, test


@dataclass
class EpochStats:
    loss: float
    accuracy: float


def evaluate(head: MoNetHead, samples: Sequence[Sample], signed_sqrt: bool) -> Tuple[EpochStats, EvalSummary]:
    """Mean loss, accuracy and confusion counts of a head on a sample set"""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    k = head.params.classes
    confusion = np.zeros((k, k), dtype=np.int64)
    total_loss = 0.0
    for sample in samples:
        logits = head.logits(preprocess(sample.features, signed_sqrt))
        loss, _ = loss_softmax_ce(logits, sample.label)
        total_loss += loss
        confusion[sample.label, int(np.argmax(logits))] += 1
    correct = int(np.trace(confusion))
    summary = EvalSummary(
        accuracy=correct / len(samples),
        total=len(samples),
        correct=correct,
        confusion=confusion.tolist(),
    )
    return EpochStats(loss=total_loss / len(samples), accuracy=summary.accuracy), summary


@dataclass
class TrainResult:
    header: ModelHeader
    params: HeadParams
    metrics: List[List]
    model_path: Path
    metrics_path: Path


class Trainer:
    """
    Warm start (classifier-only steps) followed by full-head epochs, with batch
    order derived from the run seed
    """

    def __init__(self, cfg: RunConfig, channels: int, classes: int):
        self.cfg = cfg
        self.rng = Rng(cfg.seed)
        params = HeadParams.initialize(cfg.variant, channels, classes, self.rng.child("init"),
                                       adapter=cfg.adapter)
        self.head = MoNetHead(cfg.variant, params, cfg.norm, cfg.epsilon, cfg.optim)
        self.channels = channels
        self.steps = 0
        logger.info(
            f"Initialized {cfg.variant.label} head: descriptor dim "
            f"{descriptor_dim(cfg.variant, channels)}, {classes} classes"
        )

    def _batches(self, count: int, stream: Rng) -> Iterable[np.ndarray]:
        order = stream.generator().permutation(count)
        size = self.cfg.optim.batch_size
        for start in range(0, count, size):
            yield order[start:start + size]

    async def _step(self, batch: List[Tuple[Matrix, int]], warm: bool) -> float:
        names = self.head.trainable_names(warm)
        if self.cfg.workers > 1:
            loss, grads = await self.head.batch_loss_and_grads_async(batch, names, self.cfg.workers)
        else:
            loss, grads = self.head.batch_loss_and_grads(batch, names)
        self.head.step(grads)
        self.steps += 1
        logger.debug(f"step {self.steps} ({'warm' if warm else 'full'}): loss={loss:.6f}")
        return loss

    def _prepared(self, samples: Sequence[Sample], idx: np.ndarray,
                  flip_stream: Optional[Rng] = None) -> List[Tuple[Matrix, int]]:
        signed = self.cfg.preprocess_signed_sqrt
        flips = None
        if flip_stream is not None:
            flips = flip_stream.generator().random(len(idx)) < 0.5
        batch = []
        for j, i in enumerate(idx):
            x = preprocess(samples[i].features, signed)
            if flips is not None and flips[j]:
                x = x[::-1]
            batch.append((x, samples[i].label))
        return batch

    async def fit(self, train: Sequence[Sample], test: Sequence[Sample]) -> Tuple[List[List], float]:
        cfg = self.cfg
        metrics: List[List] = []
        last_loss = float("nan")
        order_rng = self.rng.child("batch-order")

        if cfg.warmup_steps:
            logger.info(f"Warm-starting classifier for {cfg.warmup_steps} steps")
            warm_rng = order_rng.child("warmup")
            done = 0
            round_index = 0
            while done < cfg.warmup_steps:
                for idx in self._batches(len(train), warm_rng.child(f"round-{round_index}")):
                    last_loss = await self._step(self._prepared(train, idx), warm=True)
                    done += 1
                    if done >= cfg.warmup_steps:
                        break
                round_index += 1

        self._record(metrics, 0, train, test, 0.0)
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            epoch_rng = order_rng.child(f"epoch-{epoch}")
            for b, idx in enumerate(self._batches(len(train), epoch_rng)):
                flip = epoch_rng.child(f"flip-{b}") if cfg.augment_flip else None
                last_loss = await self._step(self._prepared(train, idx, flip), warm=False)
            elapsed = (time.perf_counter() - started) * 1000.0 if cfg.timing else 0.0
            self._record(metrics, epoch, train, test, elapsed)
        return metrics, last_loss

    def _record(self, metrics: List[List], epoch: int, train, test, wall_ms: float) -> None:
        for split, samples in (("train", train), ("test", test)):
            if not samples:
                continue
            stats, _ = evaluate(self.head, samples, self.cfg.preprocess_signed_sqrt)
            metrics.append([epoch, split, stats.loss, stats.accuracy, wall_ms])
            logger.info(f"epoch {epoch} {split}: loss={stats.loss:.4f} accuracy={stats.accuracy:.4f}")


def _check_samples(samples: Sequence[Sample]) -> Tuple[int, int]:
    if not samples:
        raise ValueError("training set is empty")
    channels = samples[0].features.shape[1]
    for s in samples:
        if s.features.shape[1] != channels:
            raise ShapeError(f"mixed channel counts in dataset: {channels} and {s.features.shape[1]}")
    classes = max(s.label for s in samples) + 1
    return channels, max(classes, 2)


async def run_train(cfg: RunConfig, train: Optional[List[Sample]] = None,
                    test: Optional[List[Sample]] = None) -> TrainResult:
    """Train a head, write model.mnm and metrics.csv under cfg.out"""
    if train is None:
        train, test = load_splits(cfg)
    test = test or []
    channels, classes = _check_samples(train)
    classes = max([classes] + [s.label + 1 for s in test])

    trainer = Trainer(cfg, channels, classes)
    metrics, last_loss = await trainer.fit(train, test)

    header = ModelHeader(
        variant=cfg.variant,
        norm=cfg.norm,
        epsilon=cfg.epsilon,
        channels=channels,
        classes=classes,
        preprocess_signed_sqrt=cfg.preprocess_signed_sqrt,
        metadata=TrainingMetadata(
            seed=cfg.seed,
            epochs=cfg.epochs,
            warmup_steps=cfg.warmup_steps,
            steps=trainer.steps,
            final_loss=None if math.isnan(last_loss) else last_loss,
        ),
    )
    out = Path(cfg.out)
    model_path = out / "model.mnm"
    save_model(model_path, header, trainer.head.params)
    metrics_path = write_csv(out / "metrics.csv", METRICS_HEADER, metrics)
    logger.info(f"Training finished after {trainer.steps} steps; metrics in {metrics_path}")
    return TrainResult(header=header, params=trainer.head.params, metrics=metrics,
                       model_path=model_path, metrics_path=metrics_path)


def head_from_model(header: ModelHeader, params: HeadParams) -> MoNetHead:
    return MoNetHead(header.variant, params, header.norm, header.epsilon)


async def run_eval(cfg: RunConfig, samples: Optional[List[Sample]] = None) -> EvalSummary:
    """Accuracy and confusion counts of a saved model on a dataset"""
    if cfg.model is None:
        raise ValueError("eval needs --model")
    header, params = load_model(cfg.model)
    if samples is None:
        if cfg.data is None:
            raise ValueError("eval needs --data")
        data = Path(cfg.data)
        samples, _ = load_dataset(data / "test.json" if data.is_dir() else data)
    if not samples:
        raise ValueError("evaluation set is empty")
    for s in samples:
        if s.features.shape[1] != header.channels:
            raise ShapeError(
                f"model expects {header.channels} channels, sample has {s.features.shape[1]}"
            )
        if s.label >= header.classes:
            raise ShapeError(f"label {s.label} out of range for a {header.classes}-class model")

    head = head_from_model(header, params)
    _, summary = evaluate(head, samples, header.preprocess_signed_sqrt)
    out = Path(cfg.out)
    write_csv(out / "confusion.csv", ["true"] + [f"pred_{j}" for j in range(header.classes)],
              [[i] + row for i, row in enumerate(summary.confusion)])
    atomic_write(out / "eval.json", summary.model_dump_json(indent=2).encode("utf-8"))
    logger.info(f"Eval accuracy {summary.accuracy:.4f} ({summary.correct}/{summary.total})")
    return summary


# ---------------------------------------------------------------------------
# gradient-check suite


def _merge(name: str, reports: List[GradCheckReport]) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_err)
    return worst.model_copy(update={
        "op": name,
        "max_abs_err": max(r.max_abs_err for r in reports),
    })


def _separated_matrix(rng: Rng, rows: int, cols: int, gap: float = 0.1) -> Matrix:
    """Random matrix whose singular values are pairwise at least gap apart"""
    g = rng.child("spectrum").generator()
    s = np.sort(1.0 + gap * np.arange(cols) + 0.5 * gap * g.random(cols))[::-1] * (1.0 + g.random())
    u = rng.child("u").orthogonal(rows)[:, :cols]
    v = rng.child("v").orthogonal(cols)
    return (u * s) @ v.T


def gradcheck_layers(rng: Rng, points: int = 3, ssqrt_points: int = 20,
                     tol_override: Optional[float] = None) -> List[GradCheckReport]:
    """Every layer adjoint against central differences on seeded points"""
    def tol(value: float) -> float:
        return tol_override if tol_override is not None else value

    def random_weights(shape, stream: Rng) -> np.ndarray:
        return stream.child("weights").normal(shape)

    cases: Dict[str, Callable[[Rng], GradCheckReport]] = {}

    def hm_case(p: Rng) -> GradCheckReport:
        x0 = p.normal((6, 3))
        w = random_weights((6, 4), p)
        return gradcheck(lambda x: float(np.sum(w * moment_layers.hm_forward(x).matrix)),
                         moment_layers.hm_backward(w), x0, tol=tol(1e-7))
    cases["hm"] = hm_case

    def ssqrt_case(p: Rng) -> GradCheckReport:
        x0 = _separated_matrix(p, 10, 4)
        w = random_weights((10, 4), p)
        _, cache = moment_layers.ssqrt_forward(x0)
        analytic = moment_layers.ssqrt_backward(w, cache)
        return gradcheck(lambda x: float(np.sum(w * moment_layers.ssqrt_forward(x)[0])),
                         analytic, x0, tol=tol(1e-5))
    cases["ssqrt"] = ssqrt_case

    def bilinear_case(p: Rng) -> GradCheckReport:
        y0 = p.normal((5, 3))
        w = random_weights(9, p)
        return gradcheck(lambda y: float(w @ pooling_layers.bilinear_pool_forward(y).values),
                         pooling_layers.bilinear_pool_backward(w, y0), y0, tol=tol(1e-6))
    cases["bilinear"] = bilinear_case

    def ts_case(p: Rng) -> GradCheckReport:
        params = pooling_layers.SketchParams.generate(5, 16, p.child("tables"))
        y0 = p.normal((4, 5))
        w = random_weights(16, p)
        return gradcheck(lambda y: float(w @ pooling_layers.ts_pool_forward(y, params).values),
                         pooling_layers.ts_pool_backward(w, y0, params), y0, tol=tol(1e-5))
    cases["ts"] = ts_case

    def bounded(p: Rng, size: int) -> np.ndarray:
        g = p.child("bounded").generator()
        return g.uniform(0.5, 2.0, size) * g.choice(np.array([-1.0, 1.0]), size)

    def signed_sqrt_case(p: Rng) -> GradCheckReport:
        v0 = bounded(p, 8)
        w = random_weights(8, p)
        return gradcheck(lambda v: float(w @ norm_layers.signed_sqrt_forward(v)),
                         norm_layers.signed_sqrt_backward(w, v0), v0, tol=tol(1e-6))
    cases["signed_sqrt"] = signed_sqrt_case

    def l2_case(p: Rng) -> GradCheckReport:
        v0 = bounded(p, 8)
        w = random_weights(8, p)
        return gradcheck(lambda v: float(w @ norm_layers.l2_normalize_forward(v)),
                         norm_layers.l2_normalize_backward(w, v0), v0, tol=tol(1e-6))
    cases["l2"] = l2_case

    def composed_case(p: Rng) -> GradCheckReport:
        v0 = bounded(p, 8)
        w = random_weights(8, p)

        def f(v):
            return float(w @ norm_layers.l2_normalize_forward(norm_layers.signed_sqrt_forward(v)))
        rooted = norm_layers.signed_sqrt_forward(v0)
        analytic = norm_layers.signed_sqrt_backward(norm_layers.l2_normalize_backward(w, rooted), v0)
        return gradcheck(f, analytic, v0, tol=tol(1e-5))
    cases["signed_sqrt+l2"] = composed_case

    def loss_case(p: Rng) -> GradCheckReport:
        logits0 = p.normal(5)
        label = int(p.child("label").generator().integers(5))
        _, analytic = loss_softmax_ce(logits0, label)
        return gradcheck(lambda z: loss_softmax_ce(z, label)[0], analytic, logits0, tol=tol(1e-7))
    cases["loss"] = loss_case

    reports = []
    for name, case in cases.items():
        count = ssqrt_points if name == "ssqrt" else points
        stream = rng.child(f"gradcheck-{name}")
        reports.append(_merge(name, [case(stream.child(f"point-{i}")) for i in range(count)]))

    reports.append(degenerate_ssqrt_report(tol(1e-5)))
    return reports


def degenerate_ssqrt_report(tol: float) -> GradCheckReport:
    """A repeated spectrum must trip the separation guard rather than return garbage"""
    x0 = np.zeros((6, 3))
    x0[0, 0] = x0[1, 1] = 1.0
    x0[2, 2] = 0.5
    _, cache = moment_layers.ssqrt_forward(x0)
    try:
        moment_layers.ssqrt_backward(np.ones((6, 3)), cache)
    except SpectrumCollisionError as e:
        return GradCheckReport(op="ssqrt[degenerate]", max_rel_err=float("nan"),
                               max_abs_err=float("nan"), tol=tol, skipped=str(e))
    return GradCheckReport(op="ssqrt[degenerate]", max_rel_err=float("inf"),
                           max_abs_err=float("inf"), tol=tol)


def head_gradient_reports(variant: VariantSpec, rng: Rng, tol: float = 1e-4, locations: int = 12,
                          channels: int = 4, classes: int = 3) -> List[GradCheckReport]:
    """Loss gradient of the composed head with respect to the input and every classifier tensor"""
    params = HeadParams.initialize(variant, channels, classes, rng.child("init"), init_scale=1.0)
    x0 = np.abs(rng.child("features").normal((locations, channels))) + 0.1
    label = 1

    def loss_of_input(x):
        logits, _ = head_forward(x, variant, params)
        return loss_softmax_ce(logits, label)[0]

    logits, tape = head_forward(x0, variant, params)
    _, grad_logits = loss_softmax_ce(logits, label)
    grads = head_backward(grad_logits, tape, params, need_input=True)
    reports = [gradcheck(loss_of_input, grads["input"], x0, tol=tol,
                         name=f"head[{variant.label}].input")]

    for name, tensor in params.tensors().items():
        def loss_of_tensor(t, name=name):
            logits, _ = head_forward(x0, variant, params.with_tensors({name: t}))
            return loss_softmax_ce(logits, label)[0]

        reports.append(gradcheck(loss_of_tensor, grads[name], tensor, tol=tol,
                                 name=f"head[{variant.label}].{name.split('.')[-1]}"))
    return reports


def gradcheck_head(variant: VariantSpec, rng: Rng, tol: float = 1e-4,
                   locations: int = 12, channels: int = 4, classes: int = 3) -> GradCheckReport:
    """Worst of the input, weight and bias checks"""
    return _merge(f"head[{variant.label}]",
                  head_gradient_reports(variant, rng, tol, locations, channels, classes))


def run_gradcheck(cfg: RunConfig) -> List[GradCheckReport]:
    """Layer suite plus the composed head for all 8 variant/pooling combinations"""
    rng = Rng(cfg.seed).child("gradcheck")
    reports = gradcheck_layers(rng, tol_override=cfg.gradcheck_tol)
    head_tol = cfg.gradcheck_tol if cfg.gradcheck_tol is not None else 1e-4
    for name in ALL_VARIANTS:
        for pooling in ALL_POOLINGS:
            variant = VariantSpec.from_name(name, pooling, sketch_dim=32)
            reports.append(gradcheck_head(variant, rng.child(f"head-{name}-{pooling}"), tol=head_tol))

    write_csv(Path(cfg.out) / "gradcheck.csv", GRADCHECK_HEADER,
              [[r.op, r.max_rel_err, r.tol, r.status] for r in reports])
    failed = [r.op for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient checks failed: {', '.join(failed)}")
    else:
        logger.info(f"All {len(reports)} gradient checks passed")
    return reports


# ---------------------------------------------------------------------------
# oracle suite


def _check(name: str, value: float, threshold: float, detail: str = "") -> OracleCheck:
    passed = math.isfinite(value) and value <= threshold
    return OracleCheck(name=name, value=value, threshold=threshold, passed=passed, detail=detail)


def _homogeneous_input(stream: Rng, max_rows: int = 64, max_cols: int = 16) -> Matrix:
    g = stream.child("shape").generator()
    c = int(g.integers(1, max_cols + 1))
    n = int(g.integers(c + 2, max_rows + 1))
    return moment_layers.hm_forward(stream.child("values").normal((n, c))).matrix


def oracle_checks(rng: Rng, trials: int = 100) -> List[OracleCheck]:
    checks = []

    svd_err = 0.0
    eig_err = 0.0
    for i in range(trials):
        g = rng.child(f"svd-shape-{i}").generator()
        rows, cols = (int(v) for v in g.integers(1, 12, size=2))
        a = rng.child(f"svd-{i}").normal((rows, cols))
        u, s, v = svd_thin(a)
        k = s.size
        svd_err = max(
            svd_err,
            np.linalg.norm(u.T @ u - np.eye(k)),
            np.linalg.norm(v.T @ v - np.eye(k)),
            relative_frobenius((u * s) @ v.T, a),
            float(np.max(np.diff(s), initial=0.0)),
        )
        eigenvalues, _ = eigh(a.T @ a)
        top = np.sort(eigenvalues)[::-1][:k]
        eig_err = max(eig_err, float(np.max(np.abs(top - s ** 2)) / max(s[0] ** 2, 1e-300)))
    checks.append(_check("svd_orthogonality_order_reconstruction", svd_err, 1e-10))
    checks.append(_check("eigh_matches_squared_singular_values", eig_err, 1e-8))

    conv_err = 0.0
    for d in (1, 2, 3, 8, 13, 32):
        a = rng.child(f"conv-a-{d}").normal(d)
        b = rng.child(f"conv-b-{d}").normal(d)
        fast = ifft_real(fft_real(a) * fft_real(b))
        conv_err = max(conv_err, float(np.max(np.abs(fast - circular_convolution_direct(a, b)))))
    checks.append(_check("circular_convolution_theorem", conv_err, 1e-9))

    eq2_failures = sum(
        not verify_eq2(rng.child(f"eq2-{i}").normal((1 + i % 20, 1 + i % 7))) for i in range(trials)
    )
    checks.append(_check("gaussian_embedding_blocks", float(eq2_failures), 0.0,
                         f"{trials} random feature maps"))

    eq8_err = 0.0
    square_err = 0.0
    invariance_err = 0.0
    for i in range(trials):
        stream = rng.child(f"eq8-{i}")
        xt = _homogeneous_input(stream)
        y, cache = moment_layers.ssqrt_forward(xt)
        root = y.T @ y
        eq8_err = max(eq8_err, relative_frobenius(root, sqrtm_oracle(xt.T @ xt)))
        if cache.e == xt.shape[1]:
            square_err = max(square_err, relative_frobenius(root @ root, xt.T @ xt))
        r = stream.child("rotation").orthogonal(xt.shape[1])
        y_rot, _ = moment_layers.ssqrt_forward(xt @ r)
        invariance_err = max(invariance_err, relative_frobenius(y_rot.T @ y_rot, r.T @ root @ r))
    checks.append(_check("ssqrt_matches_eigen_square_root", eq8_err, 1e-10))
    checks.append(_check("ssqrt_idempotent_square", square_err, 1e-9))
    checks.append(_check("ssqrt_orthogonal_right_invariance", invariance_err, 1e-9))

    psd_err = 0.0
    for i in range(20):
        y = rng.child(f"psd-{i}").normal((6, 4))
        gram = pooling_layers.bilinear_pool_forward(y).values.reshape(4, 4)
        if not np.array_equal(gram, gram.T):
            psd_err = float("inf")
            break
        psd_err = max(psd_err, -float(eigh(gram)[0][0]))
    checks.append(_check("bilinear_symmetric_psd", psd_err, 1e-10))

    perm_err = 0.0
    for i in range(10):
        stream = rng.child(f"perm-{i}")
        y = stream.normal((8, 5))
        shuffled = y[stream.child("order").generator().permutation(8)]
        params = pooling_layers.SketchParams.generate(5, 64, stream.child("tables"))
        perm_err = max(
            perm_err,
            float(np.max(np.abs(pooling_layers.bilinear_pool_forward(y).values
                                - pooling_layers.bilinear_pool_forward(shuffled).values))),
            float(np.max(np.abs(pooling_layers.ts_pool_forward(y, params).values
                                - pooling_layers.ts_pool_forward(shuffled, params).values))),
        )
    checks.append(_check("pooling_row_permutation_invariance", perm_err, 1e-10))

    x, y = sketch_pair(16, rng.child("sketch-vectors"))
    at_200 = sketch_quality(16, 64, 200, rng.child("sketch"), x, y)
    checks.append(_check("tensor_sketch_unbiased",
                         abs(at_200.mean_estimate - at_200.target) / at_200.target, 0.05,
                         "d=16, D=64, 200 hash draws"))
    checks.append(_check("tensor_sketch_standard_error_shrinks",
                         standard_error_ratio(16, 64, SE_BASE_TRIALS, rng.child("sketch-se"), x, y),
                         SE_SHRINK_LIMIT,
                         f"standard error at {4 * SE_BASE_TRIALS} draws over that at {SE_BASE_TRIALS}"))

    full = VariantSpec(use_hm=True, use_ssqrt=True, pooling="bilinear")
    sketch = VariantSpec(use_hm=True, use_ssqrt=True, pooling="sketch", sketch_dim=10_000)
    dims_err = float(abs(descriptor_dim(full, 512) - 263_169) + abs(descriptor_dim(sketch, 512) - 10_000))
    checks.append(_check("descriptor_dimensions_c512", dims_err, 0.0,
                         f"compression {footprint(sketch, 512, 1000).compression:.4f}"))
    return checks


def run_verify(cfg: RunConfig) -> List[OracleCheck]:
    checks = oracle_checks(Rng(cfg.seed).child("verify"))
    write_csv(Path(cfg.out) / "verify.csv", VERIFY_HEADER,
              [[c.name, c.value, c.threshold, str(c.passed).lower(), c.detail] for c in checks])
    for c in checks:
        logger.info(f"{c.name}: {c.value:.3e} (threshold {c.threshold:g}) -> {'ok' if c.passed else 'FAIL'}")
    return checks


def run_sketchbench(cfg: RunConfig, dims: Sequence[int] = (16, 64, 256, 1024, 4096)) -> List[List]:
    """Sketch quality across sketch dimensions at the task's pooled width"""
    d_in = cfg.task.channels + 1
    rng = Rng(cfg.seed).child("sketchbench")
    x, y = sketch_pair(d_in, rng.child("vectors"))
    rows = []
    for d in dims:
        report = sketch_quality(d_in, d, cfg.sketch_trials, rng.child(f"D-{d}"), x, y)
        compression = footprint(VariantSpec(pooling="sketch", sketch_dim=d), 512, 1).compression
        rows.append([d_in, d, report.trials, report.target, report.mean_estimate,
                     report.mean_error, report.std, report.standard_error, compression])
        logger.info(f"D={d}: mean error {report.mean_error:.4f}, std {report.std:.4f}")
    write_csv(Path(cfg.out) / "sketchbench.csv", SKETCHBENCH_HEADER, rows)
    return rows


def run_gen_data(cfg: RunConfig) -> Tuple[Path, Path]:
    train, test = generate(cfg.task)
    out = Path(cfg.out)
    return (save_dataset(out, train, "train", cfg.task),
            save_dataset(out, test, "test", cfg.task))


# normalized variant first; each pair should not lose to its unnormalized twin
NORMALIZATION_PAIRS = (("monet", "monet-u"), ("monet-2", "monet-2u"))


@dataclass
class VariantGridResult:
    medians: Dict[str, float]
    orderings: Dict[str, bool]

    @property
    def ordering_holds(self) -> bool:
        return all(self.orderings.values())


def compare_normalization(medians: Dict[str, float]) -> Dict[str, bool]:
    """MoNet >= MoNet-U and MoNet-2 >= MoNet-2U, per pooling present in medians"""
    orderings = {}
    for key in medians:
        name, pooling = key.split(" ", 1)
        for normalized, plain in NORMALIZATION_PAIRS:
            other = f"{plain} {pooling}"
            if name == normalized and other in medians:
                orderings[f"{key} >= {other}"] = medians[key] >= medians[other]
    return orderings


async def run_variant_grid(cfg: RunConfig, seeds: Sequence[int],
                           variants: Sequence[str] = ALL_VARIANTS,
                           poolings: Sequence[str] = ALL_POOLINGS) -> VariantGridResult:
    """
    Train every variant/pooling pair on the configured task for each seed;
    report the median test accuracy per pair and the normalization orderings
    """
    rows = []
    accuracies: Dict[str, List[float]] = {}
    for seed in seeds:
        task = cfg.task.model_copy(update={"seed": seed})
        train, test = generate(task)
        for name in variants:
            for pooling in poolings:
                variant = VariantSpec.from_name(name, pooling, cfg.variant.sketch_dim)
                run_cfg = cfg.model_copy(update={
                    "variant": variant, "seed": seed, "task": task,
                    "out": str(Path(cfg.out) / f"{name}-{pooling}-seed{seed}"),
                })
                result = await run_train(run_cfg, train, test)
                accuracy = result.metrics[-1][3]
                rows.append([name, pooling, seed, accuracy])
                accuracies.setdefault(f"{name} {pooling}", []).append(accuracy)
    write_csv(Path(cfg.out) / "variant_grid.csv", GRID_HEADER, rows)

    medians = {key: float(np.median(values)) for key, values in accuracies.items()}
    orderings = compare_normalization(medians)
    for check, holds in orderings.items():
        logger.info(f"{check}: {'holds' if holds else 'violated'} over {len(seeds)} seeds")
    return VariantGridResult(medians=medians, orderings=orderings)
