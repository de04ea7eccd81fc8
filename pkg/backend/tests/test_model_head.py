"""
Tests for the MoNet head, loss and optimizer
"""

import math

import numpy as np
import pytest

from models.schemas import OptimConfig, TaskSpec, VariantSpec
from services.errors import ShapeError, StaleTapeError
from services.model_head import (
    ADAPTER_PARAM,
    HeadParams,
    MoNetHead,
    OptimState,
    descriptor_dim,
    footprint,
    head_backward,
    head_forward,
    loss_softmax_ce,
    sgd_step,
)
from services.numkernel import Rng
from services.synth_data import generate
from services.verification import gradcheck

VARIANTS = [(name, pooling)
            for name in ("monet", "monet-2", "monet-u", "monet-2u")
            for pooling in ("bilinear", "sketch")]


@pytest.fixture
def features():
    return np.abs(Rng(0).child("features").normal((12, 4))) + 0.1


class TestDimensions:
    """Test cases for descriptor and footprint accounting"""

    def test_descriptor_dims(self):
        assert descriptor_dim(VariantSpec.from_name("monet"), 512) == 263_169
        assert descriptor_dim(VariantSpec.from_name("monet-2"), 512) == 262_144
        assert descriptor_dim(VariantSpec.from_name("monet", "ts", 10_000), 512) == 10_000

    def test_footprint_at_512_channels(self):
        full = footprint(VariantSpec.from_name("monet"), 512, 1000)
        compact = footprint(VariantSpec.from_name("monet", "sketch", 10_000), 512, 1000)

        assert full.classifier_bytes == 4 * 1000 * 263_169
        assert full.parameter_entries == 0
        assert compact.classifier_bytes == 40_000_000
        assert compact.parameter_entries == 2 * 513
        assert compact.compression >= 0.96


class TestLoss:
    """Test cases for loss_softmax_ce"""

    def test_uniform_logits(self):
        loss, grad = loss_softmax_ce([0.0, 0.0], 0)

        assert loss == pytest.approx(math.log(2.0))
        np.testing.assert_allclose(grad, [-0.5, 0.5])

    def test_large_logits_are_stable(self):
        loss, grad = loss_softmax_ce([1000.0, 0.0, -1000.0], 0)

        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_gradient(self):
        z0 = Rng(1).normal(5)
        _, analytic = loss_softmax_ce(z0, 3)

        report = gradcheck(lambda z: loss_softmax_ce(z, 3)[0], analytic, z0, tol=1e-7)

        assert report.passed, report

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_softmax_ce([0.0, 1.0], 2)


class TestSgdStep:
    """Test cases for sgd_step"""

    def test_plain_step(self):
        params = {"w": np.array([1.0])}
        state = OptimState.for_params(params, OptimConfig(lr=0.1, momentum=0.9, weight_decay=0.0))

        new, state = sgd_step(params, {"w": np.array([0.5])}, state)

        np.testing.assert_allclose(new["w"], [0.95])
        np.testing.assert_allclose(state.velocity["w"], [0.5])
        assert state.steps == 1

    def test_clipping(self):
        params = {"w": np.array([1.0, 1.0])}
        state = OptimState.for_params(params, OptimConfig(lr=0.1, weight_decay=0.0))

        new, _ = sgd_step(params, {"w": np.array([3.0, -5.0])}, state)

        np.testing.assert_allclose(new["w"], [0.9, 1.1])

    def test_weight_decay(self):
        params = {"w": np.array([1.0])}
        state = OptimState.for_params(params, OptimConfig(lr=0.1, weight_decay=0.0005))

        new, _ = sgd_step(params, {"w": np.array([1.0])}, state)

        np.testing.assert_allclose(new["w"], [1.0 - 0.1 * 1.0005])

    def test_momentum_accumulates(self):
        params = {"w": np.array([0.0])}
        state = OptimState.for_params(params, OptimConfig(lr=1.0, momentum=0.5, weight_decay=0.0))

        params, state = sgd_step(params, {"w": np.array([1.0])}, state)
        params, state = sgd_step(params, {"w": np.array([1.0])}, state)

        np.testing.assert_allclose(params["w"], [-2.5])

    def test_inputs_untouched(self):
        weights = np.array([1.0])
        state = OptimState.for_params({"w": weights}, OptimConfig())

        sgd_step({"w": weights}, {"w": np.array([1.0])}, state)

        assert weights[0] == 1.0


class TestHeadForwardBackward:
    """Test cases for head_forward / head_backward"""

    @pytest.mark.parametrize("name,pooling", VARIANTS)
    def test_end_to_end_gradient(self, name, pooling, features):
        variant = VariantSpec.from_name(name, pooling, sketch_dim=32)
        params = HeadParams.initialize(variant, 4, 3, Rng(2).child(name + pooling), init_scale=1.0)
        logits, tape = head_forward(features, variant, params)
        _, grad_logits = loss_softmax_ce(logits, 1)
        grads = head_backward(grad_logits, tape, params, need_input=True)

        report = gradcheck(lambda x: loss_softmax_ce(head_forward(x, variant, params)[0], 1)[0],
                           grads["input"], features, tol=1e-4)

        assert report.passed, report

    def test_descriptor_is_unit_length(self, features):
        variant = VariantSpec.from_name("monet")
        params = HeadParams.initialize(variant, 4, 3, Rng(3))

        _, tape = head_forward(features, variant, params)

        assert tape.normalized.size == 25
        assert np.linalg.norm(tape.normalized) == pytest.approx(1.0)

    def test_zero_weights_give_uniform_loss(self, features):
        variant = VariantSpec.from_name("monet-2")
        params = HeadParams.initialize(variant, 4, 4, Rng(4))

        logits, _ = head_forward(features, variant, params)

        assert loss_softmax_ce(logits, 2)[0] == pytest.approx(math.log(4.0))

    def test_consumed_tape(self, features):
        variant = VariantSpec.from_name("monet")
        params = HeadParams.initialize(variant, 4, 3, Rng(5))
        logits, tape = head_forward(features, variant, params)
        head_backward(np.ones(3), tape, params)

        with pytest.raises(StaleTapeError):
            head_backward(np.ones(3), tape, params)

    def test_stale_parameters(self, features):
        variant = VariantSpec.from_name("monet")
        params = HeadParams.initialize(variant, 4, 3, Rng(6))
        _, tape = head_forward(features, variant, params)
        updated = params.with_tensors({"classifier.bias": np.ones(3)})

        with pytest.raises(StaleTapeError):
            head_backward(np.ones(3), tape, updated)

    def test_channel_mismatch(self):
        variant = VariantSpec.from_name("monet")
        params = HeadParams.initialize(variant, 4, 3, Rng(7))

        with pytest.raises(ShapeError):
            head_forward(np.ones((12, 5)), variant, params)

    def test_adapter_gradient(self, features):
        variant = VariantSpec.from_name("monet")
        params = HeadParams.initialize(variant, 4, 3, Rng(8), adapter=True, init_scale=1.0)
        logits, tape = head_forward(features, variant, params)
        _, grad_logits = loss_softmax_ce(logits, 0)
        grads = head_backward(grad_logits, tape, params)

        def loss_of_adapter(a):
            changed = params.with_tensors({ADAPTER_PARAM: a})
            return loss_softmax_ce(head_forward(features, variant, changed)[0], 0)[0]

        report = gradcheck(loss_of_adapter, grads[ADAPTER_PARAM], params.adapter, tol=1e-4)

        assert report.passed, report


class TestMoNetHead:
    """Test cases for the stateful head"""

    @pytest.fixture
    def batch(self):
        rng = Rng(9)
        return [(np.abs(rng.child(f"x{i}").normal((12, 4))) + 0.1, i % 3) for i in range(6)]

    def make_head(self, adapter=False):
        variant = VariantSpec.from_name("monet", "sketch", 64)
        params = HeadParams.initialize(variant, 4, 3, Rng(10), adapter=adapter, init_scale=0.1)
        return MoNetHead(variant, params, optim=OptimConfig(lr=0.1))

    def test_warm_start_trains_classifier_only(self):
        head = self.make_head(adapter=True)

        assert head.trainable_names(warm=True) == ["classifier.weights", "classifier.bias"]
        assert ADAPTER_PARAM in head.trainable_names(warm=False)

    def test_step_reduces_batch_loss(self, batch):
        head = self.make_head()
        names = head.trainable_names(warm=False)
        before, grads = head.batch_loss_and_grads(batch, names)

        head.step(grads)
        after, _ = head.batch_loss_and_grads(batch, names)

        assert after < before
        assert head.params.version == 1

    @pytest.mark.asyncio
    async def test_async_batch_matches_sequential(self, batch):
        head = self.make_head(adapter=True)
        names = head.trainable_names(warm=False)

        loss, grads = head.batch_loss_and_grads(batch, names)
        loss_async, grads_async = await head.batch_loss_and_grads_async(batch, names, workers=3)

        assert loss == loss_async
        for name in grads:
            assert np.array_equal(grads[name], grads_async[name])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            self.make_head().batch_loss_and_grads([], ["classifier.weights"])

    def test_predict_matches_argmax(self, batch):
        head = self.make_head()
        x, _ = batch[0]

        assert head.predict(x) == int(np.argmax(head.logits(x)))


class TestVariantGrid:
    """Every variant and pooling on desk-sized 64x16 feature maps"""

    @pytest.fixture(scope="class")
    def fixed_batch(self):
        task = TaskSpec(kind="mean_and_covariance", train_per_class=1, test_per_class=0, seed=11)
        train, _ = generate(task)
        return [(s.features, s.label) for s in train]

    @pytest.mark.parametrize("name,pooling", VARIANTS)
    def test_forward_backward(self, name, pooling):
        x = Rng(12).normal((64, 16))
        variant = VariantSpec.from_name(name, pooling, sketch_dim=1024)
        params = HeadParams.initialize(variant, 16, 4, Rng(13), adapter=True, init_scale=0.1)

        logits, tape = head_forward(x, variant, params)
        _, grad_logits = loss_softmax_ce(logits, 1)
        grads = head_backward(grad_logits, tape, params, need_input=True)

        assert logits.shape == (4,)
        assert tape.normalized.size == descriptor_dim(variant, 16)
        assert grads["classifier.weights"].shape == params.weights.shape
        assert grads["classifier.bias"].shape == (4,)
        assert grads[ADAPTER_PARAM].shape == (16, 16)
        assert grads["input"].shape == (64, 16)
        assert np.all(np.isfinite(logits))
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    @pytest.mark.parametrize("name,pooling", VARIANTS)
    def test_fifty_steps_cut_loss(self, name, pooling, fixed_batch):
        variant = VariantSpec.from_name(name, pooling, sketch_dim=1024)
        params = HeadParams.initialize(variant, 16, 4, Rng(14))
        head = MoNetHead(variant, params, optim=OptimConfig(lr=1.0, weight_decay=0.0))
        names = head.trainable_names(warm=False)

        initial, grads = head.batch_loss_and_grads(fixed_batch, names)
        for _ in range(50):
            head.step(grads)
            loss, grads = head.batch_loss_and_grads(fixed_batch, names)

        assert initial == pytest.approx(math.log(4.0))
        assert loss <= 0.8 * initial
