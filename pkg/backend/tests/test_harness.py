"""
Tests for the run harness: training, evaluation, check suites and datasets
"""

import csv

import numpy as np
import pytest
import pytest_asyncio

from models.schemas import OptimConfig, RunConfig, TaskSpec, VariantSpec
from services import harness
from services.errors import ShapeError
from services.numkernel import Rng
from services.synth_data import Sample, baseline_meanpool, generate

TINY_TASK = TaskSpec(classes=3, locations=12, channels=3, train_per_class=6, test_per_class=3, seed=5)


def tiny_config(out, **overrides) -> RunConfig:
    values = dict(
        command="train",
        task=TINY_TASK,
        variant=VariantSpec.from_name("monet", "bilinear"),
        optim=OptimConfig(lr=0.1, batch_size=4),
        epochs=2,
        seed=5,
        out=str(out),
    )
    values.update(overrides)
    return RunConfig(**values)


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


class TestRunTrain:
    """Test cases for run_train"""

    @pytest.mark.asyncio
    async def test_writes_model_and_metrics(self, tmp_path):
        result = await harness.run_train(tiny_config(tmp_path))

        rows = read_rows(tmp_path / "metrics.csv")
        assert rows[0] == ["epoch", "split", "loss", "accuracy", "wall_ms"]
        assert [r[:2] for r in rows[1:]] == [["0", "train"], ["0", "test"], ["1", "train"],
                                             ["1", "test"], ["2", "train"], ["2", "test"]]
        assert all(r[4] == "0" for r in rows[1:])
        assert (tmp_path / "model.mnm").exists()
        assert result.header.metadata.steps == 2 * 5

    @pytest.mark.asyncio
    async def test_zero_epochs_gives_untrained_model(self, tmp_path):
        result = await harness.run_train(tiny_config(tmp_path, epochs=0))

        assert result.header.metadata.steps == 0
        assert np.all(result.params.weights == 0.0)
        summary = await harness.run_eval(tiny_config(tmp_path, command="eval", model=str(result.model_path)),
                                         generate(TINY_TASK)[1])
        assert summary.total == 9

    @pytest.mark.asyncio
    async def test_repeated_runs_are_byte_identical(self, tmp_path):
        cfg = tiny_config(tmp_path / "a", warmup_steps=3, augment_flip=True, adapter=True)
        await harness.run_train(cfg)
        await harness.run_train(cfg.model_copy(update={"out": str(tmp_path / "b")}))

        for name in ("metrics.csv", "model.mnm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.asyncio
    async def test_workers_do_not_change_results(self, tmp_path):
        await harness.run_train(tiny_config(tmp_path / "serial", adapter=True))
        await harness.run_train(tiny_config(tmp_path / "threads", adapter=True, workers=3))

        assert ((tmp_path / "serial" / "metrics.csv").read_bytes()
                == (tmp_path / "threads" / "metrics.csv").read_bytes())

    @pytest.mark.asyncio
    async def test_warmup_freezes_adapter(self, tmp_path):
        result = await harness.run_train(tiny_config(tmp_path, epochs=0, warmup_steps=4, adapter=True))

        assert result.header.metadata.steps == 4
        np.testing.assert_array_equal(result.params.adapter, np.eye(3))
        assert np.any(result.params.weights != 0.0)

    @pytest.mark.asyncio
    async def test_trains_from_generated_dataset(self, tmp_path):
        cfg = tiny_config(tmp_path / "data", command="gen-data")
        harness.run_gen_data(cfg)

        result = await harness.run_train(tiny_config(tmp_path / "run", data=str(tmp_path / "data")))

        assert result.header.channels == 3
        assert result.header.classes == 3

    @pytest.mark.asyncio
    async def test_empty_training_set(self, tmp_path):
        with pytest.raises(ValueError):
            await harness.run_train(tiny_config(tmp_path), train=[], test=[])


class TestRunEval:
    """Test cases for run_eval"""

    @pytest_asyncio.fixture
    async def trained(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=3)
        result = await harness.run_train(cfg)
        return cfg.model_copy(update={"command": "eval", "model": str(result.model_path)}), result

    @pytest.mark.asyncio
    async def test_matches_training_accuracy(self, trained):
        cfg, result = trained
        train, _ = generate(TINY_TASK)

        summary = await harness.run_eval(cfg, train)

        final_train = [row for row in result.metrics if row[1] == "train"][-1][3]
        assert summary.accuracy >= final_train - 1e-9
        assert sum(map(sum, summary.confusion)) == summary.total

    @pytest.mark.asyncio
    async def test_row_permutation_leaves_accuracy_unchanged(self, trained):
        cfg, _ = trained
        _, test = generate(TINY_TASK)
        shuffled = [Sample(features=s.features[::-1].copy(), label=s.label) for s in test]

        original = await harness.run_eval(cfg, test)
        permuted = await harness.run_eval(cfg, shuffled)

        assert original.accuracy == permuted.accuracy

    @pytest.mark.asyncio
    async def test_writes_confusion(self, trained):
        cfg, _ = trained

        await harness.run_eval(cfg, generate(TINY_TASK)[1])

        rows = read_rows(f"{cfg.out}/confusion.csv")
        assert rows[0] == ["true", "pred_0", "pred_1", "pred_2"]
        assert len(rows) == 4

    @pytest.mark.asyncio
    async def test_empty_set(self, trained):
        cfg, _ = trained

        with pytest.raises(ValueError):
            await harness.run_eval(cfg, [])

    @pytest.mark.asyncio
    async def test_channel_mismatch(self, trained):
        cfg, _ = trained

        with pytest.raises(ShapeError):
            await harness.run_eval(cfg, [Sample(features=np.ones((12, 4)), label=0)])


@pytest.fixture(scope="module")
def gradcheck_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("gradcheck")
    return harness.run_gradcheck(RunConfig(command="gradcheck", out=str(out))), out


class TestCheckSuites:
    """Test cases for the gradient-check and oracle suites"""

    def test_gradcheck_passes(self, gradcheck_run):
        reports, _ = gradcheck_run

        failed = [r for r in reports if not r.passed]
        assert not failed, failed
        ops = {r.op for r in reports}
        assert {"hm", "ssqrt", "bilinear", "ts", "signed_sqrt", "l2", "loss"} <= ops
        assert sum(op.startswith("head[") for op in ops) == 8

    def test_degenerate_spectrum_is_expected_skip(self, gradcheck_run):
        reports, out = gradcheck_run

        degenerate = next(r for r in reports if r.op == "ssqrt[degenerate]")
        assert degenerate.status == "expected-skip"
        rows = read_rows(out / "gradcheck.csv")
        assert rows[0] == ["op", "max_rel_err", "tol", "pass"]
        assert ["expected-skip"] == [r[3] for r in rows if r[0] == "ssqrt[degenerate]"]

    @pytest.mark.parametrize("pooling", ["bilinear", "sketch"])
    def test_head_check_covers_every_classifier_tensor(self, pooling):
        variant = VariantSpec.from_name("monet", pooling, sketch_dim=32)

        reports = harness.head_gradient_reports(variant, Rng(3))

        assert [r.op.rsplit(".", 1)[1] for r in reports] == ["input", "weights", "bias"]
        assert all(r.passed for r in reports), reports

    def test_unreachable_tolerance_fails(self, tmp_path):
        reports = harness.run_gradcheck(RunConfig(command="gradcheck", out=str(tmp_path), gradcheck_tol=1e-12))

        assert any(not r.passed for r in reports)

    def test_verify_passes(self, tmp_path):
        checks = harness.run_verify(RunConfig(command="verify", out=str(tmp_path)))

        failed = [c for c in checks if not c.passed]
        assert not failed, failed
        assert (tmp_path / "verify.csv").exists()

    def test_sketchbench(self, tmp_path):
        cfg = RunConfig(command="sketchbench", out=str(tmp_path), sketch_trials=50,
                        task=TaskSpec(channels=4, locations=8))

        rows = harness.run_sketchbench(cfg, dims=(8, 256))

        assert [r[1] for r in rows] == [8, 256]
        assert rows[1][5] < rows[0][5]
        assert len(read_rows(tmp_path / "sketchbench.csv")) == 3


@pytest.mark.slow
class TestDeskScale:
    """Desk-scale training experiments on the default 4-class task"""

    @pytest.mark.asyncio
    @pytest.mark.parametrize("seed", [0, 1, 2])
    async def test_second_order_beats_first_order(self, tmp_path, seed):
        task = TaskSpec(seed=seed)
        train, test = generate(task)
        cfg = RunConfig(
            variant=VariantSpec.from_name("monet-2", "bilinear"),
            optim=OptimConfig(lr=0.1), task=task, seed=seed, out=str(tmp_path),
        )

        result = await harness.run_train(cfg, train, test)

        assert baseline_meanpool(train, test, seed=seed) <= 0.40
        assert result.metrics[-1][1] == "test"
        assert result.metrics[-1][3] >= 0.95

    @pytest.mark.asyncio
    async def test_compact_pooling_close_to_bilinear(self, tmp_path):
        task = TaskSpec(seed=0)
        train, test = generate(task)
        accuracies = {}
        for pooling in ("bilinear", "sketch"):
            cfg = RunConfig(
                variant=VariantSpec.from_name("monet", pooling, sketch_dim=1024),
                optim=OptimConfig(lr=0.1), task=task, out=str(tmp_path / pooling),
            )
            result = await harness.run_train(cfg, train, test)
            accuracies[pooling] = result.metrics[-1][3]

        assert accuracies["sketch"] >= accuracies["bilinear"] - 0.03

    @pytest.mark.asyncio
    async def test_normalization_ordering_over_five_seeds(self, tmp_path):
        task = TaskSpec(kind="mean_and_covariance", train_per_class=100, test_per_class=50)
        cfg = RunConfig(optim=OptimConfig(lr=0.1), task=task, epochs=15, out=str(tmp_path))

        grid = await harness.run_variant_grid(cfg, seeds=[0, 1, 2, 3, 4], poolings=("bilinear",))

        assert set(grid.orderings) == {"monet bilinear >= monet-u bilinear",
                                       "monet-2 bilinear >= monet-2u bilinear"}
        assert grid.ordering_holds, grid.medians


class TestVariantGrid:
    """Test cases for the variant grid experiment"""

    def test_compare_normalization(self):
        medians = {"monet bilinear": 0.9, "monet-u bilinear": 0.8,
                   "monet-2 sketch": 0.7, "monet-2u sketch": 0.75, "monet-2 bilinear": 0.6}

        orderings = harness.compare_normalization(medians)

        assert orderings == {"monet bilinear >= monet-u bilinear": True,
                             "monet-2 sketch >= monet-2u sketch": False}

    def test_ties_count_as_holding(self):
        orderings = harness.compare_normalization({"monet sketch": 1.0, "monet-u sketch": 1.0})

        assert orderings == {"monet sketch >= monet-u sketch": True}

    @pytest.mark.asyncio
    async def test_small_grid(self, tmp_path):
        task = TINY_TASK.model_copy(update={"kind": "mean_and_covariance"})
        cfg = tiny_config(tmp_path, task=task)

        grid = await harness.run_variant_grid(cfg, seeds=[5, 6], poolings=("bilinear",))

        assert set(grid.medians) == {"monet bilinear", "monet-2 bilinear",
                                     "monet-u bilinear", "monet-2u bilinear"}
        assert len(grid.orderings) == 2
        assert len(read_rows(tmp_path / "variant_grid.csv")) == 1 + 2 * 4
