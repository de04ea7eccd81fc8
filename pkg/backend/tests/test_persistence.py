"""
Tests for feature, dataset and model files
"""

import json

import numpy as np
import pytest

from models.schemas import ModelHeader, NormConfig, TaskSpec, VariantSpec
from services.errors import FeatureFileError
from services.model_head import HeadParams, MoNetHead
from services.numkernel import Rng
from services.persistence import (
    MODEL_PREFIX,
    decode_features,
    decode_model,
    encode_features,
    encode_model,
    load_dataset,
    load_features,
    load_model,
    save_dataset,
    save_features,
    save_model,
)
from services.synth_data import generate


class TestFeatureFiles:
    """Test cases for MFF1 feature files"""

    def test_round_trip_is_bitwise(self, tmp_path):
        x = Rng(0).normal((7, 3))

        save_features(tmp_path / "x.mff", x)

        assert np.array_equal(load_features(tmp_path / "x.mff"), x)

    def test_header_layout(self):
        data = encode_features(np.zeros((2, 5)))

        assert data[:4] == b"MFF1"
        assert int.from_bytes(data[4:8], "little") == 2
        assert int.from_bytes(data[8:12], "little") == 5
        assert len(data) == 12 + 8 * 10

    def test_bad_magic(self):
        data = b"XXXX" + encode_features(np.ones((1, 1)))[4:]

        with pytest.raises(FeatureFileError) as info:
            decode_features(data)

        assert info.value.offset == 0

    def test_truncated_payload(self):
        data = encode_features(np.ones((3, 2)))[:-8]

        with pytest.raises(FeatureFileError, match="expected 60 bytes, got 52"):
            decode_features(data)

    def test_truncated_header(self):
        with pytest.raises(FeatureFileError):
            decode_features(b"MFF1\x01")

    def test_no_temporary_files_left(self, tmp_path):
        save_features(tmp_path / "x.mff", np.ones((2, 2)))

        assert [p.name for p in tmp_path.iterdir()] == ["x.mff"]


class TestDatasets:
    """Test cases for dataset manifests"""

    def test_round_trip(self, tmp_path):
        task = TaskSpec(classes=2, locations=6, channels=2, train_per_class=3, test_per_class=1)
        train, _ = generate(task)

        manifest = save_dataset(tmp_path, train, "train", task)
        loaded, echoed = load_dataset(manifest)

        assert echoed == task
        assert [s.label for s in loaded] == [s.label for s in train]
        assert all(np.array_equal(a.features, b.features) for a, b in zip(loaded, train))

    def test_manifest_contents(self, tmp_path):
        task = TaskSpec(classes=2, locations=6, channels=2, train_per_class=1, test_per_class=1)
        _, test = generate(task)

        manifest = json.loads(save_dataset(tmp_path, test, "test", task).read_text())

        assert manifest["split"] == "test"
        assert manifest["samples"][1] == {"path": "features/test_000001.mff", "label": 1}

    def test_unsupported_version(self, tmp_path):
        (tmp_path / "train.json").write_text(json.dumps({"version": 9, "samples": []}))

        with pytest.raises(FeatureFileError):
            load_dataset(tmp_path / "train.json")

    @pytest.mark.parametrize("samples", [
        [{"path": "features/train_000000.mff"}],
        [{"label": 0}],
        [{"path": "features/train_000000.mff", "label": "cat"}],
    ])
    def test_malformed_entries(self, tmp_path, samples):
        (tmp_path / "train.json").write_text(json.dumps({"version": 1, "samples": samples}))

        with pytest.raises(FeatureFileError, match="malformed dataset manifest"):
            load_dataset(tmp_path / "train.json")

    def test_manifest_without_samples(self, tmp_path):
        (tmp_path / "train.json").write_text(json.dumps({"version": 1}))

        with pytest.raises(FeatureFileError):
            load_dataset(tmp_path / "train.json")


class TestModelFiles:
    """Test cases for model files"""

    @pytest.fixture(params=["bilinear", "sketch"])
    def trained(self, request):
        variant = VariantSpec.from_name("monet", request.param, sketch_dim=64)
        params = HeadParams.initialize(variant, 4, 3, Rng(1), adapter=True, init_scale=0.5)
        header = ModelHeader(variant=variant, norm=NormConfig(), epsilon=1e-5, channels=4, classes=3)
        return header, params

    def test_round_trip_reproduces_logits(self, tmp_path, trained):
        header, params = trained
        x = np.abs(Rng(2).normal((10, 4))) + 0.1

        save_model(tmp_path / "model.mnm", header, params)
        loaded_header, loaded = load_model(tmp_path / "model.mnm")

        before = MoNetHead(header.variant, params).logits(x)
        after = MoNetHead(loaded_header.variant, loaded).logits(x)
        assert np.array_equal(before, after)
        assert loaded_header.variant == header.variant

    def test_tensor_table(self, trained):
        header, params = trained

        loaded_header, _ = decode_model(encode_model(header, params))

        names = [t.name for t in loaded_header.tensors]
        assert names[:3] == ["classifier.weights", "classifier.bias", "adapter.weights"]
        if header.variant.pooling == "sketch":
            assert "sketch.h1" in names and "sketch.meta" in names

    def test_bad_magic(self, trained):
        header, params = trained
        data = b"NOPE" + encode_model(header, params)[4:]

        with pytest.raises(FeatureFileError):
            decode_model(data)

    def test_truncated_blob(self, trained):
        header, params = trained
        data = encode_model(header, params)[:-16]

        with pytest.raises(FeatureFileError, match="truncated"):
            decode_model(data)

    def test_partial_value_in_blob(self, trained):
        header, params = trained
        data = encode_model(header, params)
        magic, length = MODEL_PREFIX.unpack_from(data, 0)
        start = MODEL_PREFIX.size
        table = json.loads(data[start:start + length])
        table["tensors"][1]["nbytes"] = 12
        text = json.dumps(table).encode("utf-8")

        with pytest.raises(FeatureFileError, match="8-byte"):
            decode_model(MODEL_PREFIX.pack(magic, len(text)) + text + data[start + length:])

    def test_missing_classifier_tensor(self, trained):
        header, params = trained
        data = encode_model(header, params)
        magic, length = MODEL_PREFIX.unpack_from(data, 0)
        start = MODEL_PREFIX.size
        table = json.loads(data[start:start + length])
        table["tensors"] = [t for t in table["tensors"] if t["name"] != "classifier.bias"]
        text = json.dumps(table).encode("utf-8")

        with pytest.raises(FeatureFileError, match="lacks tensors"):
            decode_model(MODEL_PREFIX.pack(magic, len(text)) + text + data[start + length:])
