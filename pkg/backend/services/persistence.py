"""
Persistence
MFF1 feature files, dataset manifests and model files. Every write goes to a
temporary file first and is renamed into place.
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from models.schemas import ModelHeader, TaskSpec, TensorEntry
from services.errors import FeatureFileError, ShapeError
from services.model_head import HeadParams
from services.numkernel import Matrix, as_matrix
from services.pooling_layers import SketchParams
from services.synth_data import Sample

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FEATURE_MAGIC = b"MFF1"
FEATURE_HEADER = struct.Struct("<4sII")
MODEL_MAGIC = b"MNM1"
MODEL_PREFIX = struct.Struct("<4sI")
MANIFEST_VERSION = 1


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write data next to path and rename it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_features(x) -> bytes:
    x = as_matrix(x, "feature map")
    n, c = x.shape
    return FEATURE_HEADER.pack(FEATURE_MAGIC, n, c) + np.ascontiguousarray(x, dtype="<f8").tobytes()


def decode_features(data: bytes) -> Matrix:
    if len(data) < FEATURE_HEADER.size:
        raise FeatureFileError("truncated feature header", offset=len(data),
                               expected=FEATURE_HEADER.size, actual=len(data))
    magic, n, c = FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
    expected = FEATURE_HEADER.size + 8 * n * c
    if len(data) != expected:
        raise FeatureFileError(
            f"payload length does not match header dims n={n}, C={c}",
            offset=min(len(data), expected), expected=expected, actual=len(data),
        )
    values = np.frombuffer(data, dtype="<f8", offset=FEATURE_HEADER.size, count=n * c)
    return values.astype(np.float64).reshape(n, c)


def save_features(path: PathLike, x) -> None:
    atomic_write(path, encode_features(x))


def load_features(path: PathLike) -> Matrix:
    return decode_features(Path(path).read_bytes())


def save_dataset(directory: PathLike, samples: List[Sample], split: str,
                 task: Optional[TaskSpec] = None) -> Path:
    """One MFF1 file per sample plus a JSON manifest of paths and labels"""
    directory = Path(directory)
    entries = []
    for i, sample in enumerate(samples):
        relative = Path("features") / f"{split}_{i:06d}.mff"
        save_features(directory / relative, sample.features)
        entries.append({"path": relative.as_posix(), "label": int(sample.label)})
    manifest = {
        "version": MANIFEST_VERSION,
        "split": split,
        "task": task.model_dump() if task is not None else None,
        "samples": entries,
    }
    manifest_path = directory / f"{split}.json"
    atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    logger.info(f"Wrote {len(samples)} {split} samples to {manifest_path}")
    return manifest_path


def load_dataset(manifest_path: PathLike) -> Tuple[List[Sample], Optional[TaskSpec]]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Failed to read dataset manifest {manifest_path}: {e}")
        raise
    if not isinstance(manifest, dict):
        raise FeatureFileError(f"dataset manifest {manifest_path} is not a JSON object", offset=0)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FeatureFileError(f"unsupported manifest version {manifest.get('version')}", offset=0)
    try:
        entries = [(entry["path"], int(entry["label"])) for entry in manifest["samples"]]
        task = TaskSpec(**manifest["task"]) if manifest.get("task") else None
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Malformed dataset manifest {manifest_path}: {e!r}")
        raise FeatureFileError(f"malformed dataset manifest {manifest_path}: {e!r}", offset=0) from e
    samples = [Sample(features=load_features(manifest_path.parent / path), label=label)
               for path, label in entries]
    return samples, task


def _param_tensors(params: HeadParams) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = dict(params.tensors())
    if params.sketch is not None:
        tensors["sketch.h1"] = params.sketch.h1
        tensors["sketch.h2"] = params.sketch.h2
        tensors["sketch.s1"] = params.sketch.s1
        tensors["sketch.s2"] = params.sketch.s2
    return tensors


def encode_model(header: ModelHeader, params: HeadParams) -> bytes:
    """
    Layout: magic, u32 header length, JSON header (with a per-tensor
    name/shape/offset table), then the little-endian tensor blob
    """
    blob = bytearray()
    entries = []
    for name, tensor in _param_tensors(params).items():
        dtype = "<i8" if np.issubdtype(tensor.dtype, np.integer) else "<f8"
        raw = np.ascontiguousarray(tensor, dtype=dtype).tobytes()
        entries.append(TensorEntry(name=name, dtype=dtype, shape=list(tensor.shape),
                                   offset=len(blob), nbytes=len(raw)))
        blob.extend(raw)
    if params.sketch is not None:
        entries.append(TensorEntry(name="sketch.meta", dtype="<i8", shape=[3],
                                   offset=len(blob), nbytes=24))
        blob.extend(np.array([params.sketch.d_in, params.sketch.d_out, params.sketch.seed],
                             dtype="<i8").tobytes())
    header = header.model_copy(update={"tensors": entries})
    text = header.model_dump_json().encode("utf-8")
    return MODEL_PREFIX.pack(MODEL_MAGIC, len(text)) + text + bytes(blob)


def decode_model(data: bytes) -> Tuple[ModelHeader, HeadParams]:
    if len(data) < MODEL_PREFIX.size:
        raise FeatureFileError("truncated model prefix", offset=len(data),
                               expected=MODEL_PREFIX.size, actual=len(data))
    magic, header_len = MODEL_PREFIX.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", offset=0)
    start = MODEL_PREFIX.size
    if len(data) < start + header_len:
        raise FeatureFileError("truncated model header", offset=len(data),
                               expected=start + header_len, actual=len(data))
    try:
        header = ModelHeader.model_validate_json(data[start:start + header_len])
    except ValidationError as e:
        raise FeatureFileError(f"invalid model header: {e.errors()[0]['msg']}", offset=start) from e
    if header.format_version != 1:
        raise FeatureFileError(f"unsupported model format version {header.format_version}", offset=start)

    blob_start = start + header_len
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.tensors:
        begin = blob_start + entry.offset
        end = begin + entry.nbytes
        if end > len(data):
            raise FeatureFileError(f"tensor {entry.name} truncated", offset=len(data),
                                   expected=end, actual=len(data))
        if entry.dtype not in ("<i8", "<f8"):
            raise FeatureFileError(f"tensor {entry.name} has unsupported dtype {entry.dtype}", offset=begin)
        if entry.nbytes % 8:
            raise FeatureFileError(
                f"tensor {entry.name} holds {entry.nbytes} bytes, not a whole number of 8-byte values",
                offset=begin,
            )
        values = np.frombuffer(data[begin:end], dtype=entry.dtype)
        if int(np.prod(entry.shape)) != values.size:
            raise ShapeError(f"tensor {entry.name} shape {entry.shape} does not match {values.size} values")
        native = np.int64 if entry.dtype == "<i8" else np.float64
        tensors[entry.name] = values.astype(native).reshape(entry.shape)

    missing = [name for name in ("classifier.weights", "classifier.bias") if name not in tensors]
    if "sketch.meta" in tensors:
        missing += [name for name in ("sketch.h1", "sketch.h2", "sketch.s1", "sketch.s2") if name not in tensors]
    if missing:
        raise FeatureFileError(f"model file lacks tensors {missing}", offset=blob_start)

    sketch = None
    if "sketch.meta" in tensors:
        d_in, d_out, seed = (int(v) for v in tensors["sketch.meta"])
        sketch = SketchParams(
            d_in=d_in, d_out=d_out, seed=seed,
            h1=tensors["sketch.h1"], h2=tensors["sketch.h2"],
            s1=tensors["sketch.s1"], s2=tensors["sketch.s2"],
        )
    params = HeadParams(
        weights=tensors["classifier.weights"],
        bias=tensors["classifier.bias"],
        adapter=tensors.get("adapter.weights"),
        sketch=sketch,
    )
    return header, params


def save_model(path: PathLike, header: ModelHeader, params: HeadParams) -> None:
    atomic_write(path, encode_model(header, params))
    logger.info(f"Saved model to {path}")


def load_model(path: PathLike) -> Tuple[ModelHeader, HeadParams]:
    return decode_model(Path(path).read_bytes())
