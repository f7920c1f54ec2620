"""Binary container for models and datasets, plus small CSV helpers.

Container layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"CROW"
    4       4     u32    format version (currently 1)
    8       4     u32    kind (1 = model, 2 = dataset)
    12      4     u32    metadata length L
    16      L     utf-8  JSON metadata (sorted keys)
    16+L    8     u64    payload length P in bytes
    24+L    P     f64    raw little-endian payload

Model metadata holds the flow config and an ordered ``[name, shape]`` list
of parameter arrays; dataset metadata holds the dataset meta plus the shapes
of ``frames`` and ``covariates``. The payload is the concatenation of those
arrays in the listed order, so ``load(save(x))`` is bit-exact.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from crow.errors import FormatError, IncompatibleFormatError, TruncatedFileError
from crow.flow import FlowConfig, FlowModel, init_model
from crow.harness.synth import Dataset
from crow.nets import named_parameters
from crow.numerics import Rng

MAGIC = b"CROW"
VERSION = 1
KIND_MODEL = 1
KIND_DATASET = 2
_KIND_NAMES = {KIND_MODEL: "model", KIND_DATASET: "dataset"}


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode(kind: int, meta: dict, arrays: list[np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return b"".join([
        MAGIC,
        struct.pack("<III", VERSION, kind, len(meta_bytes)),
        meta_bytes,
        struct.pack("<Q", len(payload)),
        payload,
    ])


def _decode(data: bytes, expect_kind: int | None = None):
    if len(data) < 16:
        raise TruncatedFileError(16, len(data), "header")
    if data[:4] != MAGIC:
        raise IncompatibleFormatError(f"bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    version, kind, meta_len = struct.unpack("<III", data[4:16])
    if version != VERSION:
        raise IncompatibleFormatError(
            f"container format version {version} is not supported (this reader handles {VERSION})")
    if kind not in _KIND_NAMES:
        raise FormatError(f"unknown container kind {kind}")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {_KIND_NAMES[expect_kind]} file, found a {_KIND_NAMES[kind]}")
    end = 16 + meta_len
    if len(data) < end + 8:
        raise TruncatedFileError(end + 8, len(data), "metadata")
    try:
        meta = json.loads(data[16:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from exc
    (payload_len,) = struct.unpack("<Q", data[end:end + 8])
    available = len(data) - end - 8
    if available < payload_len:
        raise TruncatedFileError(payload_len, available, "payload")
    if payload_len % 8:
        raise FormatError(f"payload length {payload_len} is not a multiple of 8")
    payload = np.frombuffer(data, dtype="<f8", count=payload_len // 8, offset=end + 8)
    return kind, meta, payload


def _split_payload(payload: np.ndarray, shapes) -> list[np.ndarray]:
    out = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + n > payload.size:
            raise TruncatedFileError((offset + n) * 8, payload.size * 8, "payload arrays")
        out.append(payload[offset:offset + n].astype(np.float64).reshape(shape))
        offset += n
    if offset != payload.size:
        raise FormatError(f"payload has {payload.size - offset} unexpected trailing values")
    return out


# ---------------------------------------------------------------- model


def model_to_bytes(model: FlowModel) -> bytes:
    params = list(named_parameters(model.blocks))
    meta = {
        "format": "crow-model",
        "config": model.config.to_dict(),
        "params": [[name, list(a.shape)] for name, a in params],
    }
    return _encode(KIND_MODEL, meta, [a for _, a in params])


def model_from_bytes(data: bytes) -> FlowModel:
    _, meta, payload = _decode(data, KIND_MODEL)
    config = FlowConfig.from_dict(meta["config"])
    model = init_model(config, Rng(0))
    slots = list(named_parameters(model.blocks))
    listed = meta["params"]
    if [n for n, _ in slots] != [n for n, _ in listed] or \
            [list(a.shape) for _, a in slots] != [list(s) for _, s in listed]:
        raise FormatError("parameter layout in file does not match its config")
    arrays = _split_payload(payload, [s for _, s in listed])
    for (_, slot), arr in zip(slots, arrays):
        slot[...] = arr
    return model


def save_model(model: FlowModel, path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> FlowModel:
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- dataset


def dataset_to_bytes(ds: Dataset) -> bytes:
    meta = dict(ds.meta)
    meta["arrays"] = [["frames", list(ds.frames.shape)], ["covariates", list(ds.covariates.shape)]]
    return _encode(KIND_DATASET, meta, [ds.frames, ds.covariates])


def dataset_from_bytes(data: bytes) -> Dataset:
    _, meta, payload = _decode(data, KIND_DATASET)
    shapes = [s for _, s in meta.pop("arrays")]
    frames, covs = _split_payload(payload, shapes)
    return Dataset(frames, covs, meta)


def save_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def save(obj, path) -> None:
    if isinstance(obj, FlowModel):
        save_model(obj, path)
    elif isinstance(obj, Dataset):
        save_dataset(obj, path)
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def load(path):
    data = Path(path).read_bytes()
    kind, _, _ = _decode(data)
    return model_from_bytes(data) if kind == KIND_MODEL else dataset_from_bytes(data)


# ---------------------------------------------------------------- CSV


def read_conditions_csv(path) -> np.ndarray:
    """Covariate path from a ``t,y_1,...,y_k`` CSV; rows are ordered by ``t``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "t":
        raise FormatError(f"{path}: conditions CSV must start with a 't,y_1,...' header")
    body = [r for r in rows[1:] if r]
    if not body:
        raise FormatError(f"{path}: no condition rows")
    width = len(rows[0]) - 1
    parsed = []
    for r in body:
        if len(r) != width + 1:
            raise FormatError(f"{path}: row {r} has {len(r)} fields, expected {width + 1}")
        parsed.append((float(r[0]), [float(v) for v in r[1:]]))
    parsed.sort(key=lambda item: item[0])
    return np.array([vals for _, vals in parsed], dtype=np.float64).reshape(len(parsed), width)


def write_conditions_csv(path, covariates) -> None:
    cov = np.asarray(covariates, dtype=np.float64)
    header = ["t"] + [f"y_{j + 1}" for j in range(cov.shape[1])]
    lines = [",".join(header)]
    lines += [",".join([str(t + 1)] + [repr(float(v)) for v in row]) for t, row in enumerate(cov)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_rows_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
