"""On-disk model and dataset containers.

A ``.ronm`` file is a one-line ASCII header, a JSON manifest, and a raw
little-endian float64 tensor blob; every tensor carries a SHA-256 checksum.
A ``.rond`` dataset file is the same envelope around a row-major sample blob
plus an optional int64 label blob.  Writing is fully deterministic: identical
inputs produce byte-identical files.  The exact layout is documented in
``docs/format.md``.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import FormatError, ShapeError
from .network import (
    Activation,
    ActivationKind,
    BatchNorm,
    Conv2d,
    Dense,
    MaxPool,
    Residual,
    StudentNetwork,
    StudentStage,
    TeacherNetwork,
)

MODEL_MAGIC = "RONM"
DATA_MAGIC = "ROND"
FORMAT_VERSION = 1

__all__ = [
    "save_model",
    "save_student",
    "load_model",
    "save_dataset",
    "load_dataset",
]


class _TensorWriter:
    """Accumulates float64 tensors into one blob with manifest records."""

    def __init__(self):
        self.records = []
        self.chunks = []
        self.offset = 0

    def add(self, array) -> str:
        arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        raw = arr.tobytes(order="C")
        name = f"t{len(self.records)}"
        self.records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": self.offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        self.chunks.append(raw)
        self.offset += len(raw)
        return name


class _TensorReader:
    def __init__(self, records, blob: bytes, path: str):
        self.path = path
        self.blob = blob
        self.records = {}
        for rec in records:
            self.records[rec["name"]] = rec

    def get(self, name: str) -> np.ndarray:
        if name not in self.records:
            raise FormatError(f"{self.path}: manifest references missing tensor '{name}'")
        rec = self.records[name]
        off, nbytes = int(rec["offset"]), int(rec["nbytes"])
        if off < 0 or off + nbytes > len(self.blob):
            raise FormatError(f"{self.path}: tensor '{name}' offsets exceed blob size")
        raw = self.blob[off : off + nbytes]
        if hashlib.sha256(raw).hexdigest() != rec["sha256"]:
            raise FormatError(f"{self.path}: checksum mismatch for tensor '{name}'")
        shape = tuple(int(v) for v in rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count * 8 != nbytes:
            raise FormatError(f"{self.path}: tensor '{name}' shape disagrees with size")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _encode_shape(shape):
    if isinstance(shape, (int, np.integer)):
        return int(shape)
    return [int(v) for v in shape]


def _decode_shape(value):
    if isinstance(value, int):
        return value
    return tuple(int(v) for v in value)


def _encode_activation(kind: ActivationKind):
    return {"name": kind.name, "param": float(kind.param)}


def _decode_activation(rec, path: str) -> ActivationKind:
    try:
        return ActivationKind(str(rec["name"]), float(rec.get("param", 0.0)))
    except (KeyError, ShapeError) as exc:
        raise FormatError(f"{path}: bad activation record {rec!r}: {exc}") from exc


def _encode_layer(layer, writer: _TensorWriter):
    if isinstance(layer, Dense):
        return {
            "type": "dense",
            "weight": writer.add(layer.weight),
            "bias": writer.add(layer.bias),
        }
    if isinstance(layer, Conv2d):
        return {
            "type": "conv2d",
            "kernel": writer.add(layer.kernel),
            "bias": writer.add(layer.bias),
            "stride": int(layer.stride),
            "padding": int(layer.padding),
        }
    if isinstance(layer, BatchNorm):
        return {
            "type": "batchnorm",
            "gamma": writer.add(layer.gamma),
            "beta": writer.add(layer.beta),
            "mean": writer.add(layer.mean),
            "var": writer.add(layer.var),
            "eps": float(layer.eps),
        }
    if isinstance(layer, MaxPool):
        return {"type": "maxpool"}
    if isinstance(layer, Activation):
        return {"type": "activation", **_encode_activation(layer.kind)}
    if isinstance(layer, Residual):
        return {
            "type": "residual",
            "branches": [
                [_encode_layer(sub, writer) for sub in branch]
                for branch in layer.branches
            ],
        }
    raise FormatError(f"cannot serialize layer type {type(layer).__name__}")


def _decode_layer(rec, reader: _TensorReader, where: str):
    kind = rec.get("type")
    path = reader.path
    try:
        if kind == "dense":
            return Dense(reader.get(rec["weight"]), reader.get(rec["bias"]))
        if kind == "conv2d":
            return Conv2d(
                reader.get(rec["kernel"]),
                reader.get(rec["bias"]),
                stride=int(rec["stride"]),
                padding=int(rec["padding"]),
            )
        if kind == "batchnorm":
            return BatchNorm(
                reader.get(rec["gamma"]),
                reader.get(rec["beta"]),
                reader.get(rec["mean"]),
                reader.get(rec["var"]),
                eps=float(rec["eps"]),
            )
        if kind == "maxpool":
            return MaxPool()
        if kind == "activation":
            return Activation(_decode_activation(rec, path))
        if kind == "residual":
            return Residual(
                branches=tuple(
                    tuple(
                        _decode_layer(sub, reader, f"{where}, branch {bi}")
                        for sub in branch
                    )
                    for bi, branch in enumerate(rec["branches"])
                )
            )
    except KeyError as exc:
        raise FormatError(f"{path}: {where}: missing field {exc}") from exc
    except ShapeError as exc:
        raise ShapeError(f"{path}: {where}: {exc}") from exc
    raise FormatError(f"{path}: {where}: unsupported layer tag {kind!r}")


def _write_container(path, magic: str, manifest: dict, blob: bytes) -> None:
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(f"{magic} {FORMAT_VERSION} {len(payload)}\n".encode())
        fh.write(payload)
        fh.write(blob)


def _read_container(path, magic: str):
    with open(path, "rb") as fh:
        header = fh.readline(256)
        parts = header.decode(errors="replace").split()
        if len(parts) != 3 or parts[0] != magic:
            raise FormatError(f"{path}: not a {magic} file (bad header)")
        if parts[1] != str(FORMAT_VERSION):
            raise FormatError(f"{path}: unsupported {magic} version {parts[1]}")
        try:
            size = int(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}: bad manifest size in header") from exc
        payload = fh.read(size)
        if len(payload) != size:
            raise FormatError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(payload.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
        blob = fh.read()
    return manifest, blob


def save_model(path, net: TeacherNetwork) -> None:
    """Write a teacher network to a ``.ronm`` container."""
    writer = _TensorWriter()
    layers = [_encode_layer(layer, writer) for layer in net.layers]
    manifest = {
        "kind": "teacher",
        "dtype": "float64",
        "input_shape": _encode_shape(net.input_shape),
        "layers": layers,
        "tensors": writer.records,
    }
    _write_container(path, MODEL_MAGIC, manifest, b"".join(writer.chunks))


def save_student(path, student: StudentNetwork) -> None:
    """Write a compressed student network to a ``.ronm`` container."""
    writer = _TensorWriter()
    prefix = [_encode_layer(layer, writer) for layer in student.prefix]
    stages = [
        {
            "weight": writer.add(stage.weight),
            "bias": writer.add(stage.bias),
            "activation": _encode_activation(stage.activation),
            "pool_group": int(stage.pool_group),
        }
        for stage in student.stages
    ]
    manifest = {
        "kind": "student",
        "dtype": "float64",
        "input_shape": _encode_shape(student.input_shape),
        "prefix": prefix,
        "stages": stages,
        "lift": writer.add(student.lift),
        "tensors": writer.records,
    }
    _write_container(path, MODEL_MAGIC, manifest, b"".join(writer.chunks))


def load_model(path):
    """Load a ``.ronm`` file; returns a TeacherNetwork or StudentNetwork."""
    manifest, blob = _read_container(path, MODEL_MAGIC)
    spath = str(path)
    kind = manifest.get("kind")
    reader = _TensorReader(manifest.get("tensors", []), blob, spath)
    if kind == "teacher":
        layers = [
            _decode_layer(rec, reader, f"layer {i}")
            for i, rec in enumerate(manifest.get("layers", []))
        ]
        try:
            return TeacherNetwork(_decode_shape(manifest["input_shape"]), layers)
        except KeyError as exc:
            raise FormatError(f"{spath}: manifest missing field {exc}") from exc
        except ShapeError as exc:
            raise ShapeError(f"{spath}: {exc}") from exc
    if kind == "student":
        try:
            prefix = [
                _decode_layer(rec, reader, f"prefix layer {i}")
                for i, rec in enumerate(manifest.get("prefix", []))
            ]
            stages = [
                StudentStage(
                    reader.get(rec["weight"]),
                    reader.get(rec["bias"]),
                    _decode_activation(rec["activation"], spath),
                    int(rec.get("pool_group", 1)),
                )
                for rec in manifest.get("stages", [])
            ]
            return StudentNetwork(
                _decode_shape(manifest["input_shape"]),
                prefix,
                stages,
                reader.get(manifest["lift"]),
            )
        except KeyError as exc:
            raise FormatError(f"{spath}: manifest missing field {exc}") from exc
        except ShapeError as exc:
            raise ShapeError(f"{spath}: {exc}") from exc
    raise FormatError(f"{spath}: unknown model kind {kind!r}")


def save_dataset(path, data, labels=None) -> None:
    """Write an N x D sample matrix (and optional int labels) to ``.rond``."""
    data = np.ascontiguousarray(np.asarray(data, dtype="<f8"))
    if data.ndim != 2:
        raise ShapeError(f"dataset must be 2-D, got ndim={data.ndim}")
    raw = data.tobytes(order="C")
    manifest = {
        "samples": int(data.shape[0]),
        "features": int(data.shape[1]),
        "dtype": "float64",
        "labels": labels is not None,
        "sha256_data": hashlib.sha256(raw).hexdigest(),
    }
    blob = raw
    if labels is not None:
        lab = np.ascontiguousarray(np.asarray(labels, dtype="<i8")).ravel()
        if lab.size != data.shape[0]:
            raise ShapeError(
                f"label count {lab.size} != sample count {data.shape[0]}"
            )
        lraw = lab.tobytes(order="C")
        manifest["sha256_labels"] = hashlib.sha256(lraw).hexdigest()
        blob = raw + lraw
    _write_container(path, DATA_MAGIC, manifest, blob)


def load_dataset(path):
    """Read a ``.rond`` file; returns (data, labels-or-None)."""
    manifest, blob = _read_container(path, DATA_MAGIC)
    spath = str(path)
    try:
        n, d = int(manifest["samples"]), int(manifest["features"])
        has_labels = bool(manifest["labels"])
        checksum = manifest["sha256_data"]
    except KeyError as exc:
        raise FormatError(f"{spath}: manifest missing field {exc}") from exc
    nbytes = n * d * 8
    if len(blob) < nbytes:
        raise FormatError(f"{spath}: truncated data blob")
    raw = blob[:nbytes]
    if hashlib.sha256(raw).hexdigest() != checksum:
        raise FormatError(f"{spath}: data checksum mismatch")
    data = np.frombuffer(raw, dtype="<f8").reshape(n, d).astype(np.float64)
    labels = None
    if has_labels:
        lraw = blob[nbytes : nbytes + n * 8]
        if len(lraw) != n * 8:
            raise FormatError(f"{spath}: truncated label blob")
        if hashlib.sha256(lraw).hexdigest() != manifest.get("sha256_labels"):
            raise FormatError(f"{spath}: label checksum mismatch")
        labels = np.frombuffer(lraw, dtype="<i8").astype(np.int64)
    return data, labels
