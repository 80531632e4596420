"""Bit-exact tensor files, dataset manifests, and report serialization.

The tensor format is deliberately tiny (documented byte-for-byte in
``docs/kntf-format.md``): magic "KNTF", u16 version, u16 dtype code (0 =
IEEE-754 float32 little-endian), u32 ndim, ndim x u64 dims, then the
row-major payload.  A reader fits in a few dozen lines in any language and
round trips are bitwise.

Secrets policy: master keys never appear in manifests, reports, or logs;
only 8-hex-char fingerprints do.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .synthdata import Dataset

__all__ = [
    "TensorFormatError",
    "write_tensor",
    "read_tensor",
    "write_manifest",
    "read_manifest",
    "save_dataset",
    "load_dataset",
    "write_json",
    "append_csv",
    "write_report",
    "METRICS_CSV_COLUMNS",
    "ATTACK_CSV_COLUMNS",
]

MAGIC = b"KNTF"
VERSION = 1
DTYPE_F32_LE = 0
_HEADER = struct.Struct("<4sHHI")


class TensorFormatError(ValueError):
    """Malformed tensor file; the message names the failing byte offset."""


def write_tensor(path, values: np.ndarray) -> None:
    """Write an array as a KNTF file (converted to little-endian float32)."""
    values = np.ascontiguousarray(values, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32_LE, values.ndim))
        for dim in values.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(values.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a KNTF file back into a float32 array (bitwise round trip)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(
            f"truncated header: {len(raw)} bytes < {_HEADER.size} (offset 0)"
        )
    magic, version, dtype, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at offset 4")
    if dtype != DTYPE_F32_LE:
        raise TensorFormatError(f"unsupported dtype code {dtype} at offset 6")
    dims_end = _HEADER.size + 8 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError(
            f"truncated dims: need {dims_end} bytes, have {len(raw)} "
            f"(offset {_HEADER.size})"
        )
    dims = struct.unpack_from(f"<{ndim}Q", raw, _HEADER.size) if ndim else ()
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = dims_end + 4 * count
    if len(raw) != expected:
        raise TensorFormatError(
            f"payload size mismatch: expected {expected} bytes, have {len(raw)} "
            f"(offset {dims_end})"
        )
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end)
    return values.reshape(dims).copy()


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_json(path, obj) -> None:
    """JSON with stable key order (declaration/insertion order, not sorted)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
        fh.write("\n")


AXES = ["N", "H", "W", "C"]


def write_manifest(path, tensor_name: str, dataset: Dataset) -> None:
    records = []
    for i in range(len(dataset)):
        records.append({
            "sample_id": dataset.sample_ids[i],
            "patient_id": int(dataset.patient_ids[i]),
            "labels": dataset.labels[i].tolist(),
            "split": dataset.split[i] if dataset.split is not None else "",
        })
    write_json(path, {"tensor": tensor_name, "axes": AXES, "samples": records})


def read_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    for field in ("tensor", "axes", "samples"):
        if field not in manifest:
            raise ValueError(f"manifest missing field {field!r}")
    if manifest["axes"] != AXES:
        raise ValueError(f"unsupported axis convention {manifest['axes']}")
    ids = [rec["sample_id"] for rec in manifest["samples"]]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest sample ids are not unique")
    return manifest


def save_dataset(directory, dataset: Dataset, name: str = "features") -> Path:
    """Write ``<dir>/<name>.kntf`` plus ``<dir>/manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / f"{name}.kntf", dataset.features)
    write_manifest(directory / "manifest.json", f"{name}.kntf", dataset)
    return directory


def load_dataset(directory) -> Dataset:
    """Read a dataset directory, cross-validating manifest against tensor."""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.json")
    features = read_tensor(directory / manifest["tensor"])
    if features.ndim != 4:
        raise ValueError(f"expected a 4-d [N,H,W,C] tensor, got {features.ndim}-d")
    records = manifest["samples"]
    if len(records) != features.shape[0]:
        raise ValueError(
            f"manifest has {len(records)} samples but tensor has {features.shape[0]}"
        )
    splits = [rec.get("split", "") for rec in records]
    return Dataset(
        features=features,
        patient_ids=np.asarray([rec["patient_id"] for rec in records], dtype=np.int64),
        labels=np.asarray([rec["labels"] for rec in records], dtype=np.int8),
        sample_ids=[rec["sample_id"] for rec in records],
        split=splits if any(splits) else None,
    )


METRICS_CSV_COLUMNS = [
    "experiment_id", "method", "d", "L", "key_seed", "key_fingerprint",
    "verif_auc", "top1", "cls_auc",
]

ATTACK_CSV_COLUMNS = [
    "experiment_id", "attack", "d", "L", "key_seed", "key_fingerprint",
    "mean_cosine", "std_cosine", "top1", "wall_time_per_sample_s",
]


def append_csv(path, row: dict, columns: list[str]) -> None:
    """Append one row, creating the file (with header) on first use."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if fresh:
            writer.writeheader()
        writer.writerow({col: _csv_value(row.get(col)) for col in columns})


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def write_report(json_path, report, csv_path=None, experiment_id: str = "") -> None:
    """Serialize a metrics or attack report: one JSON file, one CSV row.

    The JSON carries the full dataclass in declaration order; the CSV gets
    the fixed-schema row for cross-run aggregation.  Keys are only ever
    present as fingerprints.
    """
    from .attacks import AttackReport
    from .metrics import MetricsReport

    payload = dataclasses.asdict(report)
    payload["experiment_id"] = payload.get("experiment_id") or experiment_id
    write_json(json_path, payload)
    if csv_path is None:
        return
    if isinstance(report, MetricsReport):
        append_csv(csv_path, {
            "experiment_id": report.experiment_id or experiment_id,
            "method": report.method,
            "d": report.d,
            "L": report.num_layers,
            "key_seed": report.key_seed,
            "key_fingerprint": report.key_fingerprint,
            "verif_auc": report.verification_auc,
            "top1": report.top1,
            "cls_auc": report.classification_auc,
        }, METRICS_CSV_COLUMNS)
    elif isinstance(report, AttackReport):
        append_csv(csv_path, {
            "experiment_id": experiment_id,
            "attack": report.attack,
            "d": report.d,
            "L": report.num_layers,
            "key_seed": report.key_seed,
            "key_fingerprint": report.key_fingerprint,
            "mean_cosine": report.mean_cosine,
            "std_cosine": report.std_cosine,
            "top1": report.top1,
            "wall_time_per_sample_s": report.wall_time_per_sample,
        }, ATTACK_CSV_COLUMNS)
    else:
        raise TypeError(f"unknown report type: {type(report)}")
