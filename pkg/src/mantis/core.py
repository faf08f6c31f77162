"""Shared data containers, dataset normalization and the on-disk container format.

Container layout (all integers little-endian)::

    b"QMT1" | u32 header_len | header (UTF-8 JSON, header_len bytes) | payload

The payload is a flat run of little-endian float32 values in C order. Complex
arrays are stored as interleaved (re, im) pairs. The header declares
``kind``, ``shape``, ``dtype``, ``te_ms``, ``seed`` and free-form ``extra``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

T2_MIN = 1.0
T2_MAX = 2000.0

MAGIC = b"QMT1"
KINDS = ("echoes", "kspace", "maskset", "maps", "netparams", "report")
_DTYPES = {"float32": (np.dtype("<f4"), 4), "complex64": (np.dtype("<c8"), 8)}


class QmtError(Exception):
    """Base class for all errors raised by this package."""


class ContainerError(QmtError):
    code = "container"


class BadMagicError(ContainerError):
    code = "bad magic"


class TruncatedPayloadError(ContainerError):
    code = "truncated payload"


class ShapeMismatchError(ContainerError):
    code = "shape mismatch"


class NumericError(QmtError):
    """A computation produced non-finite values or diverged."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EchoSeries:
    """Multi-echo complex image stack ``data[t, ny, nx]`` with echo times in ms."""

    te_ms: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        te = np.asarray(self.te_ms, dtype=np.float64).ravel()
        data = np.asarray(self.data)
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        if data.ndim != 3:
            raise ValueError(f"echo data must be [t, ny, nx], got shape {data.shape}")
        if te.size < 2:
            raise ValueError("need at least 2 echoes")
        if te.size != data.shape[0]:
            raise ValueError(f"{te.size} echo times for {data.shape[0]} echo images")
        if np.any(te <= 0) or np.any(np.diff(te) <= 0):
            raise ValueError("echo times must be positive and strictly increasing")
        if not np.all(np.isfinite(data)):
            raise ValueError("echo data contains non-finite values")
        object.__setattr__(self, "te_ms", _readonly(te))
        object.__setattr__(self, "data", _readonly(data))

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


@dataclass(frozen=True)
class KSpaceSet:
    """Undersampled k-space ``data[t, ny, nx]``; unsampled ky lines are exactly zero."""

    data: np.ndarray
    mask_ref: Any  # sampling.MaskSet
    te_ms: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        lines = np.asarray(self.mask_ref.lines)
        if data.ndim != 3 or lines.shape != data.shape[:2]:
            raise ValueError(
                f"k-space shape {data.shape} does not match mask lines {lines.shape}"
            )
        if np.any(data[lines == 0] != 0):
            raise ValueError("unsampled k-space lines must be exactly zero")
        te = np.asarray(self.te_ms, dtype=np.float64).ravel()
        if te.size != data.shape[0]:
            raise ValueError("echo time count does not match k-space echoes")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "te_ms", _readonly(te))


@dataclass(frozen=True)
class ParamMaps:
    """Proton density, T2 (ms) and integer ROI labels on one slice."""

    i0: np.ndarray
    t2_ms: np.ndarray
    roi_labels: np.ndarray = field(default=None)

    def __post_init__(self):
        i0 = np.asarray(self.i0, dtype=np.result_type(self.i0, np.float32))
        t2 = np.asarray(self.t2_ms, dtype=np.result_type(self.t2_ms, np.float32))
        if i0.ndim != 2 or t2.shape != i0.shape:
            raise ValueError("i0 and t2 maps must be 2D with equal shapes")
        if np.any(i0 < 0) or not np.all(np.isfinite(i0)):
            raise ValueError("i0 must be finite and non-negative")
        fg = i0 > 0
        if np.any(t2[fg] < T2_MIN) or np.any(t2[fg] > T2_MAX):
            raise ValueError(f"t2 must lie in [{T2_MIN}, {T2_MAX}] ms where i0 > 0")
        labels = self.roi_labels
        labels = (fg.astype(np.int32) if labels is None
                  else np.asarray(labels).astype(np.int32))
        if labels.shape != i0.shape:
            raise ValueError("roi_labels shape does not match maps")
        if np.any(labels[~fg] != 0):
            raise ValueError("roi_labels must be 0 wherever i0 = 0")
        object.__setattr__(self, "i0", _readonly(i0))
        object.__setattr__(self, "t2_ms", _readonly(t2))
        object.__setattr__(self, "roi_labels", _readonly(labels))

    @property
    def region(self) -> np.ndarray:
        return self.roi_labels > 0


def normalize_dataset(series: EchoSeries) -> tuple[EchoSeries, float]:
    """Divide the whole stack by its maximum magnitude.

    Returns the normalized series and the scale needed to undo it.
    """
    scale = float(np.max(np.abs(series.data))) if series.data.size else 0.0
    if not scale > 0:
        raise ValueError("degenerate dataset")
    return EchoSeries(series.te_ms, series.data / scale), scale


# ---------------------------------------------------------------- container I/O


def write_raw(path, kind: str, array: np.ndarray, te_ms=None, seed=None,
              extra: dict | None = None) -> None:
    if kind not in KINDS:
        raise ContainerError(f"unknown kind {kind!r}")
    array = np.asarray(array)
    if np.iscomplexobj(array):
        dtype, payload = "complex64", array.astype("<c8", copy=False)
    else:
        dtype, payload = "float32", array.astype("<f4", copy=False)
    header = {
        "kind": kind,
        "shape": list(array.shape),
        "dtype": dtype,
        "te_ms": None if te_ms is None else [float(v) for v in np.ravel(te_ms)],
        "seed": None if seed is None else int(seed),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))


def read_raw(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic in {path}: {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"truncated header in {path}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedPayloadError(f"truncated header in {path}")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header in {path}: {exc}") from exc
    if header.get("kind") not in KINDS:
        raise ContainerError(f"unknown kind {header.get('kind')!r}")
    if header.get("dtype") not in _DTYPES:
        raise ContainerError(f"unknown dtype {header.get('dtype')!r}")
    np_dtype, size = _DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * size
    payload = raw[8 + hlen:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"truncated payload in {path}: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise ShapeMismatchError(
            f"payload of {len(payload)} bytes does not match shape {shape}")
    array = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return header, array.astype(np_dtype.newbyteorder("="))


def write_container(path, obj, seed=None) -> None:
    """Serialize any of the package's container objects to ``path``."""
    from .metrics import EvalReport
    from .network import NetParams
    from .sampling import MaskSet

    if isinstance(obj, EchoSeries):
        write_raw(path, "echoes", obj.data, te_ms=obj.te_ms, seed=seed)
    elif isinstance(obj, KSpaceSet):
        m = obj.mask_ref
        write_raw(path, "kspace", obj.data, te_ms=obj.te_ms, seed=seed,
                  extra={"mask": m.to_header()})
    elif isinstance(obj, MaskSet) or (
            isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], MaskSet)):
        sets = [obj] if isinstance(obj, MaskSet) else list(obj)
        lines = np.stack([s.lines for s in sets]).astype(np.float32)
        write_raw(path, "maskset", lines, seed=seed,
                  extra={"sets": [s.to_header(with_lines=False) for s in sets],
                         "single": isinstance(obj, MaskSet)})
    elif isinstance(obj, ParamMaps):
        stack = np.stack([obj.i0, obj.t2_ms, obj.roi_labels]).astype(np.float32)
        write_raw(path, "maps", stack, seed=seed)
    elif isinstance(obj, NetParams):
        write_raw(path, "netparams", obj.to_flat(), seed=seed, extra=obj.header())
    elif isinstance(obj, EvalReport):
        values, extra = obj.to_payload()
        write_raw(path, "report", values, seed=seed, extra=extra)
    else:
        raise ContainerError(f"cannot serialize object of type {type(obj).__name__}")


def read_container(path):
    """Inverse of :func:`write_container`."""
    from .metrics import EvalReport
    from .network import NetParams
    from .sampling import MaskSet

    header, array = read_raw(path)
    kind, extra = header["kind"], header.get("extra") or {}
    try:
        if kind == "echoes":
            return EchoSeries(header["te_ms"], array)
        if kind == "kspace":
            mask = MaskSet.from_header(extra["mask"])
            return KSpaceSet(array, mask, header["te_ms"])
        if kind == "maskset":
            sets = [MaskSet.from_header(h, lines) for h, lines in zip(extra["sets"], array)]
            return sets[0] if extra.get("single") else sets
        if kind == "maps":
            if array.ndim != 3 or array.shape[0] != 3:
                raise ShapeMismatchError(f"maps payload must be [3, ny, nx], got {array.shape}")
            return ParamMaps(array[0], array[1], array[2].astype(np.int32))
        if kind == "netparams":
            return NetParams.from_flat(array, extra)
        return EvalReport.from_payload(array, extra)
    except KeyError as exc:
        raise ContainerError(f"header of {path} lacks field {exc}") from exc
