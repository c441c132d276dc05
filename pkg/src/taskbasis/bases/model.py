"""The fitted basis artifact and its TVBM1 container.

TVBM1 layout (little-endian, column-major)::

    b"TVBM1" | u8 width | u32 d | u32 T | u8 has_theta0 | u8 method | u32 M
    | u8 has_encoder | u8 has_mu
    | theta0 (d, optional) | B (d x M) | W_e (T x M, optional) | W_d (M x T)
    | mu (d, optional) | f64 loss | u32 json_len | JSON metadata
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from ..vecstore import FormatError, TaskVectorMatrix, _float_dtype, _frozen, _read_floats

SIMPLEX_TOL = 1e-10


class Method(str, Enum):
    AE = "AE"
    PCA = "PCA"
    RAND_SELECT = "RandSelect"
    RAND_PROJ = "RandProj"


_TAGS = {Method.AE: 0, Method.PCA: 1, Method.RAND_SELECT: 2, Method.RAND_PROJ: 3}
_FROM_TAG = {v: k for k, v in _TAGS.items()}


class UnsupportedOperation(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class BasisModel:
    """M basis vectors plus the encoder/decoder relating them to the T sources.

    Reconstruction is always ``mu 1^T + B @ W_d`` with ``mu`` zero unless the
    model is a centered PCA. ``W_e`` is absent for RandProj.
    """

    method: Method
    B: np.ndarray
    W_e: np.ndarray | None
    W_d: np.ndarray | None
    loss: float
    source_names: tuple[str, ...]
    mu: np.ndarray | None = None
    theta0: np.ndarray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        method = Method(self.method)
        object.__setattr__(self, "method", method)
        B = np.asarray(self.B, dtype=np.float64)
        if B.ndim != 2:
            raise ValueError("B must be a d x M matrix")
        d, m = B.shape
        t = len(self.source_names)
        object.__setattr__(self, "B", _frozen(B))
        if self.W_e is not None:
            we = np.asarray(self.W_e, dtype=np.float64)
            if we.shape != (t, m):
                raise ValueError(f"W_e has shape {we.shape}, expected {(t, m)}")
            object.__setattr__(self, "W_e", _frozen(we))
        if self.W_d is not None:
            wd = np.asarray(self.W_d, dtype=np.float64)
            if wd.shape != (m, t):
                raise ValueError(f"W_d has shape {wd.shape}, expected {(m, t)}")
            object.__setattr__(self, "W_d", _frozen(wd))
        for name in ("mu", "theta0"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).reshape(-1)
                if v.shape != (d,):
                    raise ValueError(f"{name} has length {v.size}, expected {d}")
                object.__setattr__(self, name, _frozen(v))
        object.__setattr__(self, "source_names", tuple(self.source_names))
        object.__setattr__(self, "loss", float(self.loss))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @property
    def T(self) -> int:
        return len(self.source_names)

    def base_point(self) -> np.ndarray:
        return self.theta0 if self.theta0 is not None else np.zeros(self.d)

    def as_matrix(self) -> TaskVectorMatrix:
        """The basis vectors themselves as a collection (for merging)."""
        names = tuple(f"basis{m}" for m in range(self.M))
        return TaskVectorMatrix(self.B, names, self.theta0)

    def simplex_violation(self) -> float:
        """Largest deviation of the encoder columns from the probability simplex."""
        if self.W_e is None:
            return float("inf")
        neg = float(max(0.0, -self.W_e.min()))
        sums = float(np.max(np.abs(self.W_e.sum(axis=0) - 1.0)))
        return max(neg, sums)

    def convexity_residual(self, sources: TaskVectorMatrix) -> float:
        """max |B - T W_e| relative to max |B|."""
        if self.W_e is None:
            return float("inf")
        diff = np.max(np.abs(self.B - sources.columns @ self.W_e))
        return float(diff / max(np.max(np.abs(self.B)), 1e-300))


_HEAD = struct.Struct("<5sBIIBBIBB")


def encode_model(model: BasisModel, width: int = 8) -> bytes:
    if width not in (4, 8):
        raise ValueError("float width must be 4 or 8")
    if model.W_d is None:
        raise UnsupportedOperation("models without a decoder cannot be serialized")
    dt = _float_dtype(width)
    parts = [
        _HEAD.pack(
            b"TVBM1", width, model.d, model.T, int(model.theta0 is not None),
            _TAGS[model.method], model.M, int(model.W_e is not None), int(model.mu is not None),
        )
    ]

    def mat(a):
        parts.append(np.asarray(a, dtype=dt).tobytes(order="F"))

    if model.theta0 is not None:
        mat(model.theta0)
    mat(model.B)
    if model.W_e is not None:
        mat(model.W_e)
    mat(model.W_d)
    if model.mu is not None:
        mat(model.mu)
    parts.append(struct.pack("<d", model.loss))
    meta = {"source_names": list(model.source_names), "metadata": model.metadata}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def decode_model(buf: bytes) -> BasisModel:
    if len(buf) < _HEAD.size:
        raise FormatError("file shorter than TVBM1 header", len(buf))
    magic, width, d, t, has_theta0, tag, m, has_we, has_mu = _HEAD.unpack_from(buf, 0)
    if magic != b"TVBM1":
        raise FormatError(f"bad magic {magic!r}, expected b'TVBM1'", 0)
    if width not in (4, 8):
        raise FormatError(f"float width flag must be 4 or 8, got {width}", 5)
    if tag not in _FROM_TAG:
        raise FormatError(f"unknown method tag {tag}", 15)
    if d == 0 or t == 0 or m == 0:
        raise FormatError("zero dimension in header", 6)
    dt = _float_dtype(width)
    off = _HEAD.size

    def read(shape, what):
        nonlocal off
        flat, off = _read_floats(buf, off, int(np.prod(shape)), dt, what)
        return flat.reshape(shape, order="F")

    theta0 = read((d,), "theta0") if has_theta0 else None
    B = read((d, m), "basis matrix")
    we = read((t, m), "encoder weights") if has_we else None
    wd = read((m, t), "decoder weights")
    mu = read((d,), "mean vector") if has_mu else None
    if off + 12 > len(buf):
        raise FormatError("truncated loss/metadata trailer", off)
    (loss,) = struct.unpack_from("<d", buf, off)
    off += 8
    (n_meta,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + n_meta != len(buf):
        raise FormatError("metadata length does not match file size", off - 4)
    try:
        meta = json.loads(buf[off:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid metadata JSON: {exc}", off) from exc
    names = tuple(meta.get("source_names") or (f"task{i}" for i in range(t)))
    if len(names) != t:
        raise FormatError(f"metadata lists {len(names)} source names for T={t}", off)
    return BasisModel(_FROM_TAG[tag], B, we, wd, loss, names, mu, theta0, meta.get("metadata") or {})


def save_model(model: BasisModel, path: str | Path, width: int = 8) -> None:
    Path(path).write_bytes(encode_model(model, width))


def load_model(path: str | Path) -> BasisModel:
    return decode_model(Path(path).read_bytes())
