"""Task-vector collections, their Gram matrices, and the TVB1 file format.

TVB1 layout (little-endian, column-major)::

    b"TVB1" | u8 width (4 or 8) | u32 d | u32 T | u8 has_theta0
    | theta0 (d floats, optional) | T columns of d floats
    | u32 json_len | json_len bytes of UTF-8 JSON metadata

Payloads are widened to float64 on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .linalg import jacobi_eigh, power_iteration, random_orthonormal

__all__ = [
    "FormatError",
    "GramMatrix",
    "SpectralBound",
    "TaskVectorMatrix",
    "eigensym",
    "gram",
    "load_collection",
    "power_iteration_top_eigenvalue",
    "random_orthonormal",
    "save_collection",
    "spectral_bounds",
]

MAGIC = b"TVB1"
PSD_TOL = 1e-8
RANK_TOL = 1e-12


class FormatError(ValueError):
    """Malformed binary payload. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TaskVectorMatrix:
    """A d x T collection of task vectors, column i holding tau_i."""

    columns: np.ndarray
    names: tuple[str, ...] = ()
    theta0: np.ndarray | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim == 1:
            cols = cols[:, None]
        if cols.ndim != 2:
            raise ValueError(f"columns must be a d x T matrix, got ndim={cols.ndim}")
        d, t = cols.shape
        if t < 1:
            raise ValueError("empty collection")
        if d < 1:
            raise ValueError("task vectors must have positive dimension")
        if not np.all(np.isfinite(cols)):
            raise ValueError("task vectors contain non-finite values")
        names = tuple(self.names) if self.names else tuple(f"task{i}" for i in range(t))
        if len(names) != t:
            raise ValueError(f"{len(names)} names for {t} task vectors")
        if len(set(names)) != t:
            raise ValueError("task names must be unique")
        object.__setattr__(self, "columns", _frozen(cols))
        object.__setattr__(self, "names", names)
        if self.theta0 is not None:
            theta0 = np.asarray(self.theta0, dtype=np.float64).reshape(-1)
            if theta0.shape != (d,):
                raise ValueError(f"theta0 has length {theta0.size}, expected {d}")
            if not np.all(np.isfinite(theta0)):
                raise ValueError("theta0 contains non-finite values")
            object.__setattr__(self, "theta0", _frozen(theta0))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def d(self) -> int:
        return self.columns.shape[0]

    @property
    def T(self) -> int:
        return self.columns.shape[1]

    def column(self, i: int) -> np.ndarray:
        return self.columns[:, i]

    def base_point(self) -> np.ndarray:
        """theta0, or the origin when the collection carries none."""
        return self.theta0 if self.theta0 is not None else np.zeros(self.d)

    @classmethod
    def from_vectors(
        cls,
        vectors: Sequence[np.ndarray],
        names: Sequence[str] = (),
        theta0: np.ndarray | None = None,
    ) -> "TaskVectorMatrix":
        return cls(np.column_stack([np.asarray(v, dtype=np.float64) for v in vectors]), tuple(names), theta0)


@dataclass(frozen=True)
class SpectralBound:
    M: int
    frobenius_lb: float
    spectral_lb: float
    rank: int


class GramMatrix:
    """T x T Gram matrix of a collection with a lazily computed eigensystem.

    Eigenvalues are clamped at zero when they are negative within
    ``PSD_TOL * lambda_max``; anything more negative is rejected.
    """

    def __init__(self, entries: np.ndarray):
        g = np.array(entries, dtype=np.float64, copy=True)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"Gram matrix must be square, got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("Gram matrix has non-finite entries")
        iu = np.triu_indices(g.shape[0], 1)
        g.T[iu] = g[iu]
        g.flags.writeable = False
        self.entries = g

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def _eig(self) -> tuple[np.ndarray, np.ndarray]:
        w, q = jacobi_eigh(self.entries)
        top = max(float(w[0]), 0.0) if w.size else 0.0
        if w.size and w[-1] < -PSD_TOL * top:
            raise ValueError(
                f"Gram matrix is not PSD: lambda_min={w[-1]:.3e}, lambda_max={top:.3e}"
            )
        w = np.where(w < 0.0, 0.0, w)
        w.flags.writeable = False
        q.flags.writeable = False
        return w, q

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eig[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self._eig[1]

    @property
    def trace(self) -> float:
        return float(np.trace(self.entries))

    def rank(self) -> int:
        w = self.eigenvalues
        if w.size == 0 or w[0] <= 0.0:
            return 0
        return int(np.sum(w > RANK_TOL * w[0]))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


def gram(m: TaskVectorMatrix) -> GramMatrix:
    """G[i, j] = <tau_i, tau_j>, accumulated one column pair at a time.

    Only the upper triangle is computed; the reduction order is fixed so the
    result does not depend on BLAS threading.
    """
    cols = m.columns
    t = m.T
    g = np.empty((t, t))
    for i in range(t):
        ci = np.ascontiguousarray(cols[:, i])
        for j in range(i, t):
            g[i, j] = float(np.dot(ci, cols[:, j]))
            g[j, i] = g[i, j]
    return GramMatrix(g)


def eigensym(g: GramMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nonincreasing eigenvalues and orthonormal eigenvectors of a symmetric matrix."""
    if isinstance(g, GramMatrix):
        return g.eigenvalues, g.eigenvectors
    return jacobi_eigh(np.asarray(g, dtype=np.float64))


def spectral_bounds(g: GramMatrix, M: int) -> SpectralBound:
    """Best achievable rank-M reconstruction errors (Eckart-Young).

    ``frobenius_lb`` is the tail sum of Gram eigenvalues past M and
    ``spectral_lb`` is the (M+1)-th eigenvalue; both vanish when M reaches
    the numerical rank.
    """
    if not 1 <= M <= g.size:
        raise ValueError(f"M={M} out of range [1, {g.size}]")
    r = g.rank()
    if M >= r:
        return SpectralBound(M, 0.0, 0.0, r)
    tail = g.eigenvalues[M:r]
    return SpectralBound(M, float(np.sum(tail)), float(tail[0]), r)


def power_iteration_top_eigenvalue(apply, dim: int, tol: float = 1e-10, max_iters: int = 10_000, seed: int = 0):
    """See :func:`taskbasis.linalg.power_iteration`."""
    return power_iteration(apply, dim, tol=tol, max_iters=max_iters, seed=seed)


# --- TVB1 I/O -------------------------------------------------------------

_HEADER = struct.Struct("<4sBIIB")


def _float_dtype(width: int) -> np.dtype:
    return np.dtype("<f4") if width == 4 else np.dtype("<f8")


def encode_collection(m: TaskVectorMatrix, width: int = 8, metadata: dict | None = None) -> bytes:
    if width not in (4, 8):
        raise ValueError("float width must be 4 or 8")
    dt = _float_dtype(width)
    parts = [_HEADER.pack(MAGIC, width, m.d, m.T, int(m.theta0 is not None))]
    if m.theta0 is not None:
        parts.append(m.theta0.astype(dt).tobytes())
    parts.append(np.asfortranarray(m.columns.astype(dt)).tobytes(order="F"))
    meta = {"names": list(m.names), "provenance": m.metadata}
    if metadata:
        meta.update(metadata)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def _read_floats(buf: bytes, offset: int, count: int, dt: np.dtype, what: str) -> tuple[np.ndarray, int]:
    nbytes = count * dt.itemsize
    if offset + nbytes > len(buf):
        raise FormatError(f"truncated {what}: need {nbytes} bytes, {len(buf) - offset} available", offset)
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise FormatError(f"non-finite value in {what}", offset + int(bad[0]) * dt.itemsize)
    return arr, offset + nbytes


def decode_collection(buf: bytes) -> TaskVectorMatrix:
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than TVB1 header", len(buf))
    magic, width, d, t, has_theta0 = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if width not in (4, 8):
        raise FormatError(f"float width flag must be 4 or 8, got {width}", 4)
    if d == 0:
        raise FormatError("dimension d is zero", 5)
    if t == 0:
        raise FormatError("empty collection", 9)
    if has_theta0 not in (0, 1):
        raise FormatError(f"has-theta0 flag must be 0 or 1, got {has_theta0}", 13)
    dt = _float_dtype(width)
    off = _HEADER.size
    theta0 = None
    if has_theta0:
        theta0, off = _read_floats(buf, off, d, dt, "theta0")
    flat, off = _read_floats(buf, off, d * t, dt, "task vector payload")
    cols = flat.reshape((d, t), order="F")
    if off + 4 > len(buf):
        raise FormatError("missing metadata length", off)
    (n_meta,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + n_meta != len(buf):
        raise FormatError(f"metadata length {n_meta} does not match remaining {len(buf) - off} bytes", off - 4)
    try:
        meta = json.loads(buf[off:].decode("utf-8")) if n_meta else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"invalid metadata JSON: {exc}", off) from exc
    names = tuple(meta.get("names") or ())
    if names and len(names) != t:
        raise FormatError(f"metadata lists {len(names)} names for {t} columns", off)
    return TaskVectorMatrix(cols, names, theta0, meta.get("provenance") or {})


def save_collection(m: TaskVectorMatrix, path: str | Path, width: int = 8) -> None:
    Path(path).write_bytes(encode_collection(m, width))


def load_collection(path: str | Path) -> TaskVectorMatrix:
    return decode_collection(Path(path).read_bytes())
