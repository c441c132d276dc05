"""Dense symmetric linear algebra used throughout the package.

Everything here works on small T x T matrices (T up to a few hundred) or on
matrix-free operators, in float64.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np


class EigenConvergenceError(RuntimeError):
    """Raised when the Jacobi sweep limit is hit before the matrix is diagonal."""

    def __init__(self, sweeps: int, off_diagonal: float):
        super().__init__(
            f"Jacobi eigensolver did not converge after {sweeps} sweeps "
            f"(off-diagonal Frobenius residual {off_diagonal:.3e})"
        )
        self.sweeps = sweeps
        self.off_diagonal = off_diagonal


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(
    a: np.ndarray, max_sweeps: int = 100, rtol: float = 1e-15
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a real symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    nonincreasing order and eigenvectors as orthonormal columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    if n == 0:
        return np.zeros(0), v
    a = 0.5 * (a + a.T)
    scale = float(np.linalg.norm(a))
    if scale == 0.0:
        return np.zeros(n), v

    target = rtol * scale
    for sweep in range(max_sweeps):
        off = _off_norm(a)
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                # skip rotations that cannot change the diagonal in float64
                if sweep > 3 and abs(apq) < 1e-3 * np.finfo(float).eps * min(abs(app), abs(aqq)):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = _off_norm(a)
        if off > target:
            raise EigenConvergenceError(max_sweeps, off)

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    seed: int = 0,
) -> PowerIterationResult:
    """Largest eigenvalue of a symmetric PSD operator given only its action.

    The start vector is drawn from ``seed`` so results are reproducible. The
    estimate is the Rayleigh quotient; convergence is declared when it
    changes by less than ``tol`` relative between iterations.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for it in range(1, max_iters + 1):
        y = np.asarray(apply(x), dtype=np.float64)
        norm_y = float(np.linalg.norm(y))
        if norm_y == 0.0:
            return PowerIterationResult(0.0, it, True)
        new = float(x @ y)
        x = y / norm_y
        if it > 1 and abs(new - estimate) <= tol * abs(new):
            return PowerIterationResult(new, it, True)
        estimate = new
    return PowerIterationResult(estimate, max_iters, False)


def random_orthonormal(d: int, m: int, seed: int) -> np.ndarray:
    """d x m matrix with orthonormal columns from QR of a Gaussian matrix."""
    if m > d:
        raise ValueError(f"cannot draw {m} orthonormal columns in dimension {d}")
    if m < 1:
        raise ValueError("m must be positive")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, m)))
    # fix the QR sign ambiguity so the draw is a deterministic function of the seed
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs
