"""Reference basis constructions: PCA, random task selection, random projection."""

from __future__ import annotations

import warnings

import numpy as np

from ..vecstore import GramMatrix, TaskVectorMatrix, gram, random_orthonormal, spectral_bounds
from .autoencoder import ae_loss_gram, ols_decoder
from .model import BasisModel, Method

PCA_WEIGHTINGS = ("uniform", "positive_softmax")


def _orient(V: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is nonnegative."""
    V = V.copy()
    for m in range(V.shape[1]):
        k = int(np.argmax(np.abs(V[:, m])))
        if V[k, m] < 0:
            V[:, m] = -V[:, m]
    return V


def positive_softmax_weights(V: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Softmax over the strictly positive entries of each loading column.

    Returns the T x M weights and the indices of columns that had no
    positive entry (those fall back to uniform 1/T).
    """
    V = np.asarray(V, dtype=np.float64)
    t, M = V.shape
    W = np.zeros((t, M))
    fallback = []
    for m in range(M):
        pos = V[:, m] > 0
        if not pos.any():
            W[:, m] = 1.0 / t
            fallback.append(m)
            continue
        z = V[pos, m]
        e = np.exp(z - z.max())
        W[pos, m] = e / e.sum()
    return W, fallback


def fit_pca(m: TaskVectorMatrix, M: int, center: bool = True, weighting: str = "uniform") -> BasisModel:
    """Rank-M PCA through the eigensystem of the (centered) Gram matrix.

    ``B = U_M S_M`` which equals ``T_c V_M``; ``W_d = V_M^T``. ``W_e`` holds
    surrogate encoder weights: uniform ``1/T`` or the positive-softmax of
    the loadings.
    """
    if weighting not in PCA_WEIGHTINGS:
        raise ValueError(f"weighting must be one of {PCA_WEIGHTINGS}")
    if M < 1:
        raise ValueError("M must be >= 1")
    mu = m.columns.mean(axis=1) if center else None
    centered = TaskVectorMatrix(m.columns - mu[:, None], m.names) if center else m
    gc = gram(centered)
    r = gc.rank()
    if M > r:
        warnings.warn(f"M={M} exceeds numerical rank {r}; reducing to {r}", UserWarning, stacklevel=2)
        M = r
    if M < 1:
        raise ValueError("collection has numerical rank 0; nothing to decompose")
    V = _orient(gc.eigenvectors[:, :M])
    B = centered.columns @ V
    loss = ae_loss_gram(gc, V, V.T)
    meta = {
        "center": center,
        "weighting": weighting,
        "frobenius_lb": spectral_bounds(gc, M).frobenius_lb,
        "singular_values": np.sqrt(gc.eigenvalues[:M]).tolist(),
    }
    if weighting == "uniform":
        W_e = np.full((m.T, M), 1.0 / m.T)
    else:
        W_e, fallback = positive_softmax_weights(V)
        meta["uniform_fallback_columns"] = fallback
    return BasisModel(Method.PCA, B, W_e, V.T, loss, m.names, mu=mu, theta0=m.theta0, metadata=meta)


def pca_positive_softmax_weights(model: BasisModel) -> np.ndarray:
    """Convex surrogate encoder for a PCA model from its positive loadings."""
    if model.method is not Method.PCA:
        raise ValueError(f"expected a PCA model, got {model.method.value}")
    W, fallback = positive_softmax_weights(model.W_d.T)
    if fallback:
        warnings.warn(
            f"PCA components {fallback} have no positive loading; using uniform weights",
            UserWarning,
            stacklevel=2,
        )
    return W


def fit_rand_select(m: TaskVectorMatrix, M: int, seed: int = 0, g: GramMatrix | None = None) -> BasisModel:
    """Keep M task vectors chosen uniformly at random; decoder is the OLS solution."""
    if not 1 <= M <= m.T:
        raise ValueError(f"M={M} out of range [1, {m.T}]")
    rng = np.random.default_rng(seed)
    idx = rng.choice(m.T, size=M, replace=False)
    W_e = np.zeros((m.T, M))
    W_e[idx, np.arange(M)] = 1.0
    g = gram(m) if g is None else g
    W_d = ols_decoder(g, W_e)
    meta = {"seed": seed, "selected": [int(i) for i in idx],
            "frobenius_lb": spectral_bounds(g, M).frobenius_lb}
    return BasisModel(Method.RAND_SELECT, m.columns[:, idx], W_e, W_d, ae_loss_gram(g, W_e, W_d),
                      m.names, theta0=m.theta0, metadata=meta)


def fit_rand_proj(m: TaskVectorMatrix, M: int, seed: int = 0) -> BasisModel:
    """Random orthonormal Q with stored projection coefficients Q^T T."""
    Q = random_orthonormal(m.d, M, seed)
    W_d = Q.T @ m.columns
    resid = m.columns - Q @ W_d
    loss = float(np.sum(resid * resid))
    return BasisModel(Method.RAND_PROJ, Q, None, W_d, loss, m.names, theta0=m.theta0,
                      metadata={"seed": seed})
